"""HTTP/JSON API over the engine.

Instructor endpoints (bot lifecycle, document upload, corrections, record
listing) optionally require a bearer token; the student query path instead
carries the per-bot public key. Both checks are disabled when the
corresponding config values are absent, which is the development default.
"""

from __future__ import annotations

from datetime import datetime

from fastapi import Depends, FastAPI, Header, HTTPException, Query
from pydantic import BaseModel, Field

from .corpus import IngestionError, UnsupportedFormatError
from .dense import EmbeddingError
from .engine import Engine, UnknownBotError
from .feedback import InvalidFeedbackError, UnknownRecordError
from .generation import LLMError
from .pipeline import ContextPassage
from .store import DuplicateBotNameError, DuplicateUploadError

SNIPPET_LENGTH = 300


class CreateBotRequest(BaseModel):
    name: str = Field(min_length=1)
    greeting: str = ""
    openness: int = Field(default=0, ge=0, le=100)


class UploadRequest(BaseModel):
    source_name: str = Field(min_length=1)
    format: str = "plain"
    text: str


class QueryRequest(BaseModel):
    text: str = Field(min_length=1)
    session_id: str = "default"


class RatingRequest(BaseModel):
    rating: str


class CorrectionRequest(BaseModel):
    corrected_answer: str
    author: str = ""


def _passage_payload(passage: ContextPassage) -> dict:
    return {
        "chunk_ref": passage.chunk_ref,
        "heading": passage.heading,
        "snippet": passage.body[:SNIPPET_LENGTH],
        "rerank_score": passage.rerank_score,
        "fused_score": passage.fused_score,
        "provenance": sorted(passage.provenance),
    }


def _record_payload(record) -> dict:
    return {
        "record_id": record.record_id,
        "session_id": record.session_id,
        "bot_id": record.bot_id,
        "question": record.question,
        "answer": record.answer,
        "passages_used": list(record.passages_used),
        "rating": record.rating,
        "correction": record.correction,
        "correction_author": record.correction_author,
        "created_at": record.created_at.isoformat(),
        "corrected_at": record.corrected_at.isoformat() if record.corrected_at else None,
        "error": record.error,
    }


def _parse_timestamp(value: str | None, name: str) -> datetime | None:
    if value is None:
        return None
    try:
        return datetime.fromisoformat(value)
    except ValueError:
        raise HTTPException(422, f"{name} must be an ISO-8601 timestamp") from None


def create_app(engine: Engine) -> FastAPI:
    app = FastAPI(title="ragserve", version="0.1.0")
    app.state.engine = engine

    def instructor_guard(authorization: str | None = Header(default=None)) -> None:
        token = engine.config.instructor_token
        if not token:
            return
        if authorization != f"Bearer {token}":
            raise HTTPException(401, "instructor token required")

    def bot_key_guard(bot_id: str, x_bot_key: str | None = Header(default=None)) -> None:
        if not engine.config.require_bot_key:
            return
        try:
            bot = engine.get_bot(bot_id)
        except UnknownBotError:
            raise HTTPException(404, f"unknown bot: {bot_id}") from None
        if x_bot_key != bot.config.public_key:
            raise HTTPException(401, "bot key required")

    @app.get("/health")
    def health():
        return {"status": "ok", "bots": len(engine.bots)}

    @app.post("/bots", status_code=201, dependencies=[Depends(instructor_guard)])
    def create_bot(request: CreateBotRequest):
        try:
            config = engine.create_bot(request.name, request.greeting, request.openness)
        except DuplicateBotNameError as exc:
            raise HTTPException(409, str(exc)) from exc
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc
        return {
            "bot_id": config.bot_id,
            "name": config.name,
            "greeting": config.greeting,
            "openness": config.openness,
            "public_key": config.public_key,
            "embed_snippet": f'<script src="/widget.js" data-bot="{config.bot_id}"></script>',
        }

    @app.get("/bots", dependencies=[Depends(instructor_guard)])
    def list_bots():
        return {
            "bots": [
                {
                    "bot_id": bot.config.bot_id,
                    "name": bot.config.name,
                    "greeting": bot.config.greeting,
                    "openness": bot.config.openness,
                    "documents": len(bot.documents),
                    "chunks": len(bot.chunks),
                }
                for bot in engine.bots.values()
            ]
        }

    @app.get("/bots/{bot_id}", dependencies=[Depends(bot_key_guard)])
    def get_bot(bot_id: str):
        try:
            bot = engine.get_bot(bot_id)
        except UnknownBotError:
            raise HTTPException(404, f"unknown bot: {bot_id}") from None
        return {
            "bot_id": bot.config.bot_id,
            "name": bot.config.name,
            "greeting": bot.config.greeting,
            "openness": bot.config.openness,
        }

    @app.post(
        "/bots/{bot_id}/documents",
        status_code=201,
        dependencies=[Depends(instructor_guard)],
    )
    def upload_document(bot_id: str, request: UploadRequest):
        try:
            report = engine.upload_document(
                bot_id, request.source_name, request.text, request.format
            )
        except UnknownBotError:
            raise HTTPException(404, f"unknown bot: {bot_id}") from None
        except UnsupportedFormatError as exc:
            raise HTTPException(415, str(exc)) from exc
        except DuplicateUploadError as exc:
            raise HTTPException(409, str(exc)) from exc
        except IngestionError as exc:
            raise HTTPException(422, str(exc)) from exc
        except EmbeddingError as exc:
            # nothing was indexed; the corpus is exactly as it was
            raise HTTPException(502, f"embedding provider failed: {exc}") from exc
        return {
            "doc_id": report.doc_id,
            "chunk_count": report.chunk_count,
            "token_total": report.token_total,
        }

    @app.post("/bots/{bot_id}/query", dependencies=[Depends(bot_key_guard)])
    def query(bot_id: str, request: QueryRequest):
        try:
            result = engine.query(bot_id, request.session_id, request.text)
        except UnknownBotError:
            raise HTTPException(404, f"unknown bot: {bot_id}") from None
        except LLMError as exc:
            raise HTTPException(502, f"completion failed: {exc}") from exc
        except EmbeddingError as exc:
            raise HTTPException(502, f"embedding provider failed: {exc}") from exc
        return {
            "answer": result.answer_text,
            "passages": [_passage_payload(p) for p in result.passages],
            "record_id": result.record_id,
            "degraded": result.degraded,
            "latency_ms": result.latency_ms,
        }

    @app.post("/records/{record_id}/rating")
    def rate_record(record_id: str, request: RatingRequest):
        try:
            record = engine.rate_record(record_id, request.rating)
        except UnknownRecordError:
            raise HTTPException(404, f"unknown record: {record_id}") from None
        except InvalidFeedbackError as exc:
            raise HTTPException(422, str(exc)) from exc
        return _record_payload(record)

    @app.post("/records/{record_id}/correction", dependencies=[Depends(instructor_guard)])
    def correct_record(record_id: str, request: CorrectionRequest):
        try:
            record = engine.correct_record(record_id, request.corrected_answer, request.author)
        except UnknownRecordError:
            raise HTTPException(404, f"unknown record: {record_id}") from None
        except (InvalidFeedbackError, IngestionError) as exc:
            raise HTTPException(422, str(exc)) from exc
        return _record_payload(record)

    @app.get("/bots/{bot_id}/records", dependencies=[Depends(instructor_guard)])
    def list_records(
        bot_id: str,
        from_: str | None = Query(default=None, alias="from"),
        to: str | None = Query(default=None),
        filter: str = "all",
    ):
        start = _parse_timestamp(from_, "from")
        end = _parse_timestamp(to, "to")
        try:
            records = engine.list_records(bot_id, start, end, filter)
        except UnknownBotError:
            raise HTTPException(404, f"unknown bot: {bot_id}") from None
        except InvalidFeedbackError as exc:
            raise HTTPException(422, str(exc)) from exc
        return {"records": [_record_payload(r) for r in records]}

    return app
