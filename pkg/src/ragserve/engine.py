"""Multi-bot orchestration: lifecycle, ingestion, querying, snapshots.

The engine owns the durable store and one :class:`BotState` per bot. Index
snapshots are written next to the database after every corpus mutation; on
startup they are loaded back if they still match the stored corpus, and
rebuilt from the documents otherwise. The CLI and the HTTP API both call
into this class, so local mode and served mode cannot drift.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import tarfile
import threading
import uuid
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import generation
from .config import ServiceConfig
from .corpus import (
    Document,
    DocumentFormat,
    UnsupportedFormatError,
    chunk_document,
)
from .feedback import (
    InteractionRecord,
    list_interactions,
    rate,
    submit_correction,
)
from .pipeline import RetrievalConfig
from .sparse import SparseIndex
from .state import BotConfig, BotState, IngestReport
from .store import DuplicateUploadError, SqliteRecordLog, Store

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "ragserve-bot-archive"
ARCHIVE_VERSION = 1

PDF_GUIDANCE = (
    "PDF input is not supported; convert the file to plain text or Markdown "
    "(e.g. with pdftotext) and upload the result."
)


class UnknownBotError(KeyError):
    """No bot with that id."""


class SnapshotVersionError(ValueError):
    """Archive was produced by an incompatible version."""


def _bot_config_to_json(config: BotConfig) -> str:
    data = asdict(config)
    data["created_at"] = config.created_at.isoformat()
    return json.dumps(data)


def _bot_config_from_json(raw: str) -> BotConfig:
    data = json.loads(raw)
    data["created_at"] = datetime.fromisoformat(data["created_at"])
    data["retrieval"] = RetrievalConfig(**data["retrieval"])
    return BotConfig(**data)


class Engine:
    def __init__(self, config: ServiceConfig):
        self.config = config
        self.data_dir = Path(config.data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.store = Store(self.data_dir / "ragserve.db")
        self.records = SqliteRecordLog(self.store)
        self.bots: dict[str, BotState] = {}
        self._mutation_locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        for bot_id, config_json in self.store.list_bots():
            self._load_bot(_bot_config_from_json(config_json))

    def close(self) -> None:
        self.store.close()

    # -- bot lifecycle -----------------------------------------------------------

    def _bot_dir(self, bot_id: str) -> Path:
        path = self.data_dir / "bots" / bot_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _mutation_lock(self, bot_id: str) -> threading.Lock:
        with self._guard:
            lock = self._mutation_locks.get(bot_id)
            if lock is None:
                lock = threading.Lock()
                self._mutation_locks[bot_id] = lock
            return lock

    def _new_state(self, config: BotConfig) -> BotState:
        return BotState(
            config=config,
            embedder=self.config.build_embedder(),
            reranker=self.config.build_reranker(),
            llm=self.config.build_llm(),
            records=self.records,
            max_chunk_tokens=self.config.max_chunk_tokens,
        )

    def create_bot(
        self,
        name: str,
        greeting: str = "",
        openness: int = 0,
        retrieval: RetrievalConfig | None = None,
    ) -> BotConfig:
        config = BotConfig(
            bot_id=uuid.uuid4().hex[:12],
            name=name,
            greeting=greeting,
            openness=openness,
            retrieval=retrieval or RetrievalConfig(),
            embedding_provider_ref=self.config.embedding_provider,
            llm_ref=self.config.llm_provider,
        )
        self.store.add_bot(config.bot_id, config.name, _bot_config_to_json(config))
        self.bots[config.bot_id] = self._new_state(config)
        self._save_indexes(config.bot_id)
        return config

    def get_bot(self, bot_id: str) -> BotState:
        bot = self.bots.get(bot_id)
        if bot is None:
            raise UnknownBotError(bot_id)
        return bot

    def _load_bot(self, config: BotConfig) -> None:
        """Restore a bot from the store, preferring index snapshots when they
        still cover exactly the stored corpus."""
        state = self._new_state(config)
        documents = self.store.list_documents(config.bot_id)
        expected_chunks = {}
        for doc in documents:
            for chunk in chunk_document(doc, self.config.max_chunk_tokens):
                expected_chunks[chunk.chunk_id] = chunk
        state.documents = {doc.doc_id: doc for doc in documents}
        state.chunks = expected_chunks
        state.sessions = self.store.load_sessions(config.bot_id)

        bot_dir = self._bot_dir(config.bot_id)
        sparse_path = bot_dir / "sparse.idx"
        dense_path = bot_dir / "dense.idx"
        loaded = False
        if sparse_path.exists() and dense_path.exists():
            try:
                from .dense import DenseIndex

                sparse = SparseIndex.load(sparse_path)
                dense = DenseIndex.load(dense_path)
                if set(sparse.chunk_lengths) == set(expected_chunks) == set(dense.refs):
                    state.sparse = sparse
                    state.dense = dense
                    loaded = True
                else:
                    logger.warning(
                        "index snapshots for bot %s are stale; rebuilding", config.bot_id
                    )
            except Exception:
                logger.exception("failed to load index snapshots for bot %s", config.bot_id)
        if not loaded and expected_chunks:
            chunks = list(expected_chunks.values())
            vectors = state.embedder.embed_batch([c.retrieval_text for c in chunks])
            state.sparse.add_chunks(chunks)
            state.dense.add_vectors(zip((c.chunk_id for c in chunks), vectors))
            self._save_indexes_for(state)
        self.bots[config.bot_id] = state

    def _save_indexes_for(self, state: BotState) -> None:
        bot_dir = self._bot_dir(state.config.bot_id)
        for name, saver in (("sparse.idx", state.sparse.save), ("dense.idx", state.dense.save)):
            tmp = bot_dir / f".{name}.tmp"
            saver(tmp)
            tmp.replace(bot_dir / name)

    def _save_indexes(self, bot_id: str) -> None:
        self._save_indexes_for(self.get_bot(bot_id))

    # -- ingestion ----------------------------------------------------------------

    def upload_document(
        self, bot_id: str, source_name: str, text: str, format: str
    ) -> IngestReport:
        bot = self.get_bot(bot_id)
        if format == "pdf" or source_name.lower().endswith(".pdf") or text.startswith("%PDF"):
            raise UnsupportedFormatError(PDF_GUIDANCE)
        try:
            fmt = DocumentFormat(format)
        except ValueError:
            raise UnsupportedFormatError(
                f"unsupported format {format!r}; expected plain, markdown, or csv"
            ) from None
        with self._mutation_lock(bot_id):
            if self.store.has_document_content(bot_id, source_name, text):
                raise DuplicateUploadError(
                    f"identical content already uploaded as {source_name!r}"
                )
            doc = Document.create(source_name, text, format=fmt)
            report = bot.add_document(doc)  # atomic: no state change on failure
            self.store.add_document(bot_id, doc)
            self._save_indexes(bot_id)
        return report

    # -- querying ------------------------------------------------------------------

    def query(self, bot_id: str, session_id: str, text: str) -> generation.GenerationResult:
        bot = self.get_bot(bot_id)
        result = generation.answer(text, session_id, bot)
        self.store.save_session(bot_id, session_id, bot.sessions.get(session_id, []))
        return result

    # -- feedback --------------------------------------------------------------------

    def rate_record(self, record_id: str, rating: str) -> InteractionRecord:
        return rate(self.records, record_id, rating)

    def correct_record(
        self, record_id: str, corrected_answer: str, author: str = ""
    ) -> InteractionRecord:
        record = self.records.get(record_id)
        bot = self.get_bot(record.bot_id)
        with self._mutation_lock(record.bot_id):
            updated = submit_correction(
                self.records,
                _CorrectionSink(self, bot),
                record_id,
                corrected_answer,
                author,
            )
        return updated

    def list_records(
        self,
        bot_id: str,
        start: datetime | None = None,
        end: datetime | None = None,
        filter: str = "all",
    ) -> list[InteractionRecord]:
        self.get_bot(bot_id)
        start = start or datetime(1970, 1, 1, tzinfo=timezone.utc)
        end = end or datetime(9999, 1, 1, tzinfo=timezone.utc)
        return list_interactions(self.records, bot_id, start, end, filter)

    # -- maintenance -------------------------------------------------------------------

    def rebuild(self, bot_id: str) -> None:
        """Re-chunk and re-embed the whole corpus from stored documents."""
        bot = self.get_bot(bot_id)
        with self._mutation_lock(bot_id):
            documents = self.store.list_documents(bot_id)
            chunks = {}
            for doc in documents:
                for chunk in chunk_document(doc, self.config.max_chunk_tokens):
                    chunks[chunk.chunk_id] = chunk
            ordered = list(chunks.values())
            vectors = bot.embedder.embed_batch([c.retrieval_text for c in ordered])
            from .dense import DenseIndex

            sparse = SparseIndex()
            sparse.add_chunks(ordered)
            dense = DenseIndex(dimension=bot.embedder.dimension)
            dense.add_vectors(zip((c.chunk_id for c in ordered), vectors))
            with bot.write_lock():
                bot.documents = {d.doc_id: d for d in documents}
                bot.chunks = chunks
                bot.sparse = sparse
                bot.dense = dense
            self._save_indexes(bot_id)

    # -- snapshot / restore ---------------------------------------------------------------

    def snapshot(self, bot_id: str, out_path: str | Path) -> Path:
        """Write a portable archive of one bot: corpus, indexes, config, records."""
        bot = self.get_bot(bot_id)
        out_path = Path(out_path)
        with self._mutation_lock(bot_id):
            self._save_indexes(bot_id)
            bot_dir = self._bot_dir(bot_id)
            manifest = {
                "format": ARCHIVE_FORMAT,
                "version": ARCHIVE_VERSION,
                "bot_id": bot_id,
                "created_at": datetime.now(timezone.utc).isoformat(),
            }
            documents = [
                {
                    "doc_id": d.doc_id,
                    "source_name": d.source_name,
                    "format": d.format.value,
                    "raw_text": d.raw_text,
                    "ingested_at": d.ingested_at.isoformat(),
                }
                for d in self.store.list_documents(bot_id)
            ]
            records = [_record_to_json(r) for r in self.records.list(bot_id)]
            sessions = self.store.load_sessions(bot_id)

            with tarfile.open(out_path, "w:gz") as tar:
                _add_json(tar, "manifest.json", manifest)
                _add_json(tar, "config.json", json.loads(_bot_config_to_json(bot.config)))
                _add_json(tar, "documents.json", documents)
                _add_json(tar, "records.json", records)
                _add_json(tar, "sessions.json", sessions)
                tar.add(bot_dir / "sparse.idx", arcname="sparse.idx")
                tar.add(bot_dir / "dense.idx", arcname="dense.idx")
        return out_path

    def restore(self, archive_path: str | Path, force: bool = False) -> BotConfig:
        """Recreate a bot from an archive; refuses to clobber unless forced."""
        with tarfile.open(archive_path, "r:gz") as tar:
            manifest = _read_json(tar, "manifest.json")
            if manifest.get("format") != ARCHIVE_FORMAT:
                raise SnapshotVersionError("not a ragserve bot archive")
            if manifest.get("version") != ARCHIVE_VERSION:
                raise SnapshotVersionError(
                    f"archive version {manifest.get('version')} not supported "
                    f"(expected {ARCHIVE_VERSION})"
                )
            config = _bot_config_from_json(json.dumps(_read_json(tar, "config.json")))
            if config.bot_id in self.bots and not force:
                raise ValueError(
                    f"bot {config.bot_id} already exists; pass force=True to replace"
                )
            documents = _read_json(tar, "documents.json")
            records = _read_json(tar, "records.json")
            sessions = _read_json(tar, "sessions.json")
            bot_dir = self._bot_dir(config.bot_id)
            for name in ("sparse.idx", "dense.idx"):
                member = tar.extractfile(name)
                if member is None:
                    raise SnapshotVersionError(f"archive is missing {name}")
                (bot_dir / name).write_bytes(member.read())

        if config.bot_id not in self.bots:
            self.store.add_bot(config.bot_id, config.name, _bot_config_to_json(config))
        else:
            self.store.update_bot(config.bot_id, _bot_config_to_json(config))
        for doc in documents:
            document = Document(
                doc_id=doc["doc_id"],
                source_name=doc["source_name"],
                raw_text=doc["raw_text"],
                format=DocumentFormat(doc["format"]),
                ingested_at=datetime.fromisoformat(doc["ingested_at"]),
            )
            try:
                self.store.add_document(config.bot_id, document)
            except DuplicateUploadError:
                pass  # already present when force-restoring over an existing bot
        for raw in records:
            self.records.add(_record_from_json(raw))
        for session_id, history in sessions.items():
            self.store.save_session(config.bot_id, session_id, history)
        self._load_bot(config)
        return config

    # -- export -------------------------------------------------------------------------

    def export_records_csv(self, bot_id: str, out_path: str | Path) -> Path:
        import csv

        records = self.list_records(bot_id)
        out_path = Path(out_path)
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [
                    "record_id",
                    "session_id",
                    "created_at",
                    "question",
                    "answer",
                    "rating",
                    "correction",
                    "correction_author",
                    "corrected_at",
                    "error",
                ]
            )
            for r in records:
                writer.writerow(
                    [
                        r.record_id,
                        r.session_id,
                        r.created_at.isoformat(),
                        r.question,
                        r.answer,
                        r.rating or "",
                        r.correction or "",
                        r.correction_author or "",
                        r.corrected_at.isoformat() if r.corrected_at else "",
                        r.error or "",
                    ]
                )
        return out_path


class _CorrectionSink:
    """Adapter handing correction documents to the engine's durable path."""

    def __init__(self, engine: Engine, bot: BotState):
        self._engine = engine
        self._bot = bot

    def add_document(self, doc: Document) -> IngestReport:
        report = self._bot.add_document(doc)
        self._engine.store.add_document(self._bot.config.bot_id, doc)
        self._engine._save_indexes_for(self._bot)
        return report


def _add_json(tar: tarfile.TarFile, name: str, payload) -> None:
    data = json.dumps(payload, indent=2).encode("utf-8")
    info = tarfile.TarInfo(name)
    info.size = len(data)
    tar.addfile(info, io.BytesIO(data))


def _read_json(tar: tarfile.TarFile, name: str):
    member = tar.extractfile(name)
    if member is None:
        raise SnapshotVersionError(f"archive is missing {name}")
    return json.loads(member.read().decode("utf-8"))


def _record_to_json(record: InteractionRecord) -> dict:
    data = dataclasses.asdict(record)
    data["created_at"] = record.created_at.isoformat()
    data["corrected_at"] = record.corrected_at.isoformat() if record.corrected_at else None
    data["passages_used"] = list(record.passages_used)
    data["audit"] = list(record.audit)
    return data


def _record_from_json(data: dict) -> InteractionRecord:
    data = dict(data)
    data["created_at"] = datetime.fromisoformat(data["created_at"])
    data["corrected_at"] = (
        datetime.fromisoformat(data["corrected_at"]) if data["corrected_at"] else None
    )
    data["passages_used"] = tuple(data["passages_used"])
    data["audit"] = tuple(data["audit"])
    return InteractionRecord(**data)
