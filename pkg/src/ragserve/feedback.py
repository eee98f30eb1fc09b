"""Ratings and instructor corrections.

A correction is not an edit: it becomes a new Q/A document that is chunked
and folded into both retrieval indexes before the call returns, so the very
next retrieval for a similar question can surface it. Existing chunks are
never mutated or deleted by this path.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Iterable

from .corpus import Document

VALID_RATINGS = ("up", "down")
VALID_FILTERS = ("all", "rated_down", "uncorrected")

CORRECTION_SOURCE_NAME = "correction"


class UnknownRecordError(KeyError):
    """No interaction record with that id."""


class InvalidFeedbackError(ValueError):
    """Rating or correction input failed validation."""


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class InteractionRecord:
    """One question/answer exchange plus its feedback trail."""

    record_id: str
    session_id: str
    bot_id: str
    question: str
    answer: str
    passages_used: tuple[str, ...] = ()
    rating: str | None = None
    correction: str | None = None
    correction_author: str | None = None
    created_at: datetime = field(default_factory=_utcnow)
    corrected_at: datetime | None = None
    error: str | None = None
    audit: tuple[str, ...] = ()

    @staticmethod
    def create(
        record_id: str,
        session_id: str,
        bot_id: str,
        question: str,
        answer: str,
        passages_used: Iterable[str] = (),
        error: str | None = None,
    ) -> "InteractionRecord":
        return InteractionRecord(
            record_id=record_id,
            session_id=session_id,
            bot_id=bot_id,
            question=question,
            answer=answer,
            passages_used=tuple(passages_used),
            error=error,
        )


class RecordLog:
    """In-memory record store; the service swaps in a durable implementation
    with the same surface."""

    def __init__(self):
        self._records: dict[str, InteractionRecord] = {}
        self._lock = threading.Lock()

    def add(self, record: InteractionRecord) -> None:
        with self._lock:
            self._records[record.record_id] = record

    def get(self, record_id: str) -> InteractionRecord:
        record = self._records.get(record_id)
        if record is None:
            raise UnknownRecordError(record_id)
        return record

    def update(self, record: InteractionRecord) -> None:
        with self._lock:
            if record.record_id not in self._records:
                raise UnknownRecordError(record.record_id)
            self._records[record.record_id] = record

    def list(
        self,
        bot_id: str,
        start: datetime | None = None,
        end: datetime | None = None,
    ) -> list[InteractionRecord]:
        records = [r for r in self._records.values() if r.bot_id == bot_id]
        if start is not None:
            records = [r for r in records if r.created_at >= start]
        if end is not None:
            records = [r for r in records if r.created_at < end]
        records.sort(key=lambda r: (r.created_at, r.record_id), reverse=True)
        return records


def rate(log: RecordLog, record_id: str, rating: str) -> InteractionRecord:
    """Store a thumbs rating; later ratings overwrite with an audit note."""
    if rating not in VALID_RATINGS:
        raise InvalidFeedbackError(f"rating must be one of {VALID_RATINGS}")
    record = log.get(record_id)
    audit = record.audit
    if record.rating is not None:
        audit = audit + (
            f"rating overwritten {record.rating}->{rating} at {_utcnow().isoformat()}",
        )
    updated = replace(record, rating=rating, audit=audit)
    log.update(updated)
    return updated


def correction_document(record: InteractionRecord, corrected_answer: str) -> Document:
    """The corpus document a correction turns into: the student's own
    phrasing plus the corrected answer, so future similar questions match."""
    return Document.create(
        source_name=CORRECTION_SOURCE_NAME,
        raw_text=f"Q: {record.question}\nA: {corrected_answer}",
    )


def submit_correction(
    log: RecordLog,
    bot_state,
    record_id: str,
    corrected_answer: str,
    author: str = "",
) -> InteractionRecord:
    """Attach a correction to a record and index it immediately.

    The new document is added to both the sparse and dense index inside this
    call; when it returns, retrieval for the original question can already
    see the correction. Repeated corrections each add a document; the record
    keeps only the latest text.
    """
    if not corrected_answer or not corrected_answer.strip():
        raise InvalidFeedbackError("corrected answer must be non-empty")
    record = log.get(record_id)
    bot_state.add_document(correction_document(record, corrected_answer))
    updated = replace(
        record,
        correction=corrected_answer,
        correction_author=author or None,
        corrected_at=_utcnow(),
    )
    log.update(updated)
    return updated


def list_interactions(
    log: RecordLog,
    bot_id: str,
    start: datetime,
    end: datetime,
    filter: str = "all",
) -> list[InteractionRecord]:
    """Records in the half-open window [start, end), newest first."""
    if start > end:
        raise InvalidFeedbackError("start must not be after end")
    if filter not in VALID_FILTERS:
        raise InvalidFeedbackError(f"filter must be one of {VALID_FILTERS}")
    records = log.list(bot_id, start, end)
    if filter == "rated_down":
        records = [r for r in records if r.rating == "down"]
    elif filter == "uncorrected":
        records = [r for r in records if r.correction is None]
    return records
