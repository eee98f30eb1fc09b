"""Durable single-node persistence on SQLite (WAL mode).

Documents, bot configs, interaction records, and session histories live
here; the binary index snapshots live next to the database as files. Any
mutation acknowledged to a client is committed before the call returns.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
from datetime import datetime, timezone
from pathlib import Path

from .corpus import Document, DocumentFormat
from .feedback import InteractionRecord, UnknownRecordError

_SCHEMA = """
CREATE TABLE IF NOT EXISTS bots (
    bot_id TEXT PRIMARY KEY,
    name TEXT NOT NULL UNIQUE,
    config_json TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS documents (
    doc_id TEXT PRIMARY KEY,
    bot_id TEXT NOT NULL,
    source_name TEXT NOT NULL,
    format TEXT NOT NULL,
    raw_text TEXT NOT NULL,
    content_hash TEXT NOT NULL,
    ingested_at TEXT NOT NULL,
    position INTEGER NOT NULL,
    UNIQUE (bot_id, source_name, content_hash)
);
CREATE TABLE IF NOT EXISTS records (
    record_id TEXT PRIMARY KEY,
    bot_id TEXT NOT NULL,
    session_id TEXT NOT NULL,
    question TEXT NOT NULL,
    answer TEXT NOT NULL,
    passages_json TEXT NOT NULL,
    rating TEXT,
    correction TEXT,
    correction_author TEXT,
    created_at TEXT NOT NULL,
    corrected_at TEXT,
    error TEXT,
    audit_json TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_records_bot_created ON records (bot_id, created_at);
CREATE TABLE IF NOT EXISTS sessions (
    bot_id TEXT NOT NULL,
    session_id TEXT NOT NULL,
    history_json TEXT NOT NULL,
    PRIMARY KEY (bot_id, session_id)
);
"""


class DuplicateUploadError(ValueError):
    """Byte-identical content was already uploaded under this identity."""


class DuplicateBotNameError(ValueError):
    """A bot with this name already exists."""


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class Store:
    """All SQLite access goes through one connection guarded by one lock."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.execute("PRAGMA synchronous=NORMAL")
        self._conn.executescript(_SCHEMA)
        self._conn.commit()
        self._lock = threading.RLock()

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # -- bots ------------------------------------------------------------------

    def add_bot(self, bot_id: str, name: str, config_json: str) -> None:
        with self._lock:
            try:
                self._conn.execute(
                    "INSERT INTO bots (bot_id, name, config_json) VALUES (?, ?, ?)",
                    (bot_id, name, config_json),
                )
                self._conn.commit()
            except sqlite3.IntegrityError as exc:
                raise DuplicateBotNameError(f"bot name already in use: {name!r}") from exc

    def update_bot(self, bot_id: str, config_json: str) -> None:
        with self._lock:
            self._conn.execute(
                "UPDATE bots SET config_json = ? WHERE bot_id = ?", (config_json, bot_id)
            )
            self._conn.commit()

    def list_bots(self) -> list[tuple[str, str]]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT bot_id, config_json FROM bots ORDER BY rowid"
            ).fetchall()
        return [(bot_id, config_json) for bot_id, config_json in rows]

    # -- documents ----------------------------------------------------------------

    def add_document(self, bot_id: str, doc: Document) -> None:
        digest = content_hash(doc.raw_text)
        with self._lock:
            (position,) = self._conn.execute(
                "SELECT COUNT(*) FROM documents WHERE bot_id = ?", (bot_id,)
            ).fetchone()
            try:
                self._conn.execute(
                    "INSERT INTO documents (doc_id, bot_id, source_name, format, raw_text,"
                    " content_hash, ingested_at, position) VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                    (
                        doc.doc_id,
                        bot_id,
                        doc.source_name,
                        doc.format.value,
                        doc.raw_text,
                        digest,
                        doc.ingested_at.isoformat(),
                        position,
                    ),
                )
                self._conn.commit()
            except sqlite3.IntegrityError as exc:
                raise DuplicateUploadError(
                    f"identical content already uploaded as {doc.source_name!r}"
                ) from exc

    def has_document_content(self, bot_id: str, source_name: str, text: str) -> bool:
        with self._lock:
            row = self._conn.execute(
                "SELECT 1 FROM documents WHERE bot_id = ? AND source_name = ?"
                " AND content_hash = ?",
                (bot_id, source_name, content_hash(text)),
            ).fetchone()
        return row is not None

    def list_documents(self, bot_id: str) -> list[Document]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT doc_id, source_name, format, raw_text, ingested_at FROM documents"
                " WHERE bot_id = ? ORDER BY position",
                (bot_id,),
            ).fetchall()
        return [
            Document(
                doc_id=doc_id,
                source_name=source_name,
                raw_text=raw_text,
                format=DocumentFormat(format),
                ingested_at=datetime.fromisoformat(ingested_at),
            )
            for doc_id, source_name, format, raw_text, ingested_at in rows
        ]

    # -- sessions --------------------------------------------------------------------

    def save_session(self, bot_id: str, session_id: str, history: list[tuple[str, str]]) -> None:
        with self._lock:
            self._conn.execute(
                "INSERT INTO sessions (bot_id, session_id, history_json) VALUES (?, ?, ?)"
                " ON CONFLICT (bot_id, session_id) DO UPDATE SET history_json = excluded.history_json",
                (bot_id, session_id, json.dumps(history)),
            )
            self._conn.commit()

    def load_sessions(self, bot_id: str) -> dict[str, list[tuple[str, str]]]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT session_id, history_json FROM sessions WHERE bot_id = ?", (bot_id,)
            ).fetchall()
        return {
            session_id: [tuple(turn) for turn in json.loads(history_json)]
            for session_id, history_json in rows
        }


def _record_to_row(record: InteractionRecord) -> tuple:
    return (
        record.record_id,
        record.bot_id,
        record.session_id,
        record.question,
        record.answer,
        json.dumps(list(record.passages_used)),
        record.rating,
        record.correction,
        record.correction_author,
        record.created_at.isoformat(),
        record.corrected_at.isoformat() if record.corrected_at else None,
        record.error,
        json.dumps(list(record.audit)),
    )


def _row_to_record(row: tuple) -> InteractionRecord:
    (
        record_id,
        bot_id,
        session_id,
        question,
        answer,
        passages_json,
        rating,
        correction,
        correction_author,
        created_at,
        corrected_at,
        error,
        audit_json,
    ) = row
    return InteractionRecord(
        record_id=record_id,
        session_id=session_id,
        bot_id=bot_id,
        question=question,
        answer=answer,
        passages_used=tuple(json.loads(passages_json)),
        rating=rating,
        correction=correction,
        correction_author=correction_author,
        created_at=datetime.fromisoformat(created_at),
        corrected_at=datetime.fromisoformat(corrected_at) if corrected_at else None,
        error=error,
        audit=tuple(json.loads(audit_json)),
    )


_RECORD_COLUMNS = (
    "record_id, bot_id, session_id, question, answer, passages_json, rating,"
    " correction, correction_author, created_at, corrected_at, error, audit_json"
)


class SqliteRecordLog:
    """Durable drop-in for :class:`ragserve.feedback.RecordLog`."""

    def __init__(self, store: Store):
        self._store = store

    def add(self, record: InteractionRecord) -> None:
        with self._store._lock:
            self._store._conn.execute(
                f"INSERT OR REPLACE INTO records ({_RECORD_COLUMNS})"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                _record_to_row(record),
            )
            self._store._conn.commit()

    def get(self, record_id: str) -> InteractionRecord:
        with self._store._lock:
            row = self._store._conn.execute(
                f"SELECT {_RECORD_COLUMNS} FROM records WHERE record_id = ?", (record_id,)
            ).fetchone()
        if row is None:
            raise UnknownRecordError(record_id)
        return _row_to_record(row)

    def update(self, record: InteractionRecord) -> None:
        self.get(record.record_id)  # raises if missing
        self.add(record)

    def list(
        self,
        bot_id: str,
        start: datetime | None = None,
        end: datetime | None = None,
    ) -> list[InteractionRecord]:
        query = f"SELECT {_RECORD_COLUMNS} FROM records WHERE bot_id = ?"
        params: list = [bot_id]
        # Stored timestamps are UTC isoformat, so lexicographic comparison is
        # chronological once the bounds are normalized to UTC too.
        if start is not None:
            query += " AND created_at >= ?"
            params.append(start.astimezone(timezone.utc).isoformat())
        if end is not None:
            query += " AND created_at < ?"
            params.append(end.astimezone(timezone.utc).isoformat())
        query += " ORDER BY created_at DESC, record_id DESC"
        with self._store._lock:
            rows = self._store._conn.execute(query, params).fetchall()
        return [_row_to_record(row) for row in rows]
