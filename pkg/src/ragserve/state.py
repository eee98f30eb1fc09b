"""Per-bot state: configuration, corpus, both indexes, and sessions.

``BotState.add_document`` is the single write path for corpus changes
(uploads and corrections alike): it chunks, embeds, then updates the sparse
and dense index together under the write lock, so the two always cover the
same chunk set and readers never observe a half-applied mutation.
"""

from __future__ import annotations

import secrets
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .corpus import (
    Chunk,
    DEFAULT_MAX_CHUNK_TOKENS,
    Document,
    IngestionError,
    chunk_document,
)
from .dense import DenseIndex, EmbeddingProvider, HashingEmbedder
from .feedback import RecordLog
from .pipeline import LexicalOverlapReranker, Reranker, RetrievalConfig
from .sparse import SparseIndex


class DuplicateDocumentError(ValueError):
    """The document id (or identical content) is already in the corpus."""


class RWLock:
    """Many readers or one writer; writers wait for readers to drain."""

    def __init__(self):
        self._readers = 0
        self._monitor = threading.Condition()
        self._writer = threading.Lock()

    class _ReadGuard:
        def __init__(self, lock: "RWLock"):
            self._lock = lock

        def __enter__(self):
            with self._lock._monitor:
                self._lock._readers += 1
            return self

        def __exit__(self, *exc):
            with self._lock._monitor:
                self._lock._readers -= 1
                if self._lock._readers == 0:
                    self._lock._monitor.notify_all()

    class _WriteGuard:
        def __init__(self, lock: "RWLock"):
            self._lock = lock

        def __enter__(self):
            self._lock._writer.acquire()
            with self._lock._monitor:
                while self._lock._readers > 0:
                    self._lock._monitor.wait()
            return self

        def __exit__(self, *exc):
            self._lock._writer.release()

    def read(self) -> "_ReadGuard":
        return RWLock._ReadGuard(self)

    def write(self) -> "_WriteGuard":
        return RWLock._WriteGuard(self)


@dataclass
class BotConfig:
    bot_id: str
    name: str
    greeting: str = ""
    openness: int = 0
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    embedding_provider_ref: str = "hashing"
    llm_ref: str = "mock"
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    public_key: str = field(default_factory=lambda: secrets.token_urlsafe(16))

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise ValueError("bot name must be non-empty")
        if not 0 <= self.openness <= 100:
            raise ValueError("openness must be in [0, 100]")


@dataclass(frozen=True)
class IngestReport:
    doc_id: str
    chunk_count: int
    token_total: int


class BotState:
    """Everything one chatbot needs to answer and learn from feedback."""

    def __init__(
        self,
        config: BotConfig,
        embedder: EmbeddingProvider | None = None,
        reranker: Reranker | None = None,
        llm=None,
        records: RecordLog | None = None,
        max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
    ):
        self.config = config
        self.embedder = embedder or HashingEmbedder()
        self.reranker = reranker or LexicalOverlapReranker()
        self.llm = llm
        self.records = records or RecordLog()
        self.max_chunk_tokens = max_chunk_tokens
        self.documents: dict[str, Document] = {}
        self.chunks: dict[str, Chunk] = {}
        self.sparse = SparseIndex()
        self.dense = DenseIndex(dimension=self.embedder.dimension)
        self.sessions: dict[str, list[tuple[str, str]]] = {}
        self._rw = RWLock()
        self._session_locks: dict[str, threading.Lock] = {}
        self._session_guard = threading.Lock()

    # -- locking -------------------------------------------------------------

    def read_lock(self):
        return self._rw.read()

    def write_lock(self):
        return self._rw.write()

    def session_lock(self, session_id: str) -> threading.Lock:
        with self._session_guard:
            lock = self._session_locks.get(session_id)
            if lock is None:
                lock = threading.Lock()
                self._session_locks[session_id] = lock
            return lock

    # -- corpus mutation -------------------------------------------------------

    def add_document(self, doc: Document) -> IngestReport:
        """Chunk, embed, and index a document; atomic under failure.

        All fallible work (chunking, embedding) happens before any state is
        touched, so an embedding-provider failure leaves the corpus and both
        indexes exactly as they were.
        """
        chunks = chunk_document(doc, self.max_chunk_tokens)
        if not chunks:
            raise IngestionError(f"document {doc.source_name!r} produced no chunks")
        vectors = self.embedder.embed_batch([c.retrieval_text for c in chunks])
        with self.write_lock():
            if doc.doc_id in self.documents:
                raise DuplicateDocumentError(f"doc_id already ingested: {doc.doc_id!r}")
            self.sparse.add_chunks(chunks)
            self.dense.add_vectors(zip((c.chunk_id for c in chunks), vectors))
            self.documents[doc.doc_id] = doc
            for chunk in chunks:
                self.chunks[chunk.chunk_id] = chunk
        return IngestReport(
            doc_id=doc.doc_id,
            chunk_count=len(chunks),
            token_total=sum(c.token_count for c in chunks),
        )

    # -- sessions ----------------------------------------------------------------

    def session_history(self, session_id: str) -> list[tuple[str, str]]:
        return list(self.sessions.get(session_id, []))

    def append_history(self, session_id: str, question: str, answer_text: str) -> None:
        history = self.sessions.setdefault(session_id, [])
        history.append(("user", question))
        history.append(("assistant", answer_text))

    # -- invariants -----------------------------------------------------------------

    def index_parity(self) -> bool:
        """Both indexes cover exactly the same chunk_ref set."""
        return set(self.sparse.chunk_lengths) == set(self.dense.refs) == set(self.chunks)
