"""Inverted index with TF-IDF cosine ranking and BM25 scoring.

Scoring conventions, fixed so results are reproducible across builds:

* natural log everywhere;
* TF is the within-chunk relative frequency ``f(t,d) / sum_t' f(t',d)``;
* TF-IDF query/chunk vectors share the corpus IDF ``ln(N / n(t))`` and are
  compared by cosine similarity;
* BM25 uses the saturating form with the ``+1`` inside the IDF log, which
  keeps every score non-negative; defaults ``k1=1.5``, ``b=0.75``;
* query terms unseen in the corpus contribute nothing;
* zero-scoring chunks never appear in search results;
* ties break on ascending chunk_ref.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

from .corpus import Chunk, DEFAULT_TOKENIZER, TokenizerConfig, tokenize

SNAPSHOT_MAGIC = b"RSSX"
SNAPSHOT_VERSION = 1

DEFAULT_K1 = 1.5
DEFAULT_B = 0.75


class DuplicateChunkError(ValueError):
    """A chunk_ref was added twice."""


class UnknownChunkError(KeyError):
    """A chunk_ref is not in the index."""


class SnapshotFormatError(ValueError):
    """A snapshot file is malformed or has an unsupported version."""


@dataclass(frozen=True, order=True)
class ScoredHit:
    chunk_ref: str
    score: float
    origin: str  # "sparse" | "dense"


class SparseIndex:
    """Incrementally built inverted index over chunk retrieval text.

    Incremental adds are exactly equivalent to a single batch build: all
    statistics are maintained from raw counts, never approximated.
    """

    def __init__(
        self,
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
        tokenizer: TokenizerConfig = DEFAULT_TOKENIZER,
    ):
        if k1 <= 0:
            raise ValueError("k1 must be positive")
        if not 0.0 <= b <= 1.0:
            raise ValueError("b must be in [0, 1]")
        self.k1 = k1
        self.b = b
        self.tokenizer = tokenizer
        self.postings: dict[str, dict[str, int]] = {}
        self.chunk_lengths: dict[str, int] = {}

    # -- statistics ---------------------------------------------------------

    @property
    def num_chunks(self) -> int:
        return len(self.chunk_lengths)

    @property
    def vocab_size(self) -> int:
        return len(self.postings)

    @property
    def avgdl(self) -> float:
        n = self.num_chunks
        return sum(self.chunk_lengths.values()) / n if n else 0.0

    def doc_freq(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def __contains__(self, chunk_ref: str) -> bool:
        return chunk_ref in self.chunk_lengths

    def __len__(self) -> int:
        return self.num_chunks

    # -- construction -------------------------------------------------------

    def add_chunks(self, chunks: Iterable[Chunk]) -> None:
        self.add_texts((c.chunk_id, c.retrieval_text) for c in chunks)

    def add_texts(self, pairs: Iterable[tuple[str, str]]) -> None:
        """Index (chunk_ref, text) pairs; rejects duplicates before mutating."""
        pairs = list(pairs)
        seen: set[str] = set()
        for ref, _ in pairs:
            if ref in self.chunk_lengths or ref in seen:
                raise DuplicateChunkError(f"chunk_ref already indexed: {ref!r}")
            seen.add(ref)
        for ref, text in pairs:
            self._add_text(ref, text)

    def _add_text(self, ref: str, text: str) -> None:
        tokens = tokenize(text, self.tokenizer)
        self.chunk_lengths[ref] = len(tokens)
        for token in tokens:
            bucket = self.postings.setdefault(token, {})
            bucket[ref] = bucket.get(ref, 0) + 1

    # -- scoring ------------------------------------------------------------

    def tf(self, term: str, chunk_ref: str) -> float:
        """Relative frequency of ``term`` within the chunk; 0 if absent."""
        length = self.chunk_lengths.get(chunk_ref)
        if length is None:
            raise UnknownChunkError(chunk_ref)
        if length == 0:
            return 0.0
        return self.postings.get(term, {}).get(chunk_ref, 0) / length

    def idf_tfidf(self, term: str) -> float:
        """``ln(N / n(t))``; unseen terms return 0 and are excluded from scoring."""
        n = self.doc_freq(term)
        if n == 0 or self.num_chunks == 0:
            return 0.0
        return math.log(self.num_chunks / n)

    def bm25_idf(self, term: str) -> float:
        """Saturating IDF ``ln((N - n + 0.5) / (n + 0.5) + 1)``; never negative."""
        n = self.doc_freq(term)
        return math.log((self.num_chunks - n + 0.5) / (n + 0.5) + 1.0)

    def _tfidf_weights(self, ref: str) -> dict[str, float]:
        length = self.chunk_lengths[ref]
        if length == 0:
            return {}
        weights: dict[str, float] = {}
        for term, bucket in self.postings.items():
            freq = bucket.get(ref)
            if freq:
                idf = self.idf_tfidf(term)
                if idf != 0.0:
                    weights[term] = (freq / length) * idf
        return weights

    def tfidf_score(self, query: Sequence[str], chunk_ref: str) -> float:
        """Cosine similarity between query and chunk TF-IDF vectors."""
        if chunk_ref not in self.chunk_lengths:
            raise UnknownChunkError(chunk_ref)
        if not query:
            return 0.0
        q_counts: dict[str, int] = {}
        for term in query:
            q_counts[term] = q_counts.get(term, 0) + 1
        q_len = len(query)
        q_vec = {
            term: (count / q_len) * idf
            for term, count in q_counts.items()
            if (idf := self.idf_tfidf(term)) != 0.0
        }
        d_vec = self._tfidf_weights(chunk_ref)
        if not q_vec or not d_vec:
            return 0.0
        # fsum: exactly rounded, so scores do not depend on dict iteration
        # order and snapshots round-trip bit-for-bit.
        dot = math.fsum(w * d_vec.get(term, 0.0) for term, w in q_vec.items())
        if dot == 0.0:
            return 0.0
        q_norm = math.sqrt(math.fsum(w * w for w in q_vec.values()))
        d_norm = math.sqrt(math.fsum(w * w for w in d_vec.values()))
        return dot / (q_norm * d_norm)

    def bm25_score(self, query: Sequence[str], chunk_ref: str) -> float:
        """Saturating keyword relevance; duplicated query terms sum repeatedly."""
        length = self.chunk_lengths.get(chunk_ref)
        if length is None:
            raise UnknownChunkError(chunk_ref)
        avgdl = self.avgdl
        score = 0.0
        for term in query:
            freq = self.postings.get(term, {}).get(chunk_ref, 0)
            if freq == 0:
                continue
            norm = 1.0 - self.b + self.b * (length / avgdl) if avgdl > 0 else 1.0
            score += self.bm25_idf(term) * (freq * (self.k1 + 1.0)) / (freq + self.k1 * norm)
        return score

    # -- search -------------------------------------------------------------

    def search(self, query: Sequence[str], k: int, scorer: str = "bm25") -> list[ScoredHit]:
        """Top-k chunks under the chosen scorer; zero scores are dropped."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if scorer not in ("bm25", "tfidf"):
            raise ValueError(f"unknown scorer: {scorer!r}")
        if not query or self.num_chunks == 0:
            return []
        candidates: set[str] = set()
        for term in set(query):
            candidates.update(self.postings.get(term, ()))
        score = self.bm25_score if scorer == "bm25" else self.tfidf_score
        hits = [
            ScoredHit(chunk_ref=ref, score=s, origin="sparse")
            for ref in candidates
            if (s := score(query, ref)) > 0.0
        ]
        hits.sort(key=lambda h: (-h.score, h.chunk_ref))
        return hits[:k]

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write a versioned binary snapshot; round-trips scores bit-for-bit."""
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(
                struct.pack(
                    "<IddQQd",
                    SNAPSHOT_VERSION,
                    self.k1,
                    self.b,
                    self.num_chunks,
                    self.vocab_size,
                    self.avgdl,
                )
            )
            _write_str(fh, "1" if self.tokenizer.lowercase else "0")
            stopwords = sorted(self.tokenizer.stopwords)
            fh.write(struct.pack("<I", len(stopwords)))
            for word in stopwords:
                _write_str(fh, word)
            for ref in sorted(self.chunk_lengths):
                _write_str(fh, ref)
                fh.write(struct.pack("<I", self.chunk_lengths[ref]))
            for term in sorted(self.postings):
                bucket = self.postings[term]
                _write_str(fh, term)
                fh.write(struct.pack("<I", len(bucket)))
                for ref in sorted(bucket):
                    _write_str(fh, ref)
                    fh.write(struct.pack("<I", bucket[ref]))

    @classmethod
    def load(cls, path: str | Path) -> "SparseIndex":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != SNAPSHOT_MAGIC:
                raise SnapshotFormatError(f"not a sparse index snapshot: {path}")
            version, k1, b, n_chunks, n_terms, _avgdl = struct.unpack(
                "<IddQQd", fh.read(struct.calcsize("<IddQQd"))
            )
            if version != SNAPSHOT_VERSION:
                raise SnapshotFormatError(
                    f"unsupported sparse snapshot version {version} (expected {SNAPSHOT_VERSION})"
                )
            lowercase = _read_str(fh) == "1"
            (n_stop,) = struct.unpack("<I", fh.read(4))
            stopwords = frozenset(_read_str(fh) for _ in range(n_stop))
            index = cls(k1=k1, b=b, tokenizer=TokenizerConfig(lowercase, stopwords))
            for _ in range(n_chunks):
                ref = _read_str(fh)
                (length,) = struct.unpack("<I", fh.read(4))
                index.chunk_lengths[ref] = length
            for _ in range(n_terms):
                term = _read_str(fh)
                (n_refs,) = struct.unpack("<I", fh.read(4))
                bucket: dict[str, int] = {}
                for _ in range(n_refs):
                    ref = _read_str(fh)
                    (freq,) = struct.unpack("<I", fh.read(4))
                    bucket[ref] = freq
                index.postings[term] = bucket
        return index


def _write_str(fh: BinaryIO, value: str) -> None:
    data = value.encode("utf-8")
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_str(fh: BinaryIO) -> str:
    (length,) = struct.unpack("<I", fh.read(4))
    return fh.read(length).decode("utf-8")
