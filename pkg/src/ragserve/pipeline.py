"""Hybrid retrieval: sparse + dense candidate fusion and re-ranking.

The two retrievers score on incomparable scales, so the default fusion is
reciprocal-rank (rank-only, scale-free); weighted-sum fusion with per-list
min-max normalization is available as an alternative. Fused candidates then
pass through a re-ranker — either a remote cross-encoder endpoint or the
built-in lexical-overlap scorer — before the final top-k is returned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Protocol, Sequence

from .corpus import Chunk, DEFAULT_TOKENIZER, TokenizerConfig, tokenize
from .dense import DenseIndex, EmbeddingError, EmbeddingProvider, EmbeddingTransportError
from .sparse import ScoredHit, SparseIndex

logger = logging.getLogger(__name__)

DEFAULT_RRF_CONSTANT = 60.0


class RerankerUnavailable(Exception):
    """The external re-ranking endpoint could not be reached."""


@dataclass(frozen=True)
class RetrievalConfig:
    k_sparse: int = 20
    k_dense: int = 20
    k_final: int = 5
    fusion: str = "rrf"  # "rrf" | "weighted"
    rrf_constant: float = DEFAULT_RRF_CONSTANT
    weight_dense: float = 0.5
    reranker_id: str = "lexical-overlap"

    def __post_init__(self):
        if self.k_final < 1 or self.k_sparse < 1 or self.k_dense < 1:
            raise ValueError("k_sparse, k_dense, and k_final must be >= 1")
        if self.k_final > self.k_sparse + self.k_dense:
            raise ValueError("k_final cannot exceed k_sparse + k_dense")
        if self.fusion not in ("rrf", "weighted"):
            raise ValueError(f"unknown fusion mode: {self.fusion!r}")
        if not 0.0 <= self.weight_dense <= 1.0:
            raise ValueError("weight_dense must be in [0, 1]")


@dataclass(frozen=True)
class ContextPassage:
    chunk_ref: str
    heading: str
    body: str
    fused_score: float
    rerank_score: float
    provenance: frozenset[str]  # non-empty subset of {"sparse", "dense"}

    @property
    def text(self) -> str:
        return f"{self.heading} {self.body}" if self.heading else self.body


@dataclass(frozen=True)
class RetrievalResult:
    passages: list[ContextPassage]
    degraded: bool = False  # re-ranker fell back to fused ordering


class Reranker(Protocol):
    reranker_id: str
    kind: str

    def score(self, query: str, passages: Sequence[str]) -> list[float]: ...


class LexicalOverlapReranker:
    """Jaccard similarity between query and passage token sets.

    Deterministic and model-free; the default re-ranker for tests and for
    deployments without a cross-encoder endpoint.
    """

    reranker_id = "lexical-overlap"
    kind = "lexical_overlap"

    def __init__(self, tokenizer: TokenizerConfig = DEFAULT_TOKENIZER):
        self.tokenizer = tokenizer

    def score(self, query: str, passages: Sequence[str]) -> list[float]:
        q_set = set(tokenize(query, self.tokenizer))
        scores = []
        for passage in passages:
            p_set = set(tokenize(passage, self.tokenizer))
            union = q_set | p_set
            scores.append(len(q_set & p_set) / len(union) if union else 0.0)
        return scores


class HttpCrossEncoderReranker:
    """Remote scorer speaking ``{"query":…, "passages": […]} -> {"scores": […]}``."""

    kind = "external_cross_encoder"

    def __init__(self, endpoint: str, reranker_id: str = "cross-encoder", timeout: float = 30.0):
        import httpx

        self.endpoint = endpoint
        self.reranker_id = reranker_id
        self._client = httpx.Client(timeout=timeout)

    def score(self, query: str, passages: Sequence[str]) -> list[float]:
        import httpx

        try:
            response = self._client.post(
                self.endpoint, json={"query": query, "passages": list(passages)}
            )
            response.raise_for_status()
        except httpx.HTTPError as exc:
            raise RerankerUnavailable(f"re-rank endpoint failed: {exc}") from exc
        scores = response.json().get("scores")
        if scores is None or len(scores) != len(passages):
            raise RerankerUnavailable("re-rank endpoint returned a malformed payload")
        return [float(s) for s in scores]


def fuse_rrf(
    ranked_lists: Sequence[Sequence[ScoredHit]], constant: float = DEFAULT_RRF_CONSTANT
) -> dict[str, float]:
    """Reciprocal-rank fusion: each list contributes 1/(constant + rank),
    rank counted from 1. Consumes only rank positions, never raw scores."""
    fused: dict[str, float] = {}
    for hits in ranked_lists:
        for rank, hit in enumerate(hits, start=1):
            fused[hit.chunk_ref] = fused.get(hit.chunk_ref, 0.0) + 1.0 / (constant + rank)
    return fused


def fuse_weighted(
    sparse_hits: Sequence[ScoredHit],
    dense_hits: Sequence[ScoredHit],
    weight_dense: float,
) -> dict[str, float]:
    """Weighted sum of per-list min-max normalized scores.

    A constant-score list normalizes to all-ones (every member is equally
    "best"); refs absent from a list contribute zero from that side.
    """

    def normalize(hits: Sequence[ScoredHit]) -> dict[str, float]:
        if not hits:
            return {}
        lo = min(h.score for h in hits)
        hi = max(h.score for h in hits)
        if hi == lo:
            return {h.chunk_ref: 1.0 for h in hits}
        return {h.chunk_ref: (h.score - lo) / (hi - lo) for h in hits}

    sparse_norm = normalize(sparse_hits)
    dense_norm = normalize(dense_hits)
    fused: dict[str, float] = {}
    for ref in set(sparse_norm) | set(dense_norm):
        fused[ref] = weight_dense * dense_norm.get(ref, 0.0) + (
            1.0 - weight_dense
        ) * sparse_norm.get(ref, 0.0)
    return fused


def hybrid_candidates(
    query: str,
    sparse: SparseIndex,
    dense: DenseIndex,
    embedder: EmbeddingProvider,
    chunks: Mapping[str, Chunk],
    cfg: RetrievalConfig,
    tokenizer: TokenizerConfig = DEFAULT_TOKENIZER,
) -> list[ContextPassage]:
    """Union of top sparse and dense hits with fused scores and provenance."""
    query_tokens = tokenize(query, tokenizer)
    sparse_hits = sparse.search(query_tokens, cfg.k_sparse, scorer="bm25") if query_tokens else []
    dense_hits: list[ScoredHit] = []
    if len(dense) > 0:
        try:
            query_vec = embedder.embed(query)
        except EmbeddingTransportError:
            raise  # caller may retry; do not silently drop the dense side
        except EmbeddingError:
            query_vec = None  # unembeddable query (e.g. only punctuation)
        if query_vec is not None:
            dense_hits = dense.search_ann(query_vec, cfg.k_dense)

    if cfg.fusion == "rrf":
        fused = fuse_rrf([sparse_hits, dense_hits], cfg.rrf_constant)
    else:
        fused = fuse_weighted(sparse_hits, dense_hits, cfg.weight_dense)

    provenance: dict[str, set[str]] = {}
    for hit in sparse_hits:
        provenance.setdefault(hit.chunk_ref, set()).add("sparse")
    for hit in dense_hits:
        provenance.setdefault(hit.chunk_ref, set()).add("dense")

    passages = []
    for ref, score in fused.items():
        chunk = chunks.get(ref)
        if chunk is None:
            logger.warning("fused candidate %s has no chunk record; skipped", ref)
            continue
        passages.append(
            ContextPassage(
                chunk_ref=ref,
                heading=chunk.heading,
                body=chunk.body,
                fused_score=score,
                rerank_score=0.0,
                provenance=frozenset(provenance[ref]),
            )
        )
    passages.sort(key=lambda p: (-p.fused_score, p.chunk_ref))
    return passages


def rerank(
    query: str,
    candidates: Sequence[ContextPassage],
    reranker: Reranker,
    k_final: int,
) -> tuple[list[ContextPassage], bool]:
    """Order candidates by re-rank score and truncate to k_final.

    Returns (passages, degraded); degraded means the re-ranker was
    unreachable and the fused ordering was served instead.
    """
    if not candidates:
        return [], False
    try:
        scores = reranker.score(query, [p.text for p in candidates])
    except RerankerUnavailable:
        logger.warning("re-ranker unavailable; serving fused order")
        ordered = sorted(candidates, key=lambda p: (-p.fused_score, p.chunk_ref))
        return list(ordered[:k_final]), True
    rescored = [replace(p, rerank_score=s) for p, s in zip(candidates, scores)]
    rescored.sort(key=lambda p: (-p.rerank_score, -p.fused_score, p.chunk_ref))
    return rescored[:k_final], False


def retrieve(
    query: str,
    sparse: SparseIndex,
    dense: DenseIndex,
    embedder: EmbeddingProvider,
    chunks: Mapping[str, Chunk],
    reranker: Reranker,
    cfg: RetrievalConfig,
    tokenizer: TokenizerConfig = DEFAULT_TOKENIZER,
) -> RetrievalResult:
    """Full first-stage retrieval: hybrid candidates, then re-rank to top-k."""
    if len(sparse) == 0 and len(dense) == 0:
        return RetrievalResult(passages=[])
    candidates = hybrid_candidates(query, sparse, dense, embedder, chunks, cfg, tokenizer)
    passages, degraded = rerank(query, candidates, reranker, cfg.k_final)
    return RetrievalResult(passages=passages, degraded=degraded)
