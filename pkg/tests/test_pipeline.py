"""Fusion and re-ranking behavior, including the hybrid dominance fixture."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragserve.corpus import Chunk, tokenize
from ragserve.dense import DenseIndex, HashingEmbedder
from ragserve.pipeline import (
    ContextPassage,
    HttpCrossEncoderReranker,
    LexicalOverlapReranker,
    RerankerUnavailable,
    RetrievalConfig,
    RetrievalResult,
    fuse_rrf,
    fuse_weighted,
    hybrid_candidates,
    rerank,
    retrieve,
)
from ragserve.sparse import ScoredHit, SparseIndex


def chunk_of(ref: str, body: str, heading: str = "") -> Chunk:
    prefixed = f"{heading} {body}" if heading else body
    return Chunk(
        chunk_id=ref,
        doc_id="doc",
        heading=heading,
        body=body,
        token_count=len(tokenize(prefixed)),
        ordinal=0,
    )


def build_corpus(texts: dict[str, str], embedder: HashingEmbedder):
    chunks = {ref: chunk_of(ref, body) for ref, body in texts.items()}
    sparse = SparseIndex()
    sparse.add_chunks(chunks.values())
    dense = DenseIndex(dimension=embedder.dimension)
    dense.add_vectors(
        (ref, embedder.embed(chunk.retrieval_text)) for ref, chunk in chunks.items()
    )
    return chunks, sparse, dense


def hit(ref: str, score: float, origin: str = "sparse") -> ScoredHit:
    return ScoredHit(chunk_ref=ref, score=score, origin=origin)


class TestConfig:
    def test_defaults(self):
        cfg = RetrievalConfig()
        assert (cfg.k_sparse, cfg.k_dense, cfg.k_final) == (20, 20, 5)
        assert cfg.fusion == "rrf"
        assert cfg.rrf_constant == 60.0

    def test_k_final_bound(self):
        with pytest.raises(ValueError):
            RetrievalConfig(k_sparse=2, k_dense=2, k_final=5)

    def test_weight_range(self):
        with pytest.raises(ValueError):
            RetrievalConfig(weight_dense=1.5)


class TestFuseRrf:
    def test_first_in_both_lists(self):
        fused = fuse_rrf([[hit("x", 9.0)], [hit("x", 0.8, "dense")]], constant=60)
        assert fused["x"] == pytest.approx(2 / 61)

    def test_dense_only_rank_three(self):
        dense = [hit(f"d{i}", 1.0 - i / 10, "dense") for i in range(5)]
        fused = fuse_rrf([[], dense], constant=60)
        assert fused["d2"] == pytest.approx(1 / 63)

    def test_rank_only_dependence(self):
        sparse = [hit("a", 5.0), hit("b", 2.0), hit("c", 1.0)]
        scaled = [hit(h.chunk_ref, h.score * 1000.0) for h in sparse]
        dense = [hit("b", 0.9, "dense"), hit("c", 0.5, "dense")]
        assert fuse_rrf([sparse, dense]) == fuse_rrf([scaled, dense])


class TestFuseWeighted:
    def test_minmax_normalization(self):
        sparse = [hit("a", 10.0), hit("b", 5.0), hit("c", 0.0)]
        dense = [hit("b", 1.0, "dense"), hit("a", 0.0, "dense")]
        fused = fuse_weighted(sparse, dense, weight_dense=0.5)
        assert fused["a"] == pytest.approx(0.5 * 0.0 + 0.5 * 1.0)
        assert fused["b"] == pytest.approx(0.5 * 1.0 + 0.5 * 0.5)
        assert fused["c"] == pytest.approx(0.0)

    def test_constant_list_normalizes_to_one(self):
        fused = fuse_weighted([hit("a", 3.0), hit("b", 3.0)], [], weight_dense=0.5)
        assert fused == {"a": 0.5, "b": 0.5}


@pytest.fixture
def lexical():
    return LexicalOverlapReranker()


def passage(ref: str, body: str, fused: float = 0.5) -> ContextPassage:
    return ContextPassage(
        chunk_ref=ref,
        heading="",
        body=body,
        fused_score=fused,
        rerank_score=0.0,
        provenance=frozenset({"sparse"}),
    )


class TestRerank:
    def test_singleton(self, lexical):
        only = passage("a", "whatever text")
        out, degraded = rerank("query", [only], lexical, k_final=5)
        assert [p.chunk_ref for p in out] == ["a"]
        assert not degraded

    def test_lexical_ordering_matches_hand_jaccard(self, lexical):
        # query tokens {lift, wing, pressure}; hand-computed Jaccard:
        #   full: {lift, wing, pressure} -> 3/3 = 1.0
        #   half: {lift, drag, pressure, force} -> 2/5 = 0.4
        #   none: {viscosity, reynolds} -> 0/5 = 0.0
        cands = [
            passage("none", "viscosity reynolds"),
            passage("half", "lift drag pressure force"),
            passage("full", "lift wing pressure"),
        ]
        out, _ = rerank("lift wing pressure", cands, lexical, k_final=3)
        assert [p.chunk_ref for p in out] == ["full", "half", "none"]
        assert out[0].rerank_score == pytest.approx(1.0)
        assert out[1].rerank_score == pytest.approx(0.4)
        assert out[2].rerank_score == pytest.approx(0.0)

    def test_truncation(self, lexical):
        cands = [passage(f"p{i}", f"word{i} query") for i in range(10)]
        out, _ = rerank("query", cands, lexical, k_final=2)
        assert len(out) == 2

    def test_empty_candidates(self, lexical):
        assert rerank("q", [], lexical, k_final=3) == ([], False)

    def test_tie_breaks_on_fused_then_ref(self, lexical):
        a = passage("b", "same text", fused=0.9)
        b = passage("a", "same text", fused=0.9)
        c = passage("c", "same text", fused=0.1)
        out, _ = rerank("unrelated", [a, b, c], lexical, k_final=3)
        assert [p.chunk_ref for p in out] == ["a", "b", "c"]

    def test_unreachable_endpoint_degrades_to_fused(self):
        reranker = HttpCrossEncoderReranker(
            "http://127.0.0.1:1/score", timeout=0.2
        )  # nothing listens on port 1
        cands = [passage("low", "x", fused=0.1), passage("high", "y", fused=0.9)]
        out, degraded = rerank("q", cands, reranker, k_final=2)
        assert degraded
        assert [p.chunk_ref for p in out] == ["high", "low"]

    @given(
        st.lists(
            st.tuples(st.integers(0, 10_000), st.floats(0, 1, allow_nan=False)),
            min_size=1,
            max_size=25,
            unique_by=lambda t: t[0],
        ),
        st.integers(min_value=1, max_value=10),
    )
    @settings(max_examples=50)
    def test_permutation_subset(self, items, k_final):
        cands = [passage(f"p{i:05d}", f"body tokens {i}", fused=f) for i, f in items]
        out, _ = rerank("body tokens", cands, LexicalOverlapReranker(), k_final)
        refs_in = {p.chunk_ref for p in cands}
        refs_out = [p.chunk_ref for p in out]
        assert len(refs_out) == len(set(refs_out))  # no duplication
        assert set(refs_out) <= refs_in  # nothing invented
        assert len(refs_out) == min(k_final, len(cands))


KEYWORD_QUERY = "how does flangeol affect lift generation"
# The paraphrase chunk shares zero literal tokens with the query; the test
# embedder's synonym map sends its words onto the query's vocabulary.
SYNONYMS = {
    "flangeolum": "flangeol",
    "influence": "affect",
    "upforce": "lift",
    "creation": "generation",
}


@pytest.fixture
def planted_corpus():
    embedder = HashingEmbedder(dimension=128, seed=17, synonyms=SYNONYMS)
    texts = {
        # Exact-keyword chunk: contains the rare term but buried in filler.
        "keyword": "flangeol " + " ".join(f"filler{i}" for i in range(60)),
        # Paraphrase chunk: synonyms only, no literal overlap with the query.
        "paraphrase": "flangeolum influence upforce creation",
    }
    for i in range(18):
        texts[f"noise{i:02d}"] = f"unrelated topic{i} words about something{i} else{i}"
    return build_corpus(texts, embedder) + (embedder,)


class TestHybridCandidates:
    def test_union_and_provenance(self, planted_corpus):
        chunks, sparse, dense, embedder = planted_corpus
        cfg = RetrievalConfig(k_sparse=5, k_dense=5, k_final=5)
        cands = hybrid_candidates(KEYWORD_QUERY, sparse, dense, embedder, chunks, cfg)
        by_ref = {p.chunk_ref: p for p in cands}
        assert "keyword" in by_ref and "paraphrase" in by_ref
        assert "sparse" in by_ref["keyword"].provenance
        assert "dense" in by_ref["paraphrase"].provenance
        assert all(p.provenance for p in cands)

    def test_sparse_only_misses_paraphrase(self, planted_corpus):
        _, sparse, _, _ = planted_corpus
        hits = sparse.search(tokenize(KEYWORD_QUERY), k=5)
        refs = {h.chunk_ref for h in hits}
        assert "keyword" in refs
        assert "paraphrase" not in refs  # zero literal token overlap

    def test_dense_only_misses_keyword(self, planted_corpus):
        _, _, dense, embedder = planted_corpus
        hits = dense.search_ann(embedder.embed(KEYWORD_QUERY), k=2)
        refs = {h.chunk_ref for h in hits}
        assert "paraphrase" in refs
        assert "keyword" not in refs  # diluted by sixty filler tokens

    def test_fusion_superset_property(self, planted_corpus):
        chunks, sparse, dense, embedder = planted_corpus
        cfg = RetrievalConfig(k_sparse=5, k_dense=5, k_final=5)
        sparse_refs = {h.chunk_ref for h in sparse.search(tokenize(KEYWORD_QUERY), 5)}
        dense_refs = {
            h.chunk_ref for h in dense.search_ann(embedder.embed(KEYWORD_QUERY), 5)
        }
        cands = hybrid_candidates(KEYWORD_QUERY, sparse, dense, embedder, chunks, cfg)
        assert {p.chunk_ref for p in cands} <= sparse_refs | dense_refs

    def test_weighted_fusion_also_unions(self, planted_corpus):
        chunks, sparse, dense, embedder = planted_corpus
        cfg = RetrievalConfig(fusion="weighted", weight_dense=0.5)
        cands = hybrid_candidates(KEYWORD_QUERY, sparse, dense, embedder, chunks, cfg)
        refs = {p.chunk_ref for p in cands}
        assert {"keyword", "paraphrase"} <= refs


class TestRetrieve:
    def test_empty_corpus(self):
        embedder = HashingEmbedder(dimension=32)
        result = retrieve(
            "anything",
            SparseIndex(),
            DenseIndex(dimension=32),
            embedder,
            {},
            LexicalOverlapReranker(),
            RetrievalConfig(),
        )
        assert result == RetrievalResult(passages=[], degraded=False)

    def test_verbatim_chunk_ranks_first_under_lexical(self):
        embedder = HashingEmbedder(dimension=64, seed=2)
        texts = {
            "target": "bernoulli relates pressure and velocity",
            "other1": "reynolds number predicts turbulence onset",
            "other2": "continuity equation conserves mass flow",
        }
        chunks, sparse, dense = build_corpus(texts, embedder)
        result = retrieve(
            "bernoulli relates pressure and velocity",
            sparse,
            dense,
            embedder,
            chunks,
            LexicalOverlapReranker(),
            RetrievalConfig(),
        )
        assert result.passages[0].chunk_ref == "target"
        assert result.passages[0].rerank_score == pytest.approx(1.0)

    def test_hybrid_dominates_single_retrievers(self, planted_corpus):
        chunks, sparse, dense, embedder = planted_corpus
        cfg = RetrievalConfig(k_sparse=5, k_dense=5, k_final=5)
        relevant = {"keyword", "paraphrase"}

        sparse_top = {h.chunk_ref for h in sparse.search(tokenize(KEYWORD_QUERY), 5)}
        dense_top = {
            h.chunk_ref for h in dense.search_ann(embedder.embed(KEYWORD_QUERY), 5)
        }
        cands = hybrid_candidates(KEYWORD_QUERY, sparse, dense, embedder, chunks, cfg)
        hybrid_top = {p.chunk_ref for p in cands[:5]}

        recall = lambda got: len(got & relevant) / len(relevant)
        assert recall(hybrid_top) >= max(recall(sparse_top), recall(dense_top))
        assert recall(hybrid_top) == 1.0

    def test_punctuation_only_query(self, planted_corpus):
        chunks, sparse, dense, embedder = planted_corpus
        result = retrieve(
            "?!...", sparse, dense, embedder, chunks, LexicalOverlapReranker(), RetrievalConfig()
        )
        assert isinstance(result.passages, list)
