"""Retrieval benchmark: recall and latency per retriever mode.

Fixtures are plain files: a corpus directory of text documents and a CSV of
labeled queries (``query, relevant_ids``) where ids name corpus files (their
stem). A retrieved chunk counts toward recall when its parent document is
labeled relevant. The report lands as a CSV table, optionally JSON, and a
pair of rendered figures.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .corpus import Document, DocumentFormat, chunk_document, tokenize
from .dense import DenseIndex, EmbeddingProvider, HashingEmbedder
from .pipeline import (
    LexicalOverlapReranker,
    RetrievalConfig,
    hybrid_candidates,
    rerank,
)
from .sparse import SparseIndex

BENCH_MODES = ("sparse", "dense", "hybrid", "hybrid_rerank")


class BenchFixtureError(ValueError):
    """Corpus or query fixture is malformed."""


@dataclass(frozen=True)
class ModeStats:
    mode: str
    recall_at_k: float
    p50_ms: float
    p95_ms: float

    def __post_init__(self):
        if not 0.0 <= self.recall_at_k <= 1.0:
            raise ValueError("recall must be in [0, 1]")


@dataclass(frozen=True)
class BenchReport:
    corpus_size: int
    queries_run: int
    k: int
    modes: tuple[ModeStats, ...]


@dataclass(frozen=True)
class LabeledQuery:
    query: str
    relevant_docs: frozenset[str]


def load_corpus_dir(corpus_dir: str | Path) -> list[Document]:
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise BenchFixtureError(f"corpus directory not found: {corpus_dir}")
    suffix_formats = {".md": DocumentFormat.MARKDOWN, ".csv": DocumentFormat.CSV}
    documents = []
    for path in sorted(corpus_dir.iterdir()):
        if not path.is_file():
            continue
        fmt = suffix_formats.get(path.suffix.lower(), DocumentFormat.PLAIN)
        documents.append(
            Document.create(
                path.name,
                path.read_text(encoding="utf-8"),
                format=fmt,
                doc_id=path.stem,
            )
        )
    if not documents:
        raise BenchFixtureError(f"no corpus files in {corpus_dir}")
    return documents


def load_labeled_queries(queries_path: str | Path) -> list[LabeledQuery]:
    queries_path = Path(queries_path)
    if not queries_path.is_file():
        raise BenchFixtureError(f"queries file not found: {queries_path}")
    queries = []
    with open(queries_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise BenchFixtureError(
                    f"queries file line {reader.line_num}: expected 'query,relevant_ids'"
                )
            query, ids = row
            relevant = frozenset(t for t in ids.replace(";", " ").split() if t)
            if not query.strip() or not relevant:
                raise BenchFixtureError(
                    f"queries file line {reader.line_num}: empty query or relevant ids"
                )
            queries.append(LabeledQuery(query.strip(), relevant))
    if not queries:
        raise BenchFixtureError(f"queries file is empty: {queries_path}")
    return queries


def _percentile(values: list[float], fraction: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    index = min(len(ordered) - 1, max(0, round(fraction * (len(ordered) - 1))))
    return ordered[index]


def run_bench(
    corpus_dir: str | Path,
    queries_path: str | Path,
    modes: tuple[str, ...] = BENCH_MODES,
    k: int = 5,
    embedder: EmbeddingProvider | None = None,
    max_chunk_tokens: int = 384,
) -> BenchReport:
    for mode in modes:
        if mode not in BENCH_MODES:
            raise BenchFixtureError(f"unknown mode {mode!r}; choose from {BENCH_MODES}")
    documents = load_corpus_dir(corpus_dir)
    queries = load_labeled_queries(queries_path)
    embedder = embedder or HashingEmbedder(dimension=256, seed=0)

    chunks = {}
    for doc in documents:
        for chunk in chunk_document(doc, max_chunk_tokens):
            chunks[chunk.chunk_id] = chunk
    sparse = SparseIndex()
    sparse.add_chunks(chunks.values())
    dense = DenseIndex(dimension=embedder.dimension)
    dense.add_vectors(
        (ref, embedder.embed(chunk.retrieval_text)) for ref, chunk in chunks.items()
    )
    cfg = RetrievalConfig(k_final=k)
    reranker = LexicalOverlapReranker()

    def docs_of(refs: list[str]) -> set[str]:
        return {chunks[ref].doc_id for ref in refs if ref in chunks}

    def run_mode(mode: str, labeled: LabeledQuery) -> tuple[set[str], float]:
        start = time.perf_counter()
        if mode == "sparse":
            hits = sparse.search(tokenize(labeled.query), k)
            refs = [h.chunk_ref for h in hits]
        elif mode == "dense":
            hits = dense.search_ann(embedder.embed(labeled.query), k)
            refs = [h.chunk_ref for h in hits]
        else:
            candidates = hybrid_candidates(
                labeled.query, sparse, dense, embedder, chunks, cfg
            )
            if mode == "hybrid_rerank":
                passages, _ = rerank(labeled.query, candidates, reranker, k)
                refs = [p.chunk_ref for p in passages]
            else:
                refs = [p.chunk_ref for p in candidates[:k]]
        elapsed_ms = (time.perf_counter() - start) * 1000.0
        return docs_of(refs), elapsed_ms

    stats = []
    for mode in modes:
        recalls = []
        latencies = []
        for labeled in queries:
            got, elapsed = run_mode(mode, labeled)
            recalls.append(len(got & labeled.relevant_docs) / len(labeled.relevant_docs))
            latencies.append(elapsed)
        stats.append(
            ModeStats(
                mode=mode,
                recall_at_k=statistics.mean(recalls),
                p50_ms=_percentile(latencies, 0.50),
                p95_ms=_percentile(latencies, 0.95),
            )
        )
    return BenchReport(
        corpus_size=len(chunks),
        queries_run=len(queries),
        k=k,
        modes=tuple(stats),
    )


def format_table(report: BenchReport) -> str:
    header = f"{'mode':<16} {'recall@' + str(report.k):>10} {'p50 ms':>9} {'p95 ms':>9}"
    lines = [header, "-" * len(header)]
    for m in report.modes:
        lines.append(
            f"{m.mode:<16} {m.recall_at_k:>10.3f} {m.p50_ms:>9.2f} {m.p95_ms:>9.2f}"
        )
    lines.append(
        f"({report.corpus_size} chunks, {report.queries_run} queries)"
    )
    return "\n".join(lines)


def write_report(report: BenchReport, out_dir: str | Path, as_json: bool = True) -> dict[str, Path]:
    """CSV table plus (optionally) a JSON dump; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    csv_path = out_dir / "bench_report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", f"recall_at_{report.k}", "p50_ms", "p95_ms"])
        for m in report.modes:
            writer.writerow([m.mode, f"{m.recall_at_k:.6f}", f"{m.p50_ms:.3f}", f"{m.p95_ms:.3f}"])
    paths["csv"] = csv_path

    if as_json:
        json_path = out_dir / "bench_report.json"
        json_path.write_text(json.dumps(asdict(report), indent=2), encoding="utf-8")
        paths["json"] = json_path
    return paths


def render_figures(report: BenchReport, out_dir: str | Path) -> dict[str, Path]:
    """Recall and latency charts next to the delimited report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modes = [m.mode for m in report.modes]
    paths: dict[str, Path] = {}

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(modes, [m.recall_at_k for m in report.modes], color="#4878a8")
    ax.set_ylabel(f"recall@{report.k}")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"Retrieval recall ({report.queries_run} queries)")
    for i, m in enumerate(report.modes):
        ax.text(i, m.recall_at_k + 0.02, f"{m.recall_at_k:.2f}", ha="center", fontsize=8)
    fig.tight_layout()
    recall_path = out_dir / "bench_recall.png"
    fig.savefig(recall_path, dpi=120)
    plt.close(fig)
    paths["recall"] = recall_path

    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = range(len(modes))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [m.p50_ms for m in report.modes], width, label="p50")
    ax.bar([i + width / 2 for i in x], [m.p95_ms for m in report.modes], width, label="p95")
    ax.set_xticks(list(x), modes)
    ax.set_ylabel("latency (ms)")
    ax.set_title("Retrieval latency")
    ax.legend()
    fig.tight_layout()
    latency_path = out_dir / "bench_latency.png"
    fig.savefig(latency_path, dpi=120)
    plt.close(fig)
    paths["latency"] = latency_path
    return paths
