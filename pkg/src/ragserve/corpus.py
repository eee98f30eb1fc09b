"""Document normalization, tokenization, and chunking.

Everything downstream (both retrieval indexes, the embedders, the prompt
builder) operates on :class:`Chunk` objects produced here. All functions are
pure and deterministic: the same bytes in always produce the same chunk
sequence out.
"""

from __future__ import annotations

import csv
import io
import re
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Iterator

_WORD_RE = re.compile(r"[^\W_]+")  # maximal runs of Unicode letters/digits
_PARAGRAPH_RE = re.compile(r"\n\s*\n")
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")
_MD_HEADING_RE = re.compile(r"^(#{1,6})\s+(.*\S)\s*$")

DEFAULT_MAX_CHUNK_TOKENS = 384
MIN_CHUNK_TOKENS = 16
MAX_OVERLAP_FRACTION = 0.25


class DocumentFormat(str, Enum):
    PLAIN = "plain"
    MARKDOWN = "markdown"
    CSV = "csv"


class HeadingMode(str, Enum):
    PREFIX = "prefix"
    NONE = "none"


class IngestionError(ValueError):
    """Raised when a document cannot be turned into chunks."""


class UnsupportedFormatError(IngestionError):
    """Raised for formats outside plain/markdown/csv (notably PDF)."""


@dataclass(frozen=True)
class TokenizerConfig:
    """Deterministic word tokenization settings shared by all consumers."""

    lowercase: bool = True
    stopwords: frozenset[str] = frozenset()


DEFAULT_TOKENIZER = TokenizerConfig()


@dataclass(frozen=True)
class Document:
    """A raw ingested document; chunking never mutates it."""

    doc_id: str
    source_name: str
    raw_text: str
    format: DocumentFormat = DocumentFormat.PLAIN
    ingested_at: datetime = field(
        default_factory=lambda: datetime.now(timezone.utc)
    )

    @staticmethod
    def create(
        source_name: str,
        raw_text: str,
        format: DocumentFormat | str = DocumentFormat.PLAIN,
        doc_id: str | None = None,
    ) -> "Document":
        fmt = DocumentFormat(format)
        if not clean_text(raw_text):
            raise IngestionError(f"document {source_name!r} is empty after normalization")
        return Document(
            doc_id=doc_id or uuid.uuid4().hex[:12],
            source_name=source_name,
            raw_text=raw_text,
            format=fmt,
        )


@dataclass(frozen=True)
class Chunk:
    """One retrieval unit: a token-budgeted slice of a document.

    ``token_count`` counts the heading-prefixed body, so the budget applies
    to exactly the text that gets indexed and embedded.
    """

    chunk_id: str
    doc_id: str
    heading: str
    body: str
    token_count: int
    ordinal: int

    @property
    def retrieval_text(self) -> str:
        """The text both indexes see: heading-prefixed body."""
        return f"{self.heading} {self.body}" if self.heading else self.body


def tokenize(text: str, config: TokenizerConfig = DEFAULT_TOKENIZER) -> list[str]:
    """Split ``text`` into maximal runs of Unicode letters/digits.

    Underscores and all punctuation act as separators. Empty input yields an
    empty list.
    """
    tokens = _WORD_RE.findall(text)
    if config.lowercase:
        tokens = [t.lower() for t in tokens]
    if config.stopwords:
        tokens = [t for t in tokens if t not in config.stopwords]
    return tokens


def clean_text(raw: str) -> str:
    """Collapse all whitespace runs (including line breaks) to single spaces."""
    return " ".join(raw.split())


def _count(text: str, config: TokenizerConfig) -> int:
    return len(tokenize(text, config))


def _split_oversized_word(word: str, budget: int, config: TokenizerConfig) -> list[str]:
    # Last-resort split of a single whitespace-delimited word whose own token
    # count exceeds the budget. Cuts fall on tokenizer-token boundaries, so
    # each piece stays within budget; the single-space rejoin invariant does
    # not survive this pathological case.
    spans = [m.span() for m in _WORD_RE.finditer(word)]
    pieces: list[str] = []
    start = 0
    taken = 0
    for i, (_, end) in enumerate(spans):
        taken += 1
        if taken == budget and i + 1 < len(spans):
            pieces.append(word[start:end])
            start = end
            taken = 0
    if word[start:]:
        pieces.append(word[start:])
    return pieces


def _split_to_budget(text: str, budget: int, config: TokenizerConfig) -> list[str]:
    """Split cleaned ``text`` into pieces of at most ``budget`` tokens."""
    return _pack_paragraphs([text], budget, config, overlap_tokens=0)


def _pack_units(para: str, budget: int, config: TokenizerConfig) -> Iterator[tuple[str, int]]:
    """Decompose a paragraph into the smallest units packing may combine.

    A paragraph that fits the budget stays whole; otherwise it degrades to
    sentences, then words, then (pathologically) token-boundary fragments,
    so splits always land on the coarsest boundary available.
    """
    n = _count(para, config)
    if n <= budget:
        yield para, n
        return
    for sentence in _SENTENCE_RE.split(para):
        sn = _count(sentence, config)
        if sn <= budget:
            yield sentence, sn
            continue
        for word in sentence.split(" "):
            wn = _count(word, config)
            if wn <= budget:
                yield word, wn
            else:
                for piece in _split_oversized_word(word, budget, config):
                    yield piece, _count(piece, config)


def _pack_paragraphs(
    paragraphs: list[str],
    budget: int,
    config: TokenizerConfig,
    overlap_tokens: int,
) -> list[str]:
    """Greedily pack cleaned paragraphs into bodies of <= budget tokens."""
    units: list[tuple[str, int]] = [
        unit for para in paragraphs for unit in _pack_units(para, budget, config)
    ]

    bodies: list[str] = []
    acc: list[tuple[str, int]] = []
    acc_tokens = 0
    for unit in units:
        if acc and acc_tokens + unit[1] > budget:
            bodies.append(" ".join(text for text, _ in acc))
            # Carry a tail of the flushed chunk forward, but never so much
            # that the carried text plus the incoming unit overflows.
            carry_limit = min(overlap_tokens, budget - unit[1])
            carried: list[tuple[str, int]] = []
            carried_tokens = 0
            for prev in reversed(acc):
                if carried_tokens + prev[1] > carry_limit:
                    break
                carried.insert(0, prev)
                carried_tokens += prev[1]
            acc = carried
            acc_tokens = carried_tokens
        acc.append(unit)
        acc_tokens += unit[1]
    if acc:
        bodies.append(" ".join(text for text, _ in acc))
    return bodies


def _markdown_sections(raw: str) -> Iterator[tuple[str, str]]:
    """Yield (heading, section_text) pairs; heading text excludes the # marks."""
    heading = ""
    buf: list[str] = []
    for line in raw.splitlines():
        m = _MD_HEADING_RE.match(line)
        if m:
            if buf:
                yield heading, "\n".join(buf)
            heading = m.group(2)
            buf = []
        else:
            buf.append(line)
    if buf:
        yield heading, "\n".join(buf)


def chunk_document(
    doc: Document,
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
    heading_mode: HeadingMode | str = HeadingMode.PREFIX,
    tokenizer: TokenizerConfig = DEFAULT_TOKENIZER,
    overlap_fraction: float = 0.0,
) -> list[Chunk]:
    """Chunk a document under a token budget.

    Splits prefer paragraph boundaries, then sentences, then words. With
    ``heading_mode="prefix"`` the nearest preceding Markdown heading (or the
    CSV header row) is stored on each chunk and its tokens count against the
    budget. Joining the bodies of a plain document's chunks with single
    spaces reconstructs ``clean_text(doc.raw_text)``.
    """
    if max_chunk_tokens < MIN_CHUNK_TOKENS:
        raise ValueError(f"max_chunk_tokens must be >= {MIN_CHUNK_TOKENS}")
    if not 0.0 <= overlap_fraction <= MAX_OVERLAP_FRACTION:
        raise ValueError(f"overlap_fraction must be in [0, {MAX_OVERLAP_FRACTION}]")
    mode = HeadingMode(heading_mode)

    if doc.format == DocumentFormat.CSV:
        return ingest_csv(doc, max_chunk_tokens, heading_mode=mode, tokenizer=tokenizer)

    if doc.format == DocumentFormat.MARKDOWN:
        sections = list(_markdown_sections(doc.raw_text))
    else:
        sections = [("", doc.raw_text)]

    chunks: list[Chunk] = []
    ordinal = 0
    for heading, section_text in sections:
        paragraphs = [
            cleaned
            for part in _PARAGRAPH_RE.split(section_text)
            if (cleaned := clean_text(part))
        ]
        if not paragraphs:
            continue
        heading = clean_text(heading) if mode == HeadingMode.PREFIX else ""
        h_tokens = _count(heading, tokenizer) if heading else 0
        if h_tokens >= max_chunk_tokens:
            # A heading longer than the whole budget leaves no room for text;
            # fall back to body-only accounting for this section.
            h_tokens = 0
        budget = max_chunk_tokens - h_tokens
        overlap_tokens = int(budget * overlap_fraction)
        for body in _pack_paragraphs(paragraphs, budget, tokenizer, overlap_tokens):
            chunks.append(
                _make_chunk(doc, ordinal, heading, body, tokenizer)
            )
            ordinal += 1
    return chunks


def _make_chunk(
    doc: Document, ordinal: int, heading: str, body: str, tokenizer: TokenizerConfig
) -> Chunk:
    prefixed = f"{heading} {body}" if heading else body
    return Chunk(
        chunk_id=f"{doc.doc_id}:{ordinal:05d}",
        doc_id=doc.doc_id,
        heading=heading,
        body=body,
        token_count=_count(prefixed, tokenizer),
        ordinal=ordinal,
    )


def ingest_csv(
    doc: Document,
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
    heading_mode: HeadingMode | str = HeadingMode.PREFIX,
    tokenizer: TokenizerConfig = DEFAULT_TOKENIZER,
) -> list[Chunk]:
    """Turn each CSV data row into one chunk ``"h1: v1; h2: v2; ..."``.

    The header row becomes the chunk heading. Rows longer than the token
    budget are hard-split into consecutive chunks. Malformed CSV raises
    :class:`IngestionError` naming the offending line.
    """
    if doc.format != DocumentFormat.CSV:
        raise IngestionError(f"document {doc.source_name!r} is not CSV")
    if max_chunk_tokens < MIN_CHUNK_TOKENS:
        raise ValueError(f"max_chunk_tokens must be >= {MIN_CHUNK_TOKENS}")
    mode = HeadingMode(heading_mode)

    reader = csv.reader(io.StringIO(doc.raw_text))
    try:
        header = next(reader, None)
    except csv.Error as exc:
        raise IngestionError(f"CSV parse error at line 1: {exc}") from exc
    if header is None or not any(h.strip() for h in header):
        raise IngestionError("CSV has no header row (line 1)")
    header = [clean_text(h) for h in header]

    heading = "; ".join(header) if mode == HeadingMode.PREFIX else ""
    h_tokens = _count(heading, tokenizer) if heading else 0
    if h_tokens >= max_chunk_tokens:
        heading = ""
        h_tokens = 0
    budget = max_chunk_tokens - h_tokens

    chunks: list[Chunk] = []
    ordinal = 0
    while True:
        try:
            row = next(reader, None)
        except csv.Error as exc:
            raise IngestionError(
                f"CSV parse error at line {reader.line_num}: {exc}"
            ) from exc
        if row is None:
            break
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise IngestionError(
                f"CSV row at line {reader.line_num} has {len(row)} fields, "
                f"expected {len(header)}"
            )
        body = "; ".join(
            f"{name}: {clean_text(value)}" for name, value in zip(header, row)
        )
        for piece in _split_to_budget(body, budget, tokenizer) or [body]:
            chunks.append(_make_chunk(doc, ordinal, heading, piece, tokenizer))
            ordinal += 1
    return chunks
