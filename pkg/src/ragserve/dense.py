"""Embedding-based retrieval: providers, exact cosine search, and HNSW ANN.

Vectors are unit-normalized float32 throughout, so cosine similarity is a
plain dot product. The ANN layer is a navigable multi-layer proximity graph
(skip-list-like hierarchy): every vector lives on layer 0, progressively
fewer on higher layers, and searches greedily descend from the sparse top
layers into a beam search on the base layer.

Node layers are derived by hashing the chunk_ref with the graph seed, which
makes builds reproducible without threading RNG state through insertion
order.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import math
import struct
from typing import Iterable, Sequence

import numpy as np

from .corpus import clean_text, tokenize
from .sparse import ScoredHit, SnapshotFormatError, _read_str, _write_str

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"RSDX"
SNAPSHOT_VERSION = 1

DEFAULT_DIMENSION = 512
DEFAULT_M_NEIGHBORS = 16
DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_EF_SEARCH = 100
ANN_EXACT_FALLBACK = 1000  # below this size exact search is effectively free
PRUNE_SLACK = 8  # adjacency lists may overgrow this much between shrinks

NORM_TOLERANCE = 1e-6


class EmbeddingError(Exception):
    """Embedding input was unusable (empty after cleaning, wrong shape...)."""


class EmbeddingTransportError(EmbeddingError):
    """The embedding endpoint could not be reached; callers may retry."""


class DuplicateVectorError(ValueError):
    """A chunk_ref already has a stored vector."""


class DimensionMismatchError(ValueError):
    """A vector's length does not match the index dimension."""


class GraphNotBuiltError(RuntimeError):
    """ANN search was requested before build_ann on a large corpus."""


def _normalized(vec: np.ndarray) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float32).reshape(-1)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise EmbeddingError("cannot normalize a zero vector")
    if abs(norm - 1.0) > NORM_TOLERANCE:
        arr = arr / np.float32(norm)
    return arr


class EmbeddingProvider:
    """Maps text into a shared unit-vector space; queries and chunks use the
    same provider so their vectors are comparable."""

    provider_id: str
    dimension: int
    max_input_tokens: int

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts]) if texts else np.zeros(
            (0, self.dimension), dtype=np.float32
        )


class HashingEmbedder(EmbeddingProvider):
    """Deterministic test-double embedder: seeded random projection of the
    token-count vector.

    Each distinct token hashes to a fixed Gaussian row; a text's vector is
    the count-weighted sum of its tokens' rows, normalized. Texts sharing no
    tokens are nearly orthogonal at high dimension. An optional synonym map
    canonicalizes tokens first, so paraphrases land near each other — the
    test suite uses this to emulate semantic matching without any model.
    """

    def __init__(
        self,
        dimension: int = DEFAULT_DIMENSION,
        seed: int = 0,
        max_input_tokens: int = 8192,
        synonyms: dict[str, str] | None = None,
        provider_id: str = "hashing",
    ):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.provider_id = provider_id
        self.dimension = dimension
        self.seed = seed
        self.max_input_tokens = max_input_tokens
        self.synonyms = dict(synonyms or {})
        self.truncation_count = 0
        self._rows: dict[str, np.ndarray] = {}
        self._key = seed.to_bytes(8, "little", signed=True)

    def _token_row(self, token: str) -> np.ndarray:
        row = self._rows.get(token)
        if row is None:
            digest = hashlib.blake2b(token.encode(), digest_size=8, key=self._key).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            row = rng.standard_normal(self.dimension, dtype=np.float32)
            self._rows[token] = row
        return row

    def embed(self, text: str) -> np.ndarray:
        cleaned = clean_text(text)
        if not cleaned:
            raise EmbeddingError("text is empty after cleaning")
        tokens = tokenize(cleaned)
        if len(tokens) > self.max_input_tokens:
            self.truncation_count += 1
            logger.warning(
                "embedding input truncated from %d to %d tokens",
                len(tokens),
                self.max_input_tokens,
            )
            tokens = tokens[: self.max_input_tokens]
        if self.synonyms:
            tokens = [self.synonyms.get(t, t) for t in tokens]
        if not tokens:
            # Pure-punctuation text: fall back to hashing the cleaned string
            # so the result stays deterministic and unit-length.
            return _normalized(self._token_row(cleaned))
        acc = np.zeros(self.dimension, dtype=np.float32)
        for token in tokens:
            acc += self._token_row(token)
        return _normalized(acc)


class HttpEmbeddingProvider(EmbeddingProvider):
    """Remote embedder speaking ``{"texts": [...]} -> {"vectors": [[...]]}``."""

    def __init__(
        self,
        endpoint: str,
        dimension: int = DEFAULT_DIMENSION,
        max_input_tokens: int = 8192,
        provider_id: str = "http",
        timeout: float = 30.0,
    ):
        import httpx

        self.endpoint = endpoint
        self.provider_id = provider_id
        self.dimension = dimension
        self.max_input_tokens = max_input_tokens
        self.truncation_count = 0
        self._client = httpx.Client(timeout=timeout)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        if not texts:
            return np.zeros((0, self.dimension), dtype=np.float32)
        cleaned = []
        for text in texts:
            stripped = clean_text(text)
            if not stripped:
                raise EmbeddingError("text is empty after cleaning")
            tokens = tokenize(stripped)
            if len(tokens) > self.max_input_tokens:
                self.truncation_count += 1
                logger.warning("embedding input truncated to %d tokens", self.max_input_tokens)
                stripped = " ".join(tokens[: self.max_input_tokens])
            cleaned.append(stripped)
        try:
            response = self._client.post(self.endpoint, json={"texts": cleaned})
            response.raise_for_status()
        except httpx.HTTPError as exc:
            raise EmbeddingTransportError(f"embedding endpoint failed: {exc}") from exc
        vectors = response.json().get("vectors")
        if vectors is None or len(vectors) != len(cleaned):
            raise EmbeddingTransportError("embedding endpoint returned a malformed payload")
        out = np.asarray(vectors, dtype=np.float32)
        if out.shape != (len(cleaned), self.dimension):
            raise DimensionMismatchError(
                f"endpoint returned shape {out.shape}, expected ({len(cleaned)}, {self.dimension})"
            )
        return np.stack([_normalized(row) for row in out])


def _level_for_ref(ref: str, seed: int, ml: float) -> int:
    key = seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(ref.encode(), digest_size=8, key=key, salt=b"hnswlvl-").digest()
    # Map to (0, 1]; +1 avoids log(0).
    u = (int.from_bytes(digest, "little") + 1) / 2.0**64
    return int(-math.log(u) * ml)


class HnswGraph:
    """Layered proximity graph over rows of an external vector matrix.

    The graph stores only row ids; vectors always come from the owning
    index's matrix, so there is exactly one copy of the data. Degree is
    capped at ``2m`` on the base layer and ``m`` above, with a small bounded
    overshoot (PRUNE_SLACK) between diversity-pruning passes.
    """

    def __init__(self, m: int, ef_construction: int, seed: int):
        self.m = m
        self.m0 = 2 * m
        self.ef_construction = ef_construction
        self.seed = seed
        # Level normalization 1/ln(m): each layer holds ~1/m of the one below.
        self.ml = 1.0 / math.log(m) if m > 1 else 1.0
        self.levels: list[int] = []
        self.neighbors: list[list[list[int]]] = []  # node -> layer -> row ids
        self.entry_point: int = -1
        self.max_level: int = -1

    def __len__(self) -> int:
        return len(self.levels)

    def adjacency(self, node: int, layer: int) -> list[int]:
        return list(self.neighbors[node][layer])

    # -- internals -----------------------------------------------------------

    def _walk_layer(
        self,
        sims: list[float],
        entry_points: list[int],
        layer: int,
        ef: int,
    ) -> list[tuple[float, int]]:
        """Beam search on one layer against precomputed similarities.

        Construction visits a large fraction of the graph per insert, so the
        caller precomputes one similarity scan and this walk stays in pure
        Python scalars; returns (distance, id) sorted ascending.
        """
        visited = set(entry_points)
        candidates = [(1.0 - sims[p], p) for p in entry_points]  # min-heap
        heapq.heapify(candidates)
        best = [(-d, p) for d, p in candidates]  # max-heap via negation
        heapq.heapify(best)
        neighbors = self.neighbors
        lower = -best[0][0]
        full = len(best) >= ef

        while candidates:
            dist, node = heapq.heappop(candidates)
            if full and dist > lower:
                break
            layers = neighbors[node]
            if layer >= len(layers):
                continue
            for other in layers[layer]:
                if other in visited:
                    continue
                visited.add(other)
                d = 1.0 - sims[other]
                if not full:
                    heapq.heappush(candidates, (d, other))
                    heapq.heappush(best, (-d, other))
                    full = len(best) >= ef
                    lower = -best[0][0]
                elif d < lower:
                    heapq.heappush(candidates, (d, other))
                    heapq.heapreplace(best, (-d, other))
                    lower = -best[0][0]
        return sorted((-nd, node) for nd, node in best)

    def _search_layer(
        self,
        matrix: np.ndarray,
        query: np.ndarray,
        entry_points: list[int],
        layer: int,
        ef: int,
    ) -> list[tuple[float, int]]:
        """Beam search for queries: batches distance work per expansion so a
        search touches only the rows it actually visits."""
        visited = set(entry_points)
        dists = (1.0 - matrix[entry_points] @ query).tolist()
        candidates = list(zip(dists, entry_points))
        heapq.heapify(candidates)
        best = [(-d, p) for d, p in candidates]
        heapq.heapify(best)
        neighbors = self.neighbors

        while candidates:
            dist, node = heapq.heappop(candidates)
            if len(best) >= ef and dist > -best[0][0]:
                break
            layers = neighbors[node]
            if layer >= len(layers):
                continue
            fresh = [n for n in layers[layer] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            fresh_dists = (1.0 - matrix[fresh] @ query).tolist()
            for other, d in zip(fresh, fresh_dists):
                if len(best) < ef:
                    heapq.heappush(candidates, (d, other))
                    heapq.heappush(best, (-d, other))
                elif d < -best[0][0]:
                    heapq.heappush(candidates, (d, other))
                    heapq.heapreplace(best, (-d, other))
        return sorted((-nd, node) for nd, node in best)

    def _select_neighbors(
        self,
        matrix: np.ndarray,
        ids: list[int],
        dists: list[float],
        m: int,
    ) -> list[int]:
        """Diversity-aware neighbor selection over distance-sorted candidates.

        Accepts a candidate only if it is closer to the query point than to
        any already-selected neighbor, which spreads edges across directions
        instead of clustering them; rejected candidates backfill remaining
        slots so nodes keep their full degree.
        """
        if len(ids) <= m:
            return list(ids)
        vecs = matrix[ids]
        closest_selected = np.full(len(ids), np.inf, dtype=np.float32)
        selected: list[int] = []
        rejected: list[int] = []
        for j, dist in enumerate(dists):
            if len(selected) == m:
                break
            if dist < closest_selected[j]:
                selected.append(j)
                np.minimum(closest_selected, 1.0 - vecs @ vecs[j], out=closest_selected)
            else:
                rejected.append(j)
        for j in rejected:
            if len(selected) == m:
                break
            selected.append(j)
        return [ids[j] for j in selected]

    def _shrink(self, matrix: np.ndarray, node: int, layer: int) -> None:
        """Heuristic re-selection of an overgrown adjacency list down to cap.

        One pairwise-distance matmul feeds the whole diversity loop, so the
        shrink costs far less than selecting edge-by-edge; PRUNE_SLACK lets
        lists overgrow a little between shrinks to amortize the work further.
        """
        cap = self.m0 if layer == 0 else self.m
        adjacency = self.neighbors[node][layer]
        vecs = matrix[adjacency]
        owner_dists = (1.0 - vecs @ matrix[node]).tolist()
        order = sorted(range(len(adjacency)), key=owner_dists.__getitem__)
        pair_dists = 1.0 - vecs @ vecs.T
        closest_selected = np.full(len(adjacency), np.inf, dtype=np.float32)
        selected: list[int] = []
        rejected: list[int] = []
        for j in order:
            if len(selected) == cap:
                break
            if owner_dists[j] < closest_selected[j]:
                selected.append(j)
                np.minimum(closest_selected, pair_dists[j], out=closest_selected)
            else:
                rejected.append(j)
        for j in rejected:
            if len(selected) == cap:
                break
            selected.append(j)
        self.neighbors[node][layer] = [adjacency[j] for j in selected]

    # -- construction ---------------------------------------------------------

    def insert(self, matrix: np.ndarray, row: int, ref: str) -> None:
        level = _level_for_ref(ref, self.seed, self.ml)
        assert row == len(self.levels), "rows must be inserted in matrix order"
        self.levels.append(level)
        self.neighbors.append([[] for _ in range(level + 1)])

        if self.entry_point < 0:
            self.entry_point = row
            self.max_level = level
            return

        sims = (matrix[:row] @ matrix[row]).tolist()
        eps = [self.entry_point]
        for layer in range(self.max_level, level, -1):
            nearest = self._walk_layer(sims, eps, layer, ef=1)
            eps = [nearest[0][1]]

        for layer in range(min(level, self.max_level), -1, -1):
            found = self._walk_layer(sims, eps, layer, self.ef_construction)
            # Base layer links up to 2m neighbors; the denser floor is what
            # the beam search leans on for recall.
            link_m = self.m0 if layer == 0 else self.m
            chosen = self._select_neighbors(
                matrix,
                [node for _, node in found],
                [dist for dist, _ in found],
                link_m,
            )
            cap = self.m0 if layer == 0 else self.m
            for other in chosen:
                self.neighbors[row][layer].append(other)
                back = self.neighbors[other][layer]
                back.append(row)
                if len(back) > cap + PRUNE_SLACK:
                    self._shrink(matrix, other, layer)
            eps = [node for _, node in found]

        if level > self.max_level:
            self.entry_point = row
            self.max_level = level

    def load_node(self, level: int, layers: list[list[int]]) -> None:
        """Append a node with fully materialized adjacency (snapshot restore)."""
        self.levels.append(level)
        self.neighbors.append([list(ids) for ids in layers])

    # -- search ----------------------------------------------------------------

    def search(self, matrix: np.ndarray, query: np.ndarray, k: int, ef: int) -> list[tuple[float, int]]:
        """Approximate k nearest rows; returns (distance, row) ascending."""
        if not self.levels:
            return []
        eps = [self.entry_point]
        for layer in range(self.max_level, 0, -1):
            nearest = self._search_layer(matrix, query, eps, layer, ef=1)
            eps = [nearest[0][1]]
        found = self._search_layer(matrix, query, eps, 0, max(ef, k))
        return found[:k]


class DenseIndex:
    """Chunk-aligned store of unit vectors with exact and ANN search paths."""

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self._refs: list[str] = []
        self._row_of: dict[str, int] = {}
        self._matrix = np.zeros((0, dimension), dtype=np.float32)
        self._ref_rank: np.ndarray | None = None
        self.graph: HnswGraph | None = None

    def __len__(self) -> int:
        return len(self._refs)

    def __contains__(self, chunk_ref: str) -> bool:
        return chunk_ref in self._row_of

    @property
    def refs(self) -> list[str]:
        return list(self._refs)

    def vector(self, chunk_ref: str) -> np.ndarray:
        row = self._row_of.get(chunk_ref)
        if row is None:
            raise KeyError(chunk_ref)
        return self._matrix[row].copy()

    # -- mutation ---------------------------------------------------------------

    def add_vectors(self, pairs: Iterable[tuple[str, np.ndarray]]) -> None:
        """Store (chunk_ref, vector) pairs, normalized; extends the ANN graph
        incrementally when one is built. Validates everything before mutating."""
        pairs = list(pairs)
        seen: set[str] = set()
        normalized: list[np.ndarray] = []
        for ref, vec in pairs:
            if ref in self._row_of or ref in seen:
                raise DuplicateVectorError(f"vector already stored for {ref!r}")
            seen.add(ref)
            arr = np.asarray(vec, dtype=np.float32).reshape(-1)
            if arr.shape[0] != self.dimension:
                raise DimensionMismatchError(
                    f"vector for {ref!r} has dimension {arr.shape[0]}, expected {self.dimension}"
                )
            normalized.append(_normalized(arr))
        if not pairs:
            return
        start = len(self._refs)
        self._matrix = np.vstack([self._matrix, np.stack(normalized)])
        for offset, (ref, _) in enumerate(pairs):
            self._refs.append(ref)
            self._row_of[ref] = start + offset
        self._ref_rank = None
        if self.graph is not None:
            for offset, (ref, _) in enumerate(pairs):
                self.graph.insert(self._matrix, start + offset, ref)

    # -- search -------------------------------------------------------------------

    def _rank_array(self) -> np.ndarray:
        if self._ref_rank is None or len(self._ref_rank) != len(self._refs):
            order = sorted(range(len(self._refs)), key=self._refs.__getitem__)
            rank = np.empty(len(self._refs), dtype=np.int64)
            for position, row in enumerate(order):
                rank[row] = position
            self._ref_rank = rank
        return self._ref_rank

    def _check_query(self, query_vec: np.ndarray, k: int) -> np.ndarray:
        if k < 1:
            raise ValueError("k must be >= 1")
        arr = np.asarray(query_vec, dtype=np.float32).reshape(-1)
        if arr.shape[0] != self.dimension:
            raise DimensionMismatchError(
                f"query has dimension {arr.shape[0]}, expected {self.dimension}"
            )
        return _normalized(arr)

    def search_exact(self, query_vec: np.ndarray, k: int) -> list[ScoredHit]:
        """Exhaustive cosine top-k; the ground truth the ANN path approximates."""
        query = self._check_query(query_vec, k)
        n = len(self._refs)
        if n == 0:
            return []
        sims = self._matrix @ query
        order = np.lexsort((self._rank_array(), -sims))[:k]
        return [
            ScoredHit(chunk_ref=self._refs[row], score=float(sims[row]), origin="dense")
            for row in order
        ]

    def build_ann(
        self,
        M_neighbors: int = DEFAULT_M_NEIGHBORS,
        ef_construction: int = DEFAULT_EF_CONSTRUCTION,
        seed: int = 0,
    ) -> None:
        """Construct the layered graph offline and swap it in atomically."""
        if len(self._refs) == 0:
            raise ValueError("cannot build an ANN graph over an empty index")
        graph = HnswGraph(M_neighbors, ef_construction, seed)
        for row, ref in enumerate(self._refs):
            graph.insert(self._matrix, row, ref)
        self.graph = graph

    def search_ann(
        self, query_vec: np.ndarray, k: int, ef_search: int = DEFAULT_EF_SEARCH
    ) -> list[ScoredHit]:
        """Approximate top-k; small corpora transparently use the exact path."""
        if k >= 1 and ef_search < k:
            raise ValueError("ef_search must be >= k")
        if len(self._refs) < ANN_EXACT_FALLBACK:
            return self.search_exact(query_vec, k)
        if self.graph is None:
            raise GraphNotBuiltError(
                "ANN graph not built for this corpus size; call build_ann() first"
            )
        query = self._check_query(query_vec, k)
        found = self.graph.search(self._matrix, query, k, ef_search)
        hits = [
            ScoredHit(chunk_ref=self._refs[row], score=1.0 - dist, origin="dense")
            for dist, row in found
        ]
        hits.sort(key=lambda h: (-h.score, h.chunk_ref))
        return hits

    # -- persistence -----------------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            graph = self.graph
            fh.write(
                struct.pack(
                    "<IIQBIIq",
                    SNAPSHOT_VERSION,
                    self.dimension,
                    len(self._refs),
                    1 if graph is not None else 0,
                    graph.m if graph else 0,
                    graph.ef_construction if graph else 0,
                    graph.seed if graph else 0,
                )
            )
            for ref in self._refs:
                _write_str(fh, ref)
            fh.write(np.ascontiguousarray(self._matrix, dtype="<f4").tobytes())
            if graph is not None:
                fh.write(struct.pack("<qq", graph.entry_point, graph.max_level))
                for row in range(len(self._refs)):
                    level = graph.levels[row]
                    fh.write(struct.pack("<II", level, level + 1))
                    for layer in range(level + 1):
                        adjacency = graph.adjacency(row, layer)
                        fh.write(struct.pack("<I", len(adjacency)))
                        fh.write(np.asarray(adjacency, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path) -> "DenseIndex":
        with open(path, "rb") as fh:
            if fh.read(4) != SNAPSHOT_MAGIC:
                raise SnapshotFormatError(f"not a dense index snapshot: {path}")
            header = struct.Struct("<IIQBIIq")
            version, dimension, count, has_graph, m, efc, seed = header.unpack(
                fh.read(header.size)
            )
            if version != SNAPSHOT_VERSION:
                raise SnapshotFormatError(
                    f"unsupported dense snapshot version {version} (expected {SNAPSHOT_VERSION})"
                )
            index = cls(dimension=dimension)
            index._refs = [_read_str(fh) for _ in range(count)]
            index._row_of = {ref: row for row, ref in enumerate(index._refs)}
            raw = fh.read(count * dimension * 4)
            index._matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dimension).copy()
            if has_graph:
                graph = HnswGraph(m, efc, seed)
                entry, max_level = struct.unpack("<qq", fh.read(16))
                graph.entry_point = entry
                graph.max_level = max_level
                for _ in range(count):
                    level, n_layers = struct.unpack("<II", fh.read(8))
                    layers: list[list[int]] = []
                    for _ in range(n_layers):
                        (n_adj,) = struct.unpack("<I", fh.read(4))
                        ids = np.frombuffer(fh.read(n_adj * 4), dtype="<u4")
                        layers.append([int(i) for i in ids])
                    graph.load_node(level, layers)
                index.graph = graph
        return index
