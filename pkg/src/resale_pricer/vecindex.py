"""Product embeddings, the retrieval index, and top-k cosine search.

Two retrieval routes are exposed over one immutable snapshot:

* `search_topk` — exhaustive scan, the correctness oracle.
* `search_topk_ann` — beam search over a small-world graph (exact kNN edges
  plus random long-range shortcuts, made bidirectional), for large pools.

Snapshots are value objects: a rebuild produces a new snapshot and readers
swap atomically via `SnapshotHolder`.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .catalog import CandidatePool, Listing, format_rfc3339, parse_rfc3339
from .errors import IndexBuildError, TransportError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION = 128
NORM_TOLERANCE = 1e-6

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class EmbeddingProvider(Protocol):
    """Maps listing text into a fixed-dimension vector space."""

    dimension: int

    def embed_text(self, text: str) -> np.ndarray: ...


def listing_text(listing: Listing) -> str:
    """Canonical text fed to embedding providers (pure function of the fields)."""
    return f"{listing.title}\n{listing.description}\n{listing.condition}"


def normalize(vector: np.ndarray) -> np.ndarray:
    vec = np.asarray(vector, dtype=np.float64)
    if vec.ndim != 1:
        raise ValidationError("embedding must be a 1-d vector")
    if not np.all(np.isfinite(vec)):
        raise ValidationError("embedding has non-finite entries")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValidationError("zero vector cannot be normalized")
    return vec / norm


class HashingEmbedder:
    """Deterministic feature-hash embedder over word uni/bigrams.

    Same text yields the same vector on every run and platform (BLAKE2b is
    the hash, not Python's salted `hash`). Textual duplicates are therefore
    exact nearest neighbours, which is the property the pipeline needs.
    """

    kind = "deterministic-feature-hash"

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 2:
            raise ValidationError("dimension must be >= 2")
        self.dimension = dimension

    def embed_text(self, text: str) -> np.ndarray:
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            raise ValidationError("cannot embed empty text")
        grams = list(tokens)
        grams.extend(f"{a} {b}" for a, b in zip(tokens, tokens[1:]))
        vec = np.zeros(self.dimension, dtype=np.float64)
        for gram in grams:
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            h = int.from_bytes(digest, "big")
            sign = 1.0 if h & 1 == 0 else -1.0
            vec[(h >> 1) % self.dimension] += sign
        return normalize(vec)


class RemoteEmbedder:
    """Embeddings-endpoint client (OpenAI-compatible `/embeddings` schema)."""

    kind = "remote-endpoint"

    def __init__(self, base_url: str, model_id: str, dimension: int, *,
                 api_key: str | None = None, timeout_s: float = 30.0,
                 max_attempts: int = 3, transport=None):
        import httpx

        self.dimension = dimension
        self.model_id = model_id
        self.max_attempts = max_attempts
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=base_url, timeout=timeout_s,
                                    headers=headers, transport=transport)

    def embed_text(self, text: str) -> np.ndarray:
        import httpx

        last_exc: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._client.post("/embeddings", json={"model": self.model_id, "input": [text]})
            except httpx.TransportError as exc:
                last_exc = exc
                continue
            if resp.status_code >= 500:
                last_exc = RuntimeError(f"server error {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise TransportError(f"embedding endpoint returned {resp.status_code}",
                                     attempts=attempt, retryable=False)
            values = resp.json()["data"][0]["embedding"]
            if len(values) != self.dimension:
                raise ValidationError(
                    f"embedding dimension mismatch: endpoint returned {len(values)}, expected {self.dimension}")
            return normalize(np.asarray(values, dtype=np.float64))
        raise TransportError(f"embedding endpoint unreachable: {last_exc}",
                             attempts=self.max_attempts, retryable=True)


def embed(listing: Listing, provider: EmbeddingProvider) -> np.ndarray:
    """Embed one listing; the result is L2-normalized with `provider.dimension` entries."""
    text = listing_text(listing)
    if not text.strip():
        raise ValidationError(f"listing {listing.id!r} has empty text fields")
    vec = provider.embed_text(text)
    if vec.shape != (provider.dimension,):
        raise ValidationError(
            f"provider returned shape {vec.shape}, expected ({provider.dimension},)")
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > NORM_TOLERANCE:
        vec = normalize(vec)
    return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity a·b / (‖a‖‖b‖), in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine undefined for zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# --- snapshot -------------------------------------------------------------------


@dataclass(frozen=True)
class GraphParams:
    """Small-world graph shape: kNN out-degree, shortcut count, search beam."""

    out_degree: int = 32
    n_random_links: int = 16
    ef_search: int = 384
    n_entry_points: int = 24
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "out_degree": self.out_degree,
            "n_random_links": self.n_random_links,
            "ef_search": self.ef_search,
            "n_entry_points": self.n_entry_points,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraphParams":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class Hit:
    listing_id: str
    score: float
    price: float


@dataclass(frozen=True)
class RetrievalSet:
    query_id: str
    hits: tuple[Hit, ...]
    k: int

    def __post_init__(self):
        if len(self.hits) > self.k:
            raise ValidationError("retrieval set larger than k")
        scores = [h.score for h in self.hits]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValidationError("hits must be sorted by non-increasing score")

    def ids(self) -> list[str]:
        return [h.listing_id for h in self.hits]


@dataclass(frozen=True)
class IndexSnapshot:
    built_at: datetime
    ids: tuple[str, ...]
    vectors: np.ndarray          # (N, D) float64, rows L2-normalized
    prices: np.ndarray           # (N,) float64
    graph_params: GraphParams | None = None
    neighbors: tuple[np.ndarray, ...] | None = None  # adjacency, sorted int32 per node
    entry_points: np.ndarray | None = None

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("snapshot ids must be unique")
        if self.vectors.shape[0] != len(self.ids) or self.prices.shape[0] != len(self.ids):
            raise ValidationError("ids/vectors/prices length mismatch")
        norms = np.linalg.norm(self.vectors, axis=1)
        if self.vectors.size and not np.allclose(norms, 1.0, atol=NORM_TOLERANCE):
            raise ValidationError("snapshot vectors must be L2-normalized")
        self.vectors.setflags(write=False)
        self.prices.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]


def _knn_graph(vectors: np.ndarray, out_degree: int, chunk: int = 2048) -> np.ndarray:
    """Exact kNN edges per node via chunked matmul (float32 for speed)."""
    n = vectors.shape[0]
    m = min(out_degree, n - 1)
    v32 = vectors.astype(np.float32)
    nbrs = np.empty((n, m), dtype=np.int32)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        scores = v32[lo:hi] @ v32.T
        scores[np.arange(hi - lo), np.arange(lo, hi)] = -np.inf
        part = np.argpartition(-scores, m - 1, axis=1)[:, :m]
        rows = np.arange(hi - lo)[:, None]
        order = np.argsort(-scores[rows, part], axis=1, kind="stable")
        nbrs[lo:hi] = part[rows, order]
    return nbrs


def _build_graph(vectors: np.ndarray, params: GraphParams) -> tuple[tuple[np.ndarray, ...], np.ndarray]:
    n = vectors.shape[0]
    adjacency: list[set[int]] = [set() for _ in range(n)]
    if n > 1:
        knn = _knn_graph(vectors, params.out_degree)
        for i in range(n):
            for j in knn[i]:
                adjacency[i].add(int(j))
                adjacency[int(j)].add(i)
        rng = np.random.default_rng(params.seed)
        shortcuts = rng.integers(0, n, size=(n, params.n_random_links))
        for i in range(n):
            for j in shortcuts[i]:
                j = int(j)
                if j != i:
                    adjacency[i].add(j)
                    adjacency[j].add(i)
    neighbors = tuple(np.fromiter(sorted(s), dtype=np.int32) for s in adjacency)
    rng = np.random.default_rng(params.seed + 1)
    n_entry = min(params.n_entry_points, n)
    entry_points = np.sort(rng.choice(n, size=n_entry, replace=False)).astype(np.int32)
    return neighbors, entry_points


def build_index(pool: CandidatePool, provider: EmbeddingProvider,
                graph: GraphParams | None = None) -> IndexSnapshot:
    """Embed every pool listing and assemble an immutable snapshot.

    Provider failures abort the build and name the failed ids: a partially
    embedded pool would silently bias retrieval.
    """
    if not pool.listings:
        raise ValidationError("cannot build index from empty pool")
    vectors = np.empty((len(pool.listings), provider.dimension), dtype=np.float64)
    prices = np.empty(len(pool.listings), dtype=np.float64)
    failed: list[str] = []
    for row, listing in enumerate(pool.listings):
        try:
            vectors[row] = embed(listing, provider)
            prices[row] = listing.require_price()
        except (ValidationError, TransportError) as exc:
            logger.error("embedding failed for %s: %s", listing.id, exc)
            failed.append(listing.id)
    if failed:
        raise IndexBuildError("index build failed for listings", failed)
    ids = tuple(l.id for l in pool.listings)
    return snapshot_from_arrays(ids, vectors, prices, graph)


def snapshot_from_arrays(ids: tuple[str, ...], vectors: np.ndarray, prices: np.ndarray,
                         graph: GraphParams | None = None,
                         built_at: datetime | None = None) -> IndexSnapshot:
    neighbors = entry = None
    if graph is not None:
        neighbors, entry = _build_graph(vectors, graph)
    return IndexSnapshot(
        built_at=built_at or datetime.now(timezone.utc),
        ids=ids,
        vectors=np.ascontiguousarray(vectors, dtype=np.float64),
        prices=np.asarray(prices, dtype=np.float64),
        graph_params=graph,
        neighbors=neighbors,
        entry_points=entry,
    )


def _hits_from_rows(index: IndexSnapshot, rows: np.ndarray, scores: np.ndarray,
                    k: int, query_id: str) -> RetrievalSet:
    # sort by score desc, then ascending listing id for reproducible ties
    id_arr = np.array([index.ids[int(r)] for r in rows])
    order = np.lexsort((id_arr, -scores))
    chosen = order[:k]
    hits = tuple(
        Hit(listing_id=str(id_arr[i]), score=float(scores[i]), price=float(index.prices[int(rows[i])]))
        for i in chosen
    )
    return RetrievalSet(query_id=query_id, hits=hits, k=k)


def search_topk(index: IndexSnapshot, query: np.ndarray, k: int, *,
                query_id: str = "") -> RetrievalSet:
    """Exact top-k by full scan; ties broken by ascending listing id."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dimension,):
        raise ValidationError(f"query dimension {query.shape} != index dimension {index.dimension}")
    scores = index.vectors @ query
    rows = np.arange(len(index.ids))
    return _hits_from_rows(index, rows, scores, k, query_id)


def search_topk_ann(index: IndexSnapshot, query: np.ndarray, k: int, *,
                    ef_search: int | None = None, query_id: str = "") -> RetrievalSet:
    """Approximate top-k via beam search over the small-world graph.

    Deterministic for a fixed snapshot and parameters; scores are computed
    exactly, only candidate membership is approximate.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    if index.neighbors is None or index.entry_points is None or index.graph_params is None:
        raise ValidationError("index was built without graph parameters")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dimension,):
        raise ValidationError(f"query dimension {query.shape} != index dimension {index.dimension}")
    ef = max(ef_search or index.graph_params.ef_search, k)

    vectors = index.vectors
    neighbors = index.neighbors
    entries = [int(i) for i in index.entry_points]
    scores: dict[int, float] = {}
    entry_scores = vectors[entries] @ query
    for node, s in zip(entries, entry_scores):
        scores[node] = float(s)
    visited = set(entries)
    candidates = [(-scores[i], i) for i in sorted(visited)]
    heapq.heapify(candidates)
    best: list[tuple[float, int]] = [(scores[i], i) for i in sorted(visited)]
    heapq.heapify(best)
    while len(best) > ef:
        heapq.heappop(best)
    while candidates:
        neg, node = heapq.heappop(candidates)
        if len(best) == ef and -neg < best[0][0]:
            break
        fresh = [int(j) for j in neighbors[node] if int(j) not in visited]
        if not fresh:
            continue
        visited.update(fresh)
        fresh_scores = vectors[np.asarray(fresh, dtype=np.int64)] @ query
        for j, s in zip(fresh, fresh_scores):
            s = float(s)
            scores[j] = s
            if len(best) < ef or s > best[0][0]:
                heapq.heappush(candidates, (-s, j))
                heapq.heappush(best, (s, j))
                if len(best) > ef:
                    heapq.heappop(best)
    rows = np.asarray([i for _, i in best], dtype=np.int64)
    found_scores = np.asarray([s for s, _ in best], dtype=np.float64)
    return _hits_from_rows(index, rows, found_scores, k, query_id)


# --- persistence ----------------------------------------------------------------

def save_snapshot(index: IndexSnapshot, path: str | Path) -> None:
    """Persist a snapshot as .npz with a JSON header (dimension, count, built_at)."""
    meta = {
        "built_at": format_rfc3339(index.built_at),
        "dimension": index.dimension,
        "count": len(index.ids),
        "graph_params": index.graph_params.to_dict() if index.graph_params else None,
    }
    arrays: dict[str, np.ndarray] = {
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
        "ids": np.array(index.ids, dtype=np.str_),
        "vectors": np.asarray(index.vectors),
        "prices": np.asarray(index.prices),
    }
    if index.neighbors is not None:
        flat = np.concatenate([n for n in index.neighbors]) if index.neighbors else np.empty(0, np.int32)
        offsets = np.cumsum([0] + [len(n) for n in index.neighbors]).astype(np.int64)
        arrays["adj_flat"] = flat
        arrays["adj_offsets"] = offsets
        arrays["entry_points"] = index.entry_points
    np.savez_compressed(path, **arrays)


def load_snapshot(path: str | Path) -> IndexSnapshot:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        ids = tuple(str(i) for i in data["ids"])
        vectors = np.array(data["vectors"], dtype=np.float64)
        prices = np.array(data["prices"], dtype=np.float64)
        neighbors = entry = params = None
        if "adj_flat" in data:
            flat = data["adj_flat"]
            offsets = data["adj_offsets"]
            neighbors = tuple(
                np.array(flat[offsets[i]:offsets[i + 1]], dtype=np.int32)
                for i in range(len(offsets) - 1)
            )
            entry = np.array(data["entry_points"], dtype=np.int32)
            params = GraphParams.from_dict(meta["graph_params"])
    return IndexSnapshot(
        built_at=parse_rfc3339(meta["built_at"]),
        ids=ids,
        vectors=vectors,
        prices=prices,
        graph_params=params,
        neighbors=neighbors,
        entry_points=entry,
    )


# --- refresh --------------------------------------------------------------------


class SnapshotHolder:
    """Atomic handoff point between one index writer and many readers."""

    def __init__(self, snapshot: IndexSnapshot | None = None):
        self._lock = threading.Lock()
        self._snapshot = snapshot

    @property
    def current(self) -> IndexSnapshot | None:
        with self._lock:
            return self._snapshot

    def swap(self, snapshot: IndexSnapshot) -> IndexSnapshot | None:
        """Install a new snapshot; returns the one it replaced."""
        with self._lock:
            old, self._snapshot = self._snapshot, snapshot
            return old


class IndexRefresher:
    """Background rebuild on a fixed cadence (default hourly), then atomic swap."""

    def __init__(self, holder: SnapshotHolder, rebuild: Callable[[], IndexSnapshot],
                 interval_s: float = 3600.0):
        self.holder = holder
        self.rebuild = rebuild
        self.interval_s = interval_s
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def refresh_once(self) -> IndexSnapshot:
        snapshot = self.rebuild()
        self.holder.swap(snapshot)
        return snapshot

    def start(self) -> None:
        def loop():
            while not self._stop.wait(self.interval_s):
                try:
                    self.refresh_once()
                except Exception:  # keep refreshing on next tick
                    logger.exception("index refresh failed; serving previous snapshot")

        self._thread = threading.Thread(target=loop, name="index-refresher", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
