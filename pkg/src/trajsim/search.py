"""Embedding store, exact L1 kNN, and an inverted-file (IVF) index.

Binary embedding file layout (all little-endian)::

    b"TSEMB\\0" | u16 version | u64 count | u32 dim
    count x (u32 byte length, utf-8 id)
    count * dim float32, row-major

The same layout stores the cell embedding table (ids are ``"col,row"``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

EMB_MAGIC = b"TSEMB\0"
IVF_MAGIC = b"TSIVF\0"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class EmbeddingStore:
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.ids) != len(self.vectors):
            raise ValueError(f"{len(self.ids)} ids for vectors of shape {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


class KnnResult(list):
    """``[(id, distance), ...]`` ascending.

    ``clamped`` is set when k reached the store size (the whole store is
    returned) or when the probed IVF lists held fewer than k candidates.
    """

    def __init__(self, items=(), clamped: bool = False):
        super().__init__(items)
        self.clamped = clamped


def _l1_to(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.abs(vectors.astype(np.float64) - q.astype(np.float64)).sum(axis=1)


def _rank(ids: Sequence[str], dist: np.ndarray, k: int) -> KnnResult:
    keys = np.array(ids)
    order = np.lexsort((keys, dist))
    clamped = k >= len(order)
    return KnnResult([(str(keys[i]), float(dist[i])) for i in order[:k]], clamped)


def knn_flat(store: EmbeddingStore, query: np.ndarray, k: int) -> KnnResult:
    """Exact top-k by L1 distance; ties go to the smaller id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(store) == 0:
        raise ValueError("empty store")
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != store.dim:
        raise ValueError(f"query dim {q.shape[0]} != store dim {store.dim}")
    return _rank(store.ids, _l1_to(store.vectors, q), k)


# ------------------------------------------------------------------ IVF


@dataclass
class IvfIndex:
    centroids: np.ndarray
    lists: list[np.ndarray]
    nprobe: int = 1

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        self.lists = [np.asarray(l, dtype=np.int64) for l in self.lists]
        if not 1 <= self.nprobe <= len(self.centroids):
            raise ValueError(f"nprobe must lie in [1, {len(self.centroids)}]")

    @property
    def n_lists(self) -> int:
        return len(self.centroids)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    c = c.astype(np.float64)
    return (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]


def kmeans(x: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm on L2 with k-means++ seeding; returns (centroids, labels)."""
    n = len(x)
    x64 = x.astype(np.float64)
    first = int(rng.integers(n))
    centers = [x64[first]]
    d2 = ((x64 - x64[first]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            pick = int(rng.integers(n))
        else:
            pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centers.append(x64[pick])
        d2 = np.minimum(d2, ((x64 - x64[pick]) ** 2).sum(1))
    c = np.array(centers)
    labels = np.argmin(_sq_dists(x64, c), axis=1)
    for _ in range(iters):
        new = c.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x64[members].mean(axis=0)
        c = new
        new_labels = np.argmin(_sq_dists(x64, c), axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return c.astype(np.float32), labels


def default_n_lists(count: int) -> int:
    return max(1, math.ceil(math.sqrt(count)))


def build_ivf(store: EmbeddingStore, k_c: int | None = None, kmeans_iters: int = 20,
              rng: np.random.Generator | None = None, nprobe: int | None = None) -> IvfIndex:
    k_c = default_n_lists(len(store)) if k_c is None else k_c
    if k_c < 1:
        raise ValueError("k_c must be at least 1")
    if k_c > len(store):
        raise ValueError(f"k_c={k_c} exceeds the {len(store)} stored vectors")
    rng = rng if rng is not None else np.random.default_rng(0)
    centroids, _ = kmeans(store.vectors, k_c, kmeans_iters, rng)
    # final assignment against the stored float32 centroids
    labels = np.argmin(_sq_dists(store.vectors, centroids), axis=1)
    lists = [np.flatnonzero(labels == j) for j in range(k_c)]
    nprobe = max(1, math.ceil(k_c / 16)) if nprobe is None else nprobe
    return IvfIndex(centroids, lists, nprobe)


def knn_ivf(index: IvfIndex, store: EmbeddingStore, query: np.ndarray, k: int,
            nprobe: int | None = None) -> KnnResult:
    """Probe the ``nprobe`` nearest coarse cells, then rank candidates by exact L1."""
    if k < 1:
        raise ValueError("k must be at least 1")
    nprobe = index.nprobe if nprobe is None else nprobe
    if not 1 <= nprobe <= index.n_lists:
        raise ValueError(f"nprobe must lie in [1, {index.n_lists}]")
    q = np.asarray(query, dtype=np.float32).reshape(1, -1)
    cd = _sq_dists(q, index.centroids)[0]
    probe = np.lexsort((np.arange(index.n_lists), cd))[:nprobe]
    cand = np.concatenate([index.lists[j] for j in probe]) if len(probe) else np.empty(0, np.int64)
    if cand.size == 0:
        return KnnResult([], clamped=True)
    ids = [store.ids[i] for i in cand]
    res = _rank(ids, _l1_to(store.vectors[cand], q[0]), k)
    res.clamped = k >= len(store) or len(res) < k
    return res


# ---------------------------------------------------------- serialization


def write_embeddings(path: str | Path, ids: Sequence[str], vectors: np.ndarray) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or len(ids) != len(vectors):
        raise ValueError("ids/vectors mismatch")
    buf = bytearray()
    buf += EMB_MAGIC + struct.pack("<HQI", FORMAT_VERSION, len(ids), vectors.shape[1])
    for i in ids:
        b = str(i).encode("utf-8")
        buf += struct.pack("<I", len(b)) + b
    buf += vectors.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(EMB_MAGIC):
        raise FormatError(f"{path}: not an embedding file")
    off = len(EMB_MAGIC)
    version, count, dim = struct.unpack_from("<HQI", data, off)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported embedding file version {version}")
    off += struct.calcsize("<HQI")
    ids = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        ids.append(data[off:off + n].decode("utf-8"))
        off += n
    need = count * dim * 4
    if len(data) - off != need:
        raise FormatError(f"{path}: expected {need} vector bytes, found {len(data) - off}")
    vecs = np.frombuffer(data, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    return ids, vecs.astype(np.float32)


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    write_embeddings(path, store.ids, store.vectors)


def load_store(path: str | Path) -> EmbeddingStore:
    return EmbeddingStore(*read_embeddings(path))


def save_ivf(index: IvfIndex, path: str | Path) -> None:
    c = np.ascontiguousarray(index.centroids, dtype="<f4")
    buf = bytearray(IVF_MAGIC + struct.pack("<HIII", FORMAT_VERSION, c.shape[0], c.shape[1], index.nprobe))
    buf += c.tobytes()
    for lst in index.lists:
        buf += struct.pack("<Q", len(lst)) + np.asarray(lst, dtype="<i8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_ivf(path: str | Path) -> IvfIndex:
    data = Path(path).read_bytes()
    if not data.startswith(IVF_MAGIC):
        raise FormatError(f"{path}: not an IVF index file")
    off = len(IVF_MAGIC)
    version, k, d, nprobe = struct.unpack_from("<HIII", data, off)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported IVF version {version}")
    off += struct.calcsize("<HIII")
    c = np.frombuffer(data, dtype="<f4", count=k * d, offset=off).reshape(k, d).astype(np.float32)
    off += k * d * 4
    lists = []
    for _ in range(k):
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        lists.append(np.frombuffer(data, dtype="<i8", count=n, offset=off).astype(np.int64))
        off += 8 * n
    return IvfIndex(c, lists, nprobe)
