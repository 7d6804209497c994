"""Cluster-diversified nearest-neighbour retrieval.

Item embeddings are partitioned with k-means. A query probes its ``M``
nearest centroids (by the temperature-scaled affinity), splits the result
budget ``N`` across them with a softmax over those affinities (rounded up),
and runs an exact search inside each probed cluster.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError

INDEX_MAGIC = b"ECIX1"
_HEADER = struct.Struct("<IIdQq")  # K, D, tau, item count, built_at


@dataclass
class RetrievalConfig:
    N: int = 12
    M: int = 10
    K: int | None = None  # None: about one cluster per ten items

    def validate(self, n_clusters: int | None = None) -> None:
        if self.N < 1:
            raise ConfigError("N", "must be >= 1")
        if self.M < 1:
            raise ConfigError("M", "must be >= 1")
        k = n_clusters if n_clusters is not None else self.K
        if k is not None and self.M > k:
            raise ConfigError("M", f"cannot probe {self.M} clusters out of {k}")

    def cluster_count(self, n_items: int) -> int:
        return self.K if self.K is not None else max(1, round(n_items / 10))


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia_history: list[float]
    iterations: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _means(x: np.ndarray, assign: np.ndarray, K: int, old: np.ndarray) -> np.ndarray:
    counts = np.bincount(assign, minlength=K)
    sums = np.zeros((K, x.shape[1]))
    np.add.at(sums, assign, x)
    out = old.copy()
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out


def kmeans_fit(embeddings, K: int, max_iters: int = 50, seed: int = 0) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations until the assignment stops changing."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if K < 1 or K > n:
        raise ConfigError("K", f"need 1 <= K <= number of points ({n}), got {K}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((K, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centroids[:1])[:, 0]
    for k in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centroids[k] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centroids[k:k + 1])[:, 0])

    assign = np.full(n, -1)
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        new_assign = d.argmin(axis=1)
        new_assign = _repair_empty(x, new_assign, K, d)
        changed = not np.array_equal(new_assign, assign)
        assign = new_assign
        centroids = _means(x, assign, K, centroids)
        history.append(float(((x - centroids[assign]) ** 2).sum()))
        if not changed:
            break
    return KMeansResult(centroids, assign, history, it)


def _repair_empty(x, assign, K, d):
    """Give each empty cluster the member of the largest cluster farthest from its centroid."""
    counts = np.bincount(assign, minlength=K)
    for k in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        members = np.flatnonzero(assign == big)
        far = members[int(np.argmax(d[members, big]))]
        assign[far] = k
        counts[big] -= 1
        counts[k] += 1
    return assign


def allocate_budget(centroid_affinities, N: int, tol: float = 1e-9) -> list[int]:
    """``m_i = ceil(softmax(affinities)_i * N)``.

    Values within ``tol`` of an integer are treated as that integer, so that
    exact shares such as 0.3 * 10 are not pushed up by rounding noise. The sum
    is always at least ``N``.
    """
    g = np.asarray(centroid_affinities, dtype=np.float64)
    if g.size < 1 or N < 1:
        raise ValueError("need at least one cluster and N >= 1")
    w = np.exp(g - g.max())
    w /= w.sum()
    raw = w * N
    m = [int(math.ceil(r - tol * max(1.0, r))) for r in raw]
    m = [max(v, 1 if r > 0 else 0) for v, r in zip(m, raw)]
    order = np.argsort(-w, kind="stable")
    j = 0
    while sum(m) < N:
        m[int(order[j % len(order)])] += 1
        j += 1
    return m


@dataclass
class ClusteredIndex:
    centroids: np.ndarray              # (K, D) float32, unnormalized member means
    member_ids: list[list[str]]
    member_embs: list[np.ndarray]      # per cluster (n_k, D) float32
    tau: float
    built_at: int = 0
    _keys: list[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        all_ids = [i for ids in self.member_ids for i in ids]
        order = {iid: k for k, iid in enumerate(sorted(all_ids))}
        self._keys = [np.array([order[i] for i in ids], dtype=np.int64) for ids in self.member_ids]

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __len__(self) -> int:
        return sum(len(ids) for ids in self.member_ids)

    def item_ids(self) -> set[str]:
        return {i for ids in self.member_ids for i in ids}

    def cluster_of(self) -> dict[str, int]:
        return {i: k for k, ids in enumerate(self.member_ids) for i in ids}


def build_index(ids: Sequence[str], embs, K: int, tau: float, seed: int = 0, max_iters: int = 50,
                built_at: int = 0) -> ClusteredIndex:
    embs = np.asarray(embs, dtype=np.float32)
    fit = kmeans_fit(embs, K, max_iters, seed)
    member_ids, member_embs, cents = [], [], []
    for k in range(K):
        rows = np.flatnonzero(fit.assignments == k)
        member_ids.append([ids[r] for r in rows])
        member_embs.append(embs[rows])
        cents.append(embs[rows].astype(np.float64).mean(axis=0))
    return ClusteredIndex(np.asarray(cents, dtype=np.float32), member_ids, member_embs, float(tau), built_at)


@dataclass
class RetrievalResult:
    items: list[tuple[str, float]]
    clusters: list[int]
    budget: list[int]
    probed: list[int]
    shortfall: bool = False

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.items]


def _dots(embs, u) -> np.ndarray:
    # row-wise float64 reduction: a row's score does not depend on its neighbours
    return (np.asarray(embs, dtype=np.float64) * np.asarray(u, dtype=np.float64)).sum(axis=-1)


def _top(scores: np.ndarray, keys: np.ndarray, m: int) -> np.ndarray:
    order = np.lexsort((keys, -scores))
    return order[:m]


def retrieve(index: ClusteredIndex, user_emb, cfg: RetrievalConfig) -> RetrievalResult:
    """Top-``N`` items spread over the ``M`` clusters nearest to ``user_emb``.

    When the rounded-up budgets exceed ``N``, the lowest-scoring items are
    dropped first, but never a probed cluster's last remaining item.
    """
    cfg.validate(index.K)
    if len(index) == 0:
        raise ValueError("index is empty")
    aff = _dots(index.centroids, user_emb) / index.tau
    probed = [int(k) for k in np.lexsort((np.arange(index.K), -aff))[:cfg.M]]
    budget = allocate_budget(aff[probed], cfg.N)
    found: list[tuple[float, str, int]] = []
    for k, m in zip(probed, budget):
        scores = _dots(index.member_embs[k], user_emb)
        for r in _top(scores, index._keys[k], m):
            found.append((float(scores[r]), index.member_ids[k][r], k))
    shortfall = len(found) < cfg.N
    found.sort(key=lambda t: (-t[0], t[1]))
    excess = len(found) - cfg.N
    if excess > 0:
        remaining = {}
        for _, _, k in found:
            remaining[k] = remaining.get(k, 0) + 1
        drop = set()
        for pos in range(len(found) - 1, -1, -1):
            if excess == 0:
                break
            k = found[pos][2]
            if remaining[k] > 1:
                remaining[k] -= 1
                drop.add(pos)
                excess -= 1
        # more probed clusters than N: fall back to plain truncation
        found = [f for p, f in enumerate(found) if p not in drop][:cfg.N]
    return RetrievalResult(
        items=[(iid, float(np.float32(s))) for s, iid, _ in found],
        clusters=[k for _, _, k in found], budget=budget, probed=probed, shortfall=shortfall,
    )


def exhaustive_knn(ids: Sequence[str], embs, user_emb, N: int) -> list[tuple[str, float]]:
    """Full scan, same ordering and score rounding as :func:`retrieve`."""
    scores = _dots(embs, user_emb)
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))[:N]
    return [(ids[i], float(np.float32(scores[i]))) for i in order]


# ---------------------------------------------------------------------------
# persistence

def save_index(index: ClusteredIndex, path) -> None:
    out = bytearray(INDEX_MAGIC)
    out += _HEADER.pack(index.K, index.dim, index.tau, len(index), index.built_at)
    out += np.ascontiguousarray(index.centroids, dtype="<f4").tobytes()
    for ids, embs in zip(index.member_ids, index.member_embs):
        out += struct.pack("<I", len(ids))
        for iid, row in zip(ids, np.asarray(embs, dtype="<f4")):
            b = iid.encode("utf-8")
            out += struct.pack("<H", len(b)) + b + row.tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"truncated index file while reading {what}", offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_index(path, centroid_tol: float = 1e-4) -> ClusteredIndex:
    buf = Path(path).read_bytes()
    if not buf.startswith(INDEX_MAGIC):
        raise FormatError(f"{path}: not an ECIX1 index file")
    r = _Reader(buf, len(INDEX_MAGIC))
    K, D, tau, count, built_at = _HEADER.unpack(r.take(_HEADER.size, "header"))
    cents = np.frombuffer(r.take(4 * K * D, "centroids"), dtype="<f4").reshape(K, D).astype(np.float32)
    member_ids, member_embs = [], []
    for k in range(K):
        (n,) = struct.unpack("<I", r.take(4, f"cluster {k} size"))
        ids, rows = [], np.empty((n, D), dtype=np.float32)
        for j in range(n):
            (ln,) = struct.unpack("<H", r.take(2, "id length"))
            ids.append(r.take(ln, "id").decode("utf-8"))
            rows[j] = np.frombuffer(r.take(4 * D, "embedding"), dtype="<f4")
        member_ids.append(ids)
        member_embs.append(rows)
    if r.pos != len(buf):
        raise IntegrityError("trailing bytes after last cluster", offset=r.pos)
    total = sum(len(i) for i in member_ids)
    if total != count:
        raise IntegrityError(f"header says {count} items, clusters hold {total}")
    for k, rows in enumerate(member_embs):
        if len(rows) and np.max(np.abs(rows.astype(np.float64).mean(0) - cents[k])) > centroid_tol:
            raise IntegrityError(f"centroid {k} is not the mean of its members")
    return ClusteredIndex(cents, member_ids, member_embs, tau, built_at)
