"""Scale-bucketed approximate nearest-neighbour search.

Each scale bucket gets its own forest of randomized kd-trees.  A split picks
one of the five highest-variance dimensions (estimated on a sample of at most
100 points) at random and cuts at the sample mean.  Queries run best-bin-first
over all trees with a shared priority queue and stop after ``checks`` leaves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

N_BUCKETS = 10
DEFAULT_CHECKS = 32
DEFAULT_TREES = 4
DEFAULT_LEAF_SIZE = 32
_SAMPLE = 100
_TOP_DIMS = 5


@dataclass(frozen=True)
class ScaleBuckets:
    """``N_BUCKETS`` scale ranges ``[edges[i], edges[i+1])``; out-of-range scales clamp."""

    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e.ndim != 1 or len(e) < 2:
            raise ValueError("need at least two edges")
        if np.any(np.diff(e) <= 0):
            raise ValueError("bucket edges must be strictly ascending")
        object.__setattr__(self, "edges", e)

    @property
    def n(self) -> int:
        return len(self.edges) - 1

    @classmethod
    def from_scales(cls, scales, n: int = N_BUCKETS) -> ScaleBuckets:
        """Equal-count edges from the quantiles of ``scales``."""
        s = np.asarray(scales, dtype=np.float64)
        if len(s) == 0:
            raise ValueError("no scales to place bucket edges")
        e = np.quantile(s, np.linspace(0.0, 1.0, n + 1))
        for i in range(1, len(e)):
            if e[i] <= e[i - 1]:
                e[i] = np.nextafter(e[i - 1], np.inf)
        return cls(e)

    def bucket_of(self, scale):
        return bucket_of(self, scale)

    def __eq__(self, other):
        return isinstance(other, ScaleBuckets) and np.array_equal(self.edges, other.edges)

    __hash__ = None


def bucket_of(buckets: ScaleBuckets, scale):
    """Bucket id of ``scale`` (scalar or array); an edge value belongs to the bucket it opens."""
    b = np.searchsorted(buckets.edges, scale, side="right") - 1
    b = np.clip(b, 0, buckets.n - 1)
    return int(b) if np.ndim(b) == 0 else b.astype(np.int64)


@numba.njit(cache=True)
def _build_forest(data, n_trees, leaf_size, seed):
    n, dim = data.shape
    max_nodes = 2 * n + 1
    split_dim = np.full((n_trees, max_nodes), -1, np.int32)
    split_val = np.zeros((n_trees, max_nodes), np.float32)
    child = np.zeros((n_trees, max_nodes, 2), np.int32)
    span = np.zeros((n_trees, max_nodes, 2), np.int32)
    perm = np.empty((n_trees, n), np.int32)
    n_nodes = np.zeros(n_trees, np.int32)
    np.random.seed(seed)
    stack = np.empty((max_nodes, 3), np.int64)
    mean = np.empty(dim)
    var = np.empty(dim)
    sample = np.empty(_SAMPLE, np.int64)
    for t in range(n_trees):
        for i in range(n):
            perm[t, i] = i
        count = 1
        top = 0
        stack[0, 0], stack[0, 1], stack[0, 2] = 0, 0, n
        top = 1
        while top > 0:
            top -= 1
            node, s, e = stack[top, 0], stack[top, 1], stack[top, 2]
            span[t, node, 0], span[t, node, 1] = s, e
            cnt = e - s
            if cnt <= leaf_size:
                continue
            m = min(cnt, _SAMPLE)
            for j in range(m):
                sample[j] = perm[t, s + np.random.randint(cnt)] if cnt > _SAMPLE else perm[t, s + j]
            mean[:] = 0.0
            var[:] = 0.0
            for j in range(m):
                for d in range(dim):
                    mean[d] += data[sample[j], d]
            mean /= m
            for j in range(m):
                for d in range(dim):
                    diff = data[sample[j], d] - mean[d]
                    var[d] += diff * diff
            order = np.argsort(var)
            ntop = min(_TOP_DIMS, dim)
            while ntop > 1 and var[order[dim - ntop]] <= 0.0:
                ntop -= 1
            sd = order[dim - 1 - np.random.randint(ntop)]
            if var[sd] <= 0.0:
                sd = order[dim - 1]
            sv = mean[sd]
            # Partition perm[s:e] on data[:, sd] < sv.
            i, j = s, e - 1
            while i <= j:
                if data[perm[t, i], sd] < sv:
                    i += 1
                else:
                    tmp = perm[t, i]
                    perm[t, i] = perm[t, j]
                    perm[t, j] = tmp
                    j -= 1
            mid = i
            if mid == s or mid == e:
                vals = np.empty(cnt, np.float32)
                for k in range(cnt):
                    vals[k] = data[perm[t, s + k], sd]
                o = np.argsort(vals, kind="mergesort")
                seg = perm[t, s:e].copy()
                for k in range(cnt):
                    perm[t, s + k] = seg[o[k]]
                mid = s + cnt // 2
                lo = data[perm[t, mid - 1], sd]
                hi = data[perm[t, mid], sd]
                if lo == hi:
                    # Every value along the widest dimension is equal: the
                    # remaining points are duplicates, keep them in one leaf.
                    all_same = True
                    for k in range(s, e):
                        for d in range(dim):
                            if data[perm[t, k], d] != data[perm[t, s], d]:
                                all_same = False
                                break
                        if not all_same:
                            break
                    if all_same:
                        continue
                sv = np.float32(0.5 * (lo + hi))
                if sv <= lo:
                    sv = hi
                # Re-split so the test matches the stored threshold.
                i = s
                for k in range(s, e):
                    if data[perm[t, k], sd] < sv:
                        i += 1
                mid = i
                if mid == s or mid == e:
                    continue
            split_dim[t, node] = sd
            split_val[t, node] = sv
            left, right = count, count + 1
            count += 2
            child[t, node, 0], child[t, node, 1] = left, right
            stack[top, 0], stack[top, 1], stack[top, 2] = right, mid, e
            top += 1
            stack[top, 0], stack[top, 1], stack[top, 2] = left, s, mid
            top += 1
        n_nodes[t] = count
    return split_dim, split_val, child, span, perm, n_nodes


@numba.njit(cache=True, inline="always")
def _heap_push(hd, ht, hn, size, d, t, node):
    i = size
    hd[i], ht[i], hn[i] = d, t, node
    while i > 0:
        parent = (i - 1) >> 1
        if hd[parent] <= hd[i]:
            break
        hd[parent], hd[i] = hd[i], hd[parent]
        ht[parent], ht[i] = ht[i], ht[parent]
        hn[parent], hn[i] = hn[i], hn[parent]
        i = parent
    return size + 1


@numba.njit(cache=True, inline="always")
def _heap_pop(hd, ht, hn, size):
    d, t, node = hd[0], ht[0], hn[0]
    size -= 1
    hd[0], ht[0], hn[0] = hd[size], ht[size], hn[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        m = i
        if l < size and hd[l] < hd[m]:
            m = l
        if r < size and hd[r] < hd[m]:
            m = r
        if m == i:
            break
        hd[m], hd[i] = hd[i], hd[m]
        ht[m], ht[i] = ht[i], ht[m]
        hn[m], hn[i] = hn[i], hn[m]
        i = m
    return d, t, node, size


@numba.njit(cache=True, inline="always")
def _insert_best(bd, bi, m, dist, p):
    """Insert ``(dist, p)`` into the ascending length-``m`` lists if it qualifies."""
    if dist > bd[m - 1] or (dist == bd[m - 1] and p >= bi[m - 1]):
        return
    k = m - 1
    while k > 0 and (bd[k - 1] > dist or (bd[k - 1] == dist and bi[k - 1] > p)):
        bd[k] = bd[k - 1]
        bi[k] = bi[k - 1]
        k -= 1
    bd[k] = dist
    bi[k] = p


@numba.njit(cache=True)
def _search_forest(data, split_dim, split_val, child, span, perm, queries, max_checks, out_idx, out_dist):
    n, dim = data.shape
    m = out_idx.shape[1]
    n_trees = split_dim.shape[0]
    cap = 64 * (max_checks + n_trees) + 64
    hd = np.empty(cap)
    ht = np.empty(cap, np.int32)
    hn = np.empty(cap, np.int32)
    seen = np.full(n, -1, np.int64)
    bd = np.empty(m)
    bi = np.empty(m, np.int64)
    for qi in range(queries.shape[0]):
        q = queries[qi]
        size = 0
        bd[:] = np.inf
        bi[:] = -1
        checks = 0
        t = 0
        node = 0
        mind = 0.0
        started = 0
        while True:
            if started < n_trees:
                t, node, mind = started, 0, 0.0
                started += 1
            else:
                if size == 0 or checks >= max_checks:
                    break
                mind, t, node, size = _heap_pop(hd, ht, hn, size)
                if mind >= bd[m - 1]:
                    break
            while split_dim[t, node] >= 0:
                sd = split_dim[t, node]
                diff = q[sd] - split_val[t, node]
                if diff < 0:
                    near, far = child[t, node, 0], child[t, node, 1]
                else:
                    near, far = child[t, node, 1], child[t, node, 0]
                fd = mind + diff * diff
                if fd < bd[m - 1] and size < cap:
                    size = _heap_push(hd, ht, hn, size, fd, t, far)
                node = near
            checks += 1
            for k in range(span[t, node, 0], span[t, node, 1]):
                p = perm[t, k]
                if seen[p] == qi:
                    continue
                seen[p] = qi
                dist = 0.0
                for d in range(dim):
                    diff = q[d] - data[p, d]
                    dist += diff * diff
                _insert_best(bd, bi, m, dist, p)
        out_idx[qi, :] = bi
        out_dist[qi, :] = bd


@numba.njit(cache=True)
def _linear_scan(data, queries, out_idx, out_dist):
    n, dim = data.shape
    m = out_idx.shape[1]
    bd = np.empty(m)
    bi = np.empty(m, np.int64)
    for qi in range(queries.shape[0]):
        bd[:] = np.inf
        bi[:] = -1
        for p in range(n):
            dist = 0.0
            for d in range(dim):
                diff = queries[qi, d] - data[p, d]
                dist += diff * diff
            _insert_best(bd, bi, m, dist, p)
        out_idx[qi, :] = bi
        out_dist[qi, :] = bd


class KDForest:
    """Randomized kd-tree forest over the rows of ``data``."""

    def __init__(self, data, trees: int = DEFAULT_TREES, leaf_size: int = DEFAULT_LEAF_SIZE, seed: int = 0):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        if self.data.ndim != 2 or len(self.data) == 0:
            raise ValueError("KDForest needs a non-empty 2-d array")
        if trees < 1 or leaf_size < 1:
            raise ValueError("trees and leaf_size must be >= 1")
        self.trees = trees
        self.leaf_size = leaf_size
        self.seed = seed
        sd, sv, ch, sp, perm, nn = _build_forest(self.data, trees, leaf_size, seed)
        m = int(nn.max())
        self.split_dim, self.split_val = sd[:, :m].copy(), sv[:, :m].copy()
        self.child, self.span, self.perm = ch[:, :m].copy(), sp[:, :m].copy(), perm

    def __len__(self):
        return len(self.data)

    def query(self, queries, checks: int | None = DEFAULT_CHECKS, neighbors: int = 1):
        """Nearest row indices and squared distances per query.

        ``checks=None`` (or <= 0, or infinity) searches exhaustively.  With
        ``neighbors=1`` the results are 1-d; otherwise ``(n_queries, neighbors)``
        padded with ``-1`` / ``inf``.  Distance ties go to the lower index.
        """
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float32)
        if q.shape[1] != self.data.shape[1]:
            raise ValueError(f"query dim {q.shape[1]} != index dim {self.data.shape[1]}")
        if neighbors < 1:
            raise ValueError("neighbors must be >= 1")
        idx = np.empty((len(q), neighbors), np.int64)
        dist = np.empty((len(q), neighbors), np.float64)
        if _exhaustive(checks):
            _linear_scan(self.data, q, idx, dist)
        else:
            _search_forest(self.data, self.split_dim, self.split_val, self.child, self.span, self.perm,
                           q, int(checks), idx, dist)
        if neighbors == 1:
            return idx[:, 0], dist[:, 0]
        return idx, dist


def _exhaustive(checks) -> bool:
    return checks is None or checks <= 0 or checks == float("inf")


def linear_scan(data, queries, neighbors: int = 1):
    """Exact nearest neighbours by brute force (the reference for the forest)."""
    data = np.ascontiguousarray(data, dtype=np.float32)
    q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float32)
    idx = np.empty((len(q), neighbors), np.int64)
    dist = np.empty((len(q), neighbors), np.float64)
    _linear_scan(data, q, idx, dist)
    if neighbors == 1:
        return idx[:, 0], dist[:, 0]
    return idx, dist


class AnnIndex:
    """One :class:`KDForest` per scale bucket over database descriptors.

    Returned ids index the descriptor array the index was built from.
    """

    def __init__(self, descriptors, scales, buckets: ScaleBuckets, trees: int = DEFAULT_TREES,
                 leaf_size: int = DEFAULT_LEAF_SIZE, seed: int = 0):
        desc = np.ascontiguousarray(descriptors, dtype=np.float32)
        scales = np.asarray(scales, dtype=np.float64)
        if desc.ndim != 2 or len(desc) == 0:
            raise ValueError("index needs a non-empty (n, k) descriptor array")
        if len(scales) != len(desc):
            raise ValueError("one scale per descriptor required")
        self.dim = desc.shape[1]
        self.buckets = buckets
        self.bucket_ids = bucket_of(buckets, scales)
        self.members: list[np.ndarray] = []
        self.forests: list[KDForest | None] = []
        for b in range(buckets.n):
            ids = np.nonzero(self.bucket_ids == b)[0]
            self.members.append(ids)
            self.forests.append(KDForest(desc[ids], trees, leaf_size, seed + b) if len(ids) else None)

    @classmethod
    def build(cls, features, buckets: ScaleBuckets, trees: int = DEFAULT_TREES, **kw) -> AnnIndex:
        """Index a :class:`~texloc.core.WorldFeatures` set."""
        return cls(features.descriptors, features.scale, buckets, trees=trees, **kw)

    def bucket_sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members])

    def query(self, desc, scale: float, checks: int | None = DEFAULT_CHECKS) -> tuple[int, float]:
        """Nearest stored feature in the bucket of ``scale``; ``(-1, inf)`` if the bucket is empty."""
        ids, d = self.query_batch(np.atleast_2d(desc), np.array([scale]), checks)
        return int(ids[0]), float(d[0])

    def query_batch(self, descs, scales, checks: int | None = DEFAULT_CHECKS, neighbors: int = 1):
        """Vectorised :meth:`query`; ``neighbors > 1`` gives ``(n, neighbors)`` arrays."""
        descs = np.ascontiguousarray(np.atleast_2d(descs), dtype=np.float32)
        if descs.shape[1] != self.dim:
            raise ValueError(f"descriptor dim {descs.shape[1]} != index dim {self.dim}")
        b = np.atleast_1d(bucket_of(self.buckets, np.asarray(scales, dtype=np.float64)))
        ids = np.full((len(descs), neighbors), -1, np.int64)
        dist = np.full((len(descs), neighbors), np.inf)
        for bucket in np.unique(b):
            forest = self.forests[bucket]
            if forest is None:
                continue
            sel = np.nonzero(b == bucket)[0]
            local, d = forest.query(descs[sel], checks, neighbors=neighbors)
            local, d = local.reshape(len(sel), neighbors), d.reshape(len(sel), neighbors)
            found = local >= 0
            ids[sel] = np.where(found, self.members[bucket][np.where(found, local, 0)], -1)
            dist[sel] = d
        if neighbors == 1:
            return ids[:, 0], dist[:, 0]
        return ids, dist
