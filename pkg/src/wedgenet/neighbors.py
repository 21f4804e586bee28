"""Neighbor selection over 3-d point clouds.

Two graph construction rules feed the network:

  * ``sparse_edge_neighbors`` finds each point's ``pool`` nearest
    neighbors and keeps a random ``k`` of them.
  * ``min_distance_neighbors`` restricts the candidate pool to points at
    least ``min_dist[i]`` away before the same random selection, which
    widens the receptive field on the second layer.

All distance comparisons use exact float64 distances recomputed from the
coordinates, so results are reproducible and independent of the search
structure. Ties are broken by lower point index. Nothing here ever
materializes an all-pairs distance matrix; lookups go through a
space-partitioning tree, with per-row expansion for the rare points whose
distance bound digs deep into the cloud.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, InputError

__all__ = [
    "NeighborGraph",
    "SpatialIndex",
    "brute_force_neighbors",
    "sparse_edge_neighbors",
    "min_distance_neighbors",
    "dump_neighbor_graph",
]

logger = logging.getLogger(__name__)

_U64 = np.uint64

# keep query temporaries around this many elements per block
_BLOCK_ELEMENTS = 500_000


@dataclass
class NeighborGraph:
    """Directed k-neighbor graph: row i lists the selected neighbors of i."""

    neighbors: np.ndarray  # (N, k) int64, sorted by (distance, index) per row
    mean_dist: np.ndarray  # (N,) float64 mean distance to the selected neighbors
    k: int
    candidate_pool: int
    fallback_count: int = 0

    @property
    def n(self):
        return self.neighbors.shape[0]

    def validate(self, points=None, min_dist=None):
        """Structural checks used by tests; raises AssertionError on violation."""
        n, k = self.neighbors.shape
        assert k == self.k
        assert self.mean_dist.shape == (n,)
        assert self.neighbors.min() >= 0 and self.neighbors.max() < n
        row_ids = np.arange(n)[:, None]
        assert not np.any(self.neighbors == row_ids), "self loop"
        for i in range(n):
            assert len(set(self.neighbors[i].tolist())) == k, f"duplicate neighbor in row {i}"
        if points is not None and min_dist is not None:
            pts = np.asarray(points, dtype=np.float64)
            d = np.sqrt(
                ((pts[self.neighbors] - pts[:, None, :]) ** 2).sum(axis=2)
            )
            ok = d >= np.asarray(min_dist, dtype=np.float64)[:, None]
            # rows that fell back to the farthest points may violate the bound
            bad = int((~ok.all(axis=1)).sum())
            assert bad <= self.fallback_count, (
                f"{bad} rows violate the distance bound but only "
                f"{self.fallback_count} fallbacks were recorded"
            )


class SpatialIndex:
    """Exact nearest-neighbor queries with deterministic ordering.

    Results are sorted by (distance, index) ascending and never include
    the query point itself. An internal cache of sorted neighbor rows is
    grown on demand (up to a width cap) and reused across queries, which
    makes repeated lookups over the same cloud cheap during training.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise InputError(f"expected a nonempty (N, 3) array, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise InputError("points contain non-finite coordinates")
        self.points = pts
        self._pts64 = pts.astype(np.float64)
        self._tree = cKDTree(self._pts64)
        self._cache_idx = None   # (N, width) int64
        self._cache_dist = None  # (N, width) float64
        self._width = 0

    @property
    def n(self):
        return self.points.shape[0]

    def precompute(self, width):
        """Fill the row cache up to ``width`` neighbors per point."""
        self._ensure_width(width)

    def knn(self, k):
        """The k nearest neighbors of every point (indices, distances)."""
        k = int(k)
        if k < 1:
            raise InputError(f"k must be positive, got {k}")
        if k > self.n - 1:
            raise InputError(f"k={k} exceeds the {self.n - 1} available neighbors")
        self._ensure_width(k)
        return self._cache_idx[:, :k].copy(), self._cache_dist[:, :k].copy()

    def qualifying_pool(self, min_dist, pool):
        """Nearest ``pool`` neighbors of each point at distance >= min_dist[i].

        Returns ``(idx, dist, avail)`` where rows are padded past
        ``avail[i]`` with index -1 and distance +inf. ``avail[i]`` is the
        number of qualifying candidates found for point i, capped at
        ``pool`` except when fewer exist in the whole cloud.
        """
        md = np.asarray(min_dist, dtype=np.float64)
        if md.shape != (self.n,):
            raise InputError(f"min_dist must have shape ({self.n},), got {md.shape}")
        if not np.isfinite(md).all() or (md < 0).any():
            raise InputError("min_dist must be finite and non-negative")
        pool = int(pool)
        limit = self.n - 1
        cap = min(limit, max(4 * pool, 256))
        self._ensure_width(min(2 * pool, limit))
        while True:
            width = self._width
            starts = (self._cache_dist < md[:, None]).sum(axis=1)
            short = (width - starts < pool) & (width < limit)
            if not short.any() or width >= cap:
                break
            self._ensure_width(min(max(2 * width, int(starts.max()) + pool), cap))

        width = self._width
        avail = np.minimum(limit - starts, pool)
        cols = starts[:, None] + np.arange(pool)[None, :]
        valid = cols < np.minimum(starts + avail, width)[:, None]
        cols = np.minimum(cols, width - 1)
        idx = np.where(valid, np.take_along_axis(self._cache_idx, cols, axis=1), -1)
        dist = np.where(
            valid, np.take_along_axis(self._cache_dist, cols, axis=1), np.inf
        )
        # points whose bound digs past the cache are resolved one by one,
        # keeping memory independent of how deep they go
        deep = np.flatnonzero((width - starts < pool) & (width < limit))
        for i in deep:
            idx[i], dist[i], avail[i] = self._row_qualifying(int(i), md[i], pool)
        return idx, dist, avail.astype(np.int64)

    def _row_qualifying(self, i, bound, pool):
        limit = self.n - 1
        m = min(max(4 * pool, 2 * self._width), limit)
        while True:
            ii, dd = self._sorted_query(np.array([i]), m)
            start = int((dd[0] < bound).sum())
            if m - start >= pool or m == limit:
                break
            m = min(2 * m, limit)
        avail = min(limit - start, pool)
        row_i = np.full(pool, -1, dtype=np.int64)
        row_d = np.full(pool, np.inf)
        row_i[:avail] = ii[0, start:start + avail]
        row_d[:avail] = dd[0, start:start + avail]
        return row_i, row_d, avail

    def farthest(self, rows, k):
        """The k farthest neighbors for the given rows (boundary ties go to
        the lower index). Used as a fallback when a distance bound leaves
        too few candidates."""
        rows = np.asarray(rows, dtype=np.int64)
        full_i, full_d = self._sorted_query(rows, self.n - 1)
        out_idx = np.empty((len(rows), k), dtype=np.int64)
        out_dist = np.empty((len(rows), k), dtype=np.float64)
        for r in range(len(rows)):
            order = np.lexsort((full_i[r], -full_d[r]))[:k]
            keep = np.sort(order)  # back to (distance, index) ascending
            out_idx[r] = full_i[r][keep]
            out_dist[r] = full_d[r][keep]
        return out_idx, out_dist

    def _ensure_width(self, width):
        width = min(int(width), self.n - 1)
        if width <= self._width:
            return
        idx, dist = self._sorted_query(np.arange(self.n), width)
        self._cache_idx = idx
        self._cache_dist = dist
        self._width = width

    def _sorted_query(self, rows, width):
        """Exact sorted (distance, index) rows excluding self: (len(rows), width)."""
        rows = np.asarray(rows, dtype=np.int64)
        out_i = np.empty((len(rows), width), dtype=np.int64)
        out_d = np.empty((len(rows), width), dtype=np.float64)
        block = max(1, _BLOCK_ELEMENTS // max(width, 1))
        for s in range(0, len(rows), block):
            blk = rows[s:s + block]
            bi, bd = self._sorted_query_block(blk, width)
            out_i[s:s + len(blk)] = bi
            out_d[s:s + len(blk)] = bd
        return out_i, out_d

    def _sorted_query_block(self, rows, width):
        n = self.n
        pts = self._pts64[rows]
        m = min(width + 2, n)
        while True:
            raw_d, raw_i = self._tree.query(pts, k=m)
            if m == 1:  # scipy squeezes the k axis away
                raw_d = raw_d[:, None]
                raw_i = raw_i[:, None]
            raw_i = raw_i.astype(np.int64)
            # exact distances from the coordinates; the tree only proposes.
            # fixed (x, y, z) summation order keeps every code path
            # bit-identical to a plain all-pairs computation
            diff = self._pts64[raw_i] - pts[:, None, :]
            d64 = np.sqrt(
                diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
            )
            order = np.argsort(raw_i, axis=1, kind="stable")
            d64 = np.take_along_axis(d64, order, axis=1)
            idx = np.take_along_axis(raw_i, order, axis=1)
            order = np.argsort(d64, axis=1, kind="stable")
            d64 = np.take_along_axis(d64, order, axis=1)
            idx = np.take_along_axis(idx, order, axis=1)
            keep = idx != rows[:, None]
            kept_counts = keep.sum(axis=1)
            front = np.argsort(~keep, axis=1, kind="stable")
            d_front = np.take_along_axis(d64, front, axis=1)
            if m < n:
                # a row is settled when its width-th kept distance is
                # strictly inside the returned radius, so no unreturned
                # point can tie into the prefix
                enough = kept_counts >= width
                boundary_ok = np.zeros(len(rows), dtype=bool)
                if enough.any():
                    boundary_ok[enough] = (
                        d_front[enough, width - 1] < d64[enough, m - 1] * (1.0 - 1e-12)
                    )
                if not (enough & boundary_ok).all():
                    m = min(2 * m, n)
                    continue
            i_front = np.take_along_axis(idx, front, axis=1)
            return i_front[:, :width].copy(), d_front[:, :width].copy()


def brute_force_neighbors(points, k):
    """All-pairs oracle: k nearest neighbors by (distance, index), self excluded.

    Quadratic in the number of points; exists to cross-check the indexed
    path on small clouds.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k < 1 or k > n - 1:
        raise InputError(f"k={k} invalid for {n} points")
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2)
    np.fill_diagonal(d, np.inf)
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k), dtype=np.float64)
    cols = np.arange(n)
    for i in range(n):
        order = np.lexsort((cols, d[i]))[:k]
        idx[i] = order
        dist[i] = d[i][order]
    return idx, dist


def _hash_keys(seed, row_ids, slots):
    """Deterministic uint64 keys for (seed, point, slot) triples.

    A counter-based mix so each point's selection stream is independent of
    every other point and of the cloud size.
    """
    seed_term = _U64((int(seed) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
    x = (row_ids.astype(_U64)[:, None] << _U64(32)) ^ slots.astype(_U64)[None, :]
    with np.errstate(over="ignore"):
        x = x ^ seed_term
        x = (x ^ (x >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> _U64(27))) * _U64(0x94D049BB133111EB)
        return x ^ (x >> _U64(31))


def _select_k(cand_idx, cand_dist, avail, k, seed):
    """Randomly keep k of each row's candidates, then sort by (distance, index).

    Rows with fewer valid candidates than the pool width have their
    invalid slots pushed past every real key so they are never chosen.
    """
    n, pool = cand_idx.shape
    if pool == k:
        sel_idx, sel_dist = cand_idx.copy(), cand_dist.copy()
    else:
        keys = _hash_keys(seed, np.arange(n), np.arange(pool))
        keys = np.where(
            np.arange(pool)[None, :] < avail[:, None],
            keys,
            _U64(0xFFFFFFFFFFFFFFFF),
        )
        slots = np.argpartition(keys, k - 1, axis=1)[:, :k]
        sel_idx = np.take_along_axis(cand_idx, slots, axis=1)
        sel_dist = np.take_along_axis(cand_dist, slots, axis=1)
    order = np.argsort(sel_idx, axis=1, kind="stable")
    sel_idx = np.take_along_axis(sel_idx, order, axis=1)
    sel_dist = np.take_along_axis(sel_dist, order, axis=1)
    order = np.argsort(sel_dist, axis=1, kind="stable")
    sel_idx = np.take_along_axis(sel_idx, order, axis=1)
    sel_dist = np.take_along_axis(sel_dist, order, axis=1)
    return sel_idx, sel_dist


def _check_sizes(index, k, pool):
    if k < 1 or pool < k:
        raise ConfigError(f"need 1 <= k <= pool, got k={k}, pool={pool}")
    if index.n <= pool:
        raise InputError(
            f"cloud has {index.n} points; need more than pool={pool}"
        )


def sparse_edge_neighbors(index, k=20, pool=60, seed=0):
    """Random k of the pool nearest neighbors of every point."""
    k, pool = int(k), int(pool)
    _check_sizes(index, k, pool)
    cand_idx, cand_dist = index.knn(pool)
    avail = np.full(index.n, pool, dtype=np.int64)
    sel_idx, sel_dist = _select_k(cand_idx, cand_dist, avail, k, seed)
    return NeighborGraph(
        neighbors=sel_idx,
        mean_dist=sel_dist.mean(axis=1),
        k=k,
        candidate_pool=pool,
    )


def min_distance_neighbors(index, min_dist, k=20, pool=60, seed=0):
    """Random k of the pool nearest neighbors at distance >= min_dist[i].

    Points with fewer than k qualifying candidates fall back to their k
    farthest neighbors; the graph records how many rows did so.
    """
    k, pool = int(k), int(pool)
    _check_sizes(index, k, pool)
    cand_idx, cand_dist, avail = index.qualifying_pool(min_dist, pool)
    fallback_rows = np.flatnonzero(avail < k)
    sel_idx, sel_dist = _select_k(cand_idx, cand_dist, np.maximum(avail, k), k, seed)
    if fallback_rows.size:
        fb_idx, fb_dist = index.farthest(fallback_rows, k)
        sel_idx[fallback_rows] = fb_idx
        sel_dist[fallback_rows] = fb_dist
        logger.warning(
            "%d of %d points had fewer than %d candidates past their distance "
            "bound; used their farthest neighbors instead",
            fallback_rows.size, index.n, k,
        )
    return NeighborGraph(
        neighbors=sel_idx,
        mean_dist=sel_dist.mean(axis=1),
        k=k,
        candidate_pool=pool,
        fallback_count=int(fallback_rows.size),
    )


def dump_neighbor_graph(graph):
    """Plain-text dump: one line per point, ``i: j1 j2 ... jk | mean_dist``."""
    lines = []
    for i in range(graph.n):
        row = " ".join(str(int(j)) for j in graph.neighbors[i])
        lines.append(f"{i}: {row} | {graph.mean_dist[i]:.9g}")
    return "\n".join(lines) + "\n"
