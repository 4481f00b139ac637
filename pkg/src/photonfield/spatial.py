"""Spatial point index: radius (ball), k-nearest, and hybrid queries.

A :class:`PointIndex` snapshots an immutable array of 3D points. Queries
use a scipy cKDTree purely as a candidate generator; membership, distance,
and ordering are always recomputed in float64 numpy, so results are exactly
the (distance, id)-sorted sets a linear scan would produce. That keeps
boundary semantics (inclusive ``distance <= r``) and tie-breaking (ascending
id among equal distances) independent of the accelerator.

``linear_ball_query`` / ``linear_knn_query`` are the reference scans used
by the test suite; they share only the distance convention, not the index.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def _distances(points, x):
    d = points - np.asarray(x, dtype=np.float64)
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def _sort_by_distance_then_id(ids, dists):
    order = np.lexsort((ids, dists))
    return ids[order], dists[order]


class PointIndex:
    """Immutable index over a snapshot of 3D points.

    Safe for concurrent queries; there is no incremental update, so callers
    rebuild when the underlying points move.
    """

    def __init__(self, points):
        points = np.asarray(points, dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 3)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError("points must have shape (n, 3)")
        if not np.all(np.isfinite(points)):
            raise ValueError("points must be finite")
        self._points = points.copy()
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points) if len(self._points) else None

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self):
        return self._points

    def ball_query(self, x, r: float):
        """All (id, distance) with distance <= r, sorted by (distance, id)."""
        if r < 0:
            raise ValueError("radius must be non-negative")
        if self._tree is None:
            return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.float64)
        if not np.isfinite(r):
            ids = np.arange(len(self._points), dtype=np.intp)
            dists = _distances(self._points, x)
            return _sort_by_distance_then_id(ids, dists)
        # pad the tree radius a few ulps so exact recomputation never loses
        # a boundary point to accelerator-side rounding
        pad = np.nextafter(np.nextafter(r, np.inf), np.inf) + 1e-300
        cand = np.asarray(self._tree.query_ball_point(np.asarray(x, dtype=np.float64), pad), dtype=np.intp)
        if cand.size == 0:
            return cand, np.empty(0, dtype=np.float64)
        dists = _distances(self._points[cand], x)
        keep = dists <= r
        return _sort_by_distance_then_id(cand[keep], dists[keep])

    def knn_query(self, x, k: int):
        """The min(k, n) nearest (id, distance), sorted by (distance, id).

        Ties at the k-th distance are resolved by ascending id, so results
        are unique for any input.
        """
        if k < 0:
            raise ValueError("k must be non-negative")
        n = len(self._points)
        k_eff = min(k, n)
        if k_eff == 0:
            return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.float64)
        dists, _ = self._tree.query(np.asarray(x, dtype=np.float64), k=k_eff)
        dmax = float(np.max(np.atleast_1d(dists)))
        # fetch everything within the k-th distance and re-rank exactly;
        # this makes the tie-break on id explicit
        ids, d = self.ball_query(x, dmax * (1.0 + 1e-12) + 1e-300)
        if len(ids) < k_eff:  # accelerator distance rounded low; widen once
            ids, d = self.ball_query(x, dmax * (1.0 + 1e-9) + 1e-12)
        return ids[:k_eff], d[:k_eff]

    def hybrid_query(self, x, r: float, k_min: int):
        """Ball query, topped up with k-nearest neighbors when sparse.

        Returns deduplicated ids: the ball result when it already holds at
        least ``k_min`` points, otherwise the union of ball and k_min-NN
        results. Size is always >= min(k_min, n).
        """
        ids, _ = self.ball_query(x, r)
        if len(ids) >= k_min:
            return ids
        knn_ids, _ = self.knn_query(x, k_min)
        if len(ids) == 0:
            return knn_ids
        extra = knn_ids[~np.isin(knn_ids, ids)]
        return np.concatenate([ids, extra])

    def ball_query_batch(self, xs, r: float):
        """Vectorized ball query: (ids, row_splits) in CSR layout.

        ``ids[row_splits[i]:row_splits[i+1]]`` are the neighbors of point i,
        each row sorted by (distance, id).
        """
        xs = np.asarray(xs, dtype=np.float64)
        m = len(xs)
        if self._tree is None or m == 0:
            return np.empty(0, dtype=np.intp), np.zeros(m + 1, dtype=np.intp)
        pad = np.nextafter(np.nextafter(r, np.inf), np.inf) + 1e-300
        rows = self._tree.query_ball_point(xs, pad)
        counts = np.fromiter((len(row) for row in rows), dtype=np.intp, count=m)
        flat = np.concatenate([np.asarray(row, dtype=np.intp) for row in rows]) if counts.sum() else np.empty(0, dtype=np.intp)
        owner = np.repeat(np.arange(m, dtype=np.intp), counts)
        diff = self._points[flat] - xs[owner]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        keep = dist <= r
        flat, owner, dist = flat[keep], owner[keep], dist[keep]
        order = np.lexsort((flat, dist, owner))
        flat, owner, dist = flat[order], owner[order], dist[order]
        row_splits = np.zeros(m + 1, dtype=np.intp)
        np.add.at(row_splits, owner + 1, 1)
        np.cumsum(row_splits, out=row_splits)
        return flat, row_splits

    def knn_query_batch(self, xs, k: int):
        """Vectorized k-nearest query in CSR layout (ids, row_splits).

        Each row holds exactly min(k, n) ids sorted by (distance, id),
        matching :meth:`knn_query` row by row.
        """
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        m = len(xs)
        n = len(self._points)
        k_eff = min(k, n)
        if k_eff == 0 or m == 0:
            return np.empty(0, dtype=np.intp), np.zeros(m + 1, dtype=np.intp)
        dists, _ = self._tree.query(xs, k=k_eff)
        dists = np.atleast_2d(dists)
        if dists.shape[0] != m:  # k_eff == 1 returns (m,)
            dists = dists.reshape(m, k_eff)
        dmax = dists[:, -1]
        pad = dmax * (1.0 + 1e-12) + 1e-300
        rows = self._tree.query_ball_point(xs, pad)
        counts = np.fromiter((len(row) for row in rows), dtype=np.intp, count=m)
        flat = np.concatenate([np.asarray(row, dtype=np.intp) for row in rows])
        owner = np.repeat(np.arange(m, dtype=np.intp), counts)
        diff = self._points[flat] - xs[owner]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        order = np.lexsort((flat, dist, owner))
        flat, owner = flat[order], owner[order]
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp)
        rank = np.arange(len(flat), dtype=np.intp) - starts[owner]
        keep = rank < k_eff
        flat, owner = flat[keep], owner[keep]
        row_splits = np.zeros(m + 1, dtype=np.intp)
        np.add.at(row_splits, owner + 1, 1)
        np.cumsum(row_splits, out=row_splits)
        return flat, row_splits

    def hybrid_query_batch(self, xs, r: float, k_min: int):
        """Vectorized hybrid query in CSR layout (ids, row_splits)."""
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        flat, row_splits = self.ball_query_batch(xs, r)
        if len(self._points) == 0 or k_min <= 0:
            return flat, row_splits
        counts = np.diff(row_splits)
        sparse = np.nonzero(counts < min(k_min, len(self._points)))[0]
        if len(sparse) == 0:
            return flat, row_splits
        kflat, ksplits = self.knn_query_batch(xs[sparse], k_min)
        rows = [flat[row_splits[i]:row_splits[i + 1]] for i in range(len(xs))]
        for j, i in enumerate(sparse):
            ball_ids = rows[i]
            knn_ids = kflat[ksplits[j]:ksplits[j + 1]]
            if len(ball_ids) == 0:
                rows[i] = knn_ids
            else:
                extra = knn_ids[~np.isin(knn_ids, ball_ids)]
                rows[i] = np.concatenate([ball_ids, extra])
        counts = np.fromiter((len(row) for row in rows), dtype=np.intp, count=len(xs))
        out_splits = np.zeros(len(xs) + 1, dtype=np.intp)
        np.cumsum(counts, out=out_splits[1:])
        out = np.concatenate(rows) if counts.sum() else np.empty(0, dtype=np.intp)
        return out, out_splits


def build(points) -> PointIndex:
    return PointIndex(points)


def linear_ball_query(points, x, r: float):
    """Reference scan: all (id, distance) with distance <= r, (distance, id)-sorted."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.float64)
    dists = _distances(points, x)
    ids = np.nonzero(dists <= r)[0].astype(np.intp)
    return _sort_by_distance_then_id(ids, dists[ids])


def linear_knn_query(points, x, k: int):
    """Reference scan: min(k, n) nearest (id, distance), (distance, id)-sorted."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    k_eff = min(k, n)
    if k_eff == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.float64)
    dists = _distances(points, x)
    ids = np.arange(n, dtype=np.intp)
    order = np.lexsort((ids, dists))[:k_eff]
    return ids[order], dists[order]


def linear_hybrid_query(points, x, r: float, k_min: int):
    """Reference scan for the hybrid (ball union kNN top-up) query."""
    ids, _ = linear_ball_query(points, x, r)
    if len(ids) >= k_min:
        return ids
    knn_ids, _ = linear_knn_query(points, x, k_min)
    if len(ids) == 0:
        return knn_ids
    extra = knn_ids[~np.isin(knn_ids, ids)]
    return np.concatenate([ids, extra])
