"""Point clouds, exact k-nearest-neighbor search and patch construction."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise GeometryError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise GeometryError(f"{len(nrm)} normals for {len(pts)} points")
            if not np.all(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) <= 1e-6):
                raise GeometryError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Patch:
    local_points: np.ndarray
    source_indices: np.ndarray
    scale: float
    query_index: int
    center: np.ndarray
    pad_count: int = 0
    degenerate: bool = False

    def __len__(self):
        return len(self.local_points)

    def world_points(self):
        return self.local_points * self.scale + self.center


def _exact_distances(points, queries, idx):
    diff = points[idx] - queries[:, None, :]
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


class SpatialIndex:
    """Balanced kd-tree with exact, deterministic k-NN answers.

    The tree proposes candidates; distances are recomputed in one fixed way
    and ordered by (distance, cloud index), so results match a brute-force
    scan including the tie order.
    """

    def __init__(self, cloud):
        points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        if len(points) == 0:
            raise GeometryError("cannot index an empty cloud")
        self.points = points
        self._tree = cKDTree(points, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    def knn(self, query, k):
        idx, dist = self.knn_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        return idx[0], dist[0]

    def knn_batch(self, queries, k):
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} outside [1, {n}]")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        kk = min(k + 1, n)
        _, cand = self._tree.query(queries, k=kk)
        cand = np.asarray(cand).reshape(len(queries), kk)
        dist = _exact_distances(self.points, queries, cand)
        order = np.lexsort((cand, dist), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        if kk == k:
            return cand, dist
        # rows where the (k+1)-th candidate could tie with the k-th need a ball query
        unsafe = ~(dist[:, k] > dist[:, k - 1] * (1.0 + 1e-10))
        out_idx, out_dist = cand[:, :k].copy(), dist[:, :k].copy()
        for row in np.flatnonzero(unsafe):
            radius = dist[row, k - 1] * (1.0 + 1e-9) + 1e-300
            ball = np.asarray(self._tree.query_ball_point(queries[row], radius), dtype=np.int64)
            bd = _exact_distances(self.points, queries[row:row + 1], ball[None, :])[0]
            o = np.lexsort((ball, bd))[:k]
            out_idx[row], out_dist[row] = ball[o], bd[o]
        return out_idx, out_dist


def build_index(cloud):
    return SpatialIndex(cloud)


def knn(index, query, k):
    return index.knn(query, k)


def brute_force_knn(points, query, k):
    """Reference k-NN by a full scan; ties by lower index."""
    points = np.asarray(points, dtype=np.float64)
    diff = points - np.asarray(query, dtype=np.float64)
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((np.arange(len(points)), d))[:k]
    return order, d[order]


def _make_patch(cloud_points, query_index, idx, n_target):
    idx = np.asarray(idx, dtype=np.int64)
    if idx[0] != query_index:
        # coincident duplicates with lower indices: keep the query itself in front
        hit = np.flatnonzero(idx == query_index)
        if len(hit):
            idx = np.concatenate(([query_index], np.delete(idx, hit[0])))
        else:
            idx = np.concatenate(([query_index], idx[:-1]))
    center = cloud_points[query_index].copy()
    local = cloud_points[idx] - center
    radius = float(np.sqrt(np.einsum("ij,ij->i", local, local)).max())
    degenerate = radius <= 0.0
    scale = 1e-12 if degenerate else radius
    local = local / scale
    pad = n_target - len(idx)
    if pad > 0:
        idx = np.concatenate((idx, np.full(pad, idx[-1])))
        local = np.concatenate((local, np.repeat(local[-1:], pad, axis=0)))
    local.setflags(write=False)
    idx.setflags(write=False)
    return Patch(local, idx, scale, int(query_index), center, max(pad, 0), degenerate)


def extract_patch(cloud, index, query_index, N):
    """Query-centered, distance-sorted, unit-radius patch of ``N`` points.

    Clouds smaller than ``N`` are padded by repeating the farthest point;
    ``pad_count`` records how many rows are copies.
    """
    if N < 1:
        raise ValueError("patch size must be >= 1")
    points = cloud.points
    if not 0 <= query_index < len(points):
        raise IndexError(f"query index {query_index} out of range")
    idx, _ = index.knn(points[query_index], min(N, len(points)))
    return _make_patch(points, query_index, idx, N)


def extract_patches(cloud, index, query_indices, N):
    if N < 1:
        raise ValueError("patch size must be >= 1")
    points = cloud.points
    query_indices = np.asarray(query_indices, dtype=np.int64)
    idx, _ = index.knn_batch(points[query_indices], min(N, len(points)))
    return [_make_patch(points, q, row, N) for q, row in zip(query_indices, idx)]


def take_nearest_prefix(features, m):
    """Rows ``0..m`` of a patch-ordered feature matrix."""
    features = np.asarray(features)
    if m > len(features) or m < 0:
        raise ValueError(f"cannot take {m} of {len(features)} rows")
    return features[:m]


def bbox_diagonal(cloud):
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(points) == 0:
        raise GeometryError("empty cloud")
    extent = points.max(axis=0) - points.min(axis=0)
    return float(np.sqrt(extent @ extent))
