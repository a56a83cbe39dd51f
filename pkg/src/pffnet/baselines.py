"""Classical normal estimators: PCA plane fit and an order-2 jet."""

import time
from dataclasses import dataclass

import numpy as np

from .geometry import Patch, SpatialIndex

JACOBI_MAX_SWEEPS = 30
JACOBI_TOL = 1e-13
_PAIRS = ((0, 1), (0, 2), (1, 2))


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Sym3:
    xx: float
    yy: float
    zz: float
    xy: float
    xz: float
    yz: float

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, 0], m[1, 1], m[2, 2], m[0, 1], m[0, 2], m[1, 2])

    def matrix(self):
        return np.array([[self.xx, self.xy, self.xz],
                         [self.xy, self.yy, self.yz],
                         [self.xz, self.yz, self.zz]])


def eigh3(m):
    """Eigen-decomposition of symmetric 3x3 matrices by cyclic Jacobi.

    Accepts a ``Sym3``, a single ``3x3`` array or a stack ``[..., 3, 3]``.
    Returns eigenvalues in ascending order and the eigenvectors as columns.
    """
    if isinstance(m, Sym3):
        m = m.matrix()
    a = np.array(m, dtype=np.float64)
    if a.shape[-2:] != (3, 3):
        raise ValueError(f"expected [..., 3, 3], got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    batch_shape = a.shape[:-2]
    a = 0.5 * (a + np.swapaxes(a, -1, -2)).reshape(-1, 3, 3)
    v = np.broadcast_to(np.eye(3), a.shape).copy()
    scale = np.sqrt(np.einsum("bij,bij->b", a, a))
    rows = np.arange(len(a))

    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2)
        if np.all(off <= JACOBI_TOL * scale):
            break
        for p, q in _PAIRS:
            apq = a[:, p, q]
            active = np.abs(apq) > 0
            if not active.any():
                continue
            safe_apq = np.where(active, apq, 1.0)
            theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe_apq)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(theta == 0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            J = np.broadcast_to(np.eye(3), a.shape).copy()
            J[rows, p, p] = c
            J[rows, q, q] = c
            J[rows, p, q] = s
            J[rows, q, p] = -s
            a = np.swapaxes(J, -1, -2) @ a @ J
            v = v @ J

    w = np.diagonal(a, axis1=-2, axis2=-1).copy()
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    return w.reshape(batch_shape + (3,)), v.reshape(batch_shape + (3, 3))


def canonical_sign(n):
    """Flip unoriented normals so z > 0; ties fall back to y, then x."""
    n = np.array(n, dtype=np.float64)
    flat = n.reshape(-1, 3)
    key = np.where(flat[:, 2] != 0, flat[:, 2], np.where(flat[:, 1] != 0, flat[:, 1], flat[:, 0]))
    flat *= np.where(key < 0, -1.0, 1.0)[:, None]
    return flat.reshape(n.shape)


def _points_of(patch):
    pts = patch.local_points if isinstance(patch, Patch) else patch
    return np.asarray(pts, dtype=np.float64)


def covariance(points):
    """Centered covariance of ``[..., k, 3]`` neighborhoods."""
    centered = points - points.mean(axis=-2, keepdims=True)
    return np.einsum("...ki,...kj->...ij", centered, centered) / points.shape[-2]


def pca_normals_batch(neighborhoods, rank_tol=1e-12):
    """Smallest-variance direction of each ``[B, k, 3]`` neighborhood."""
    pts = np.asarray(neighborhoods, dtype=np.float64)
    if pts.shape[-2] < 3:
        raise DegenerateGeometryError("PCA needs at least 3 points")
    w, v = eigh3(covariance(pts))
    bad = ~(w[..., 1] > rank_tol * w[..., 2])
    if np.any(bad):
        raise DegenerateGeometryError(
            f"{int(bad.sum())} neighborhood(s) are collinear or coincident")
    return canonical_sign(v[..., :, 0])


def pca_normal(patch):
    return pca_normals_batch(_points_of(patch)[None])[0]


def tangent_frame(normal):
    """Orthonormal ``(t1, t2, n)`` rows with ``n`` the given normal."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.zeros(3)
    helper[np.argmin(np.abs(n))] = 1.0
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n])


def jet_design(u, v):
    return np.stack([np.ones_like(u), u, v, u * u, u * v, v * v], axis=-1)


def fit_height_quadratic(uvh):
    """Least-squares ``h = c0 + c1 u + c2 v + c3 u^2 + c4 uv + c5 v^2``.

    Solved through the normal equations with a Cholesky factor; on a failed
    factorization the diagonal is damped by 1e-12 once before giving up.
    """
    uvh = np.asarray(uvh, dtype=np.float64)
    if len(uvh) < 6:
        raise DegenerateGeometryError("order-2 jet needs at least 6 points")
    A = jet_design(uvh[:, 0], uvh[:, 1])
    if np.linalg.matrix_rank(A) < 6:
        raise DegenerateGeometryError("jet normal equations are singular")
    AtA = A.T @ A
    Ath = A.T @ uvh[:, 2]
    try:
        L = np.linalg.cholesky(AtA)
    except np.linalg.LinAlgError:
        try:
            L = np.linalg.cholesky(AtA + 1e-12 * np.eye(6))
        except np.linalg.LinAlgError as exc:
            raise DegenerateGeometryError("jet normal equations are singular") from exc
    y = np.linalg.solve(L, Ath)
    return np.linalg.solve(L.T, y)


JET_MAX_REFINE = 8


def jet_normal(patch, return_coeffs=False, max_refine=JET_MAX_REFINE, tol=1e-12):
    """Order-2 height-function fit around the origin (the query).

    The first frame comes from PCA.  A quadric seen from a tilted frame is
    not exactly quadratic, so the fit is repeated in the frame of the
    previous jet normal until the normal moves less than ``tol`` (at most
    ``max_refine`` extra passes).
    """
    pts = _points_of(patch)
    n = pca_normal(pts)
    for _ in range(max_refine + 1):
        frame = tangent_frame(n)
        coeffs = fit_height_quadratic(pts @ frame.T)
        local = np.array([-coeffs[1], -coeffs[2], 1.0])
        prev, n = n, canonical_sign((local / np.linalg.norm(local)) @ frame)
        if np.linalg.norm(np.cross(prev, n)) < tol:
            break
    return (n, coeffs) if return_coeffs else n


def estimate_normals(cloud, k, method="pca", index=None, queries=None):
    """Classical normals for every point (or the ``queries`` subset)."""
    index = index if index is not None else SpatialIndex(cloud)
    points = cloud.points
    queries = np.arange(len(points)) if queries is None else np.asarray(queries)
    idx, _ = index.knn_batch(points[queries], k)
    neigh = points[idx] - points[queries][:, None, :]
    if method == "pca":
        return pca_normals_batch(neigh)
    if method == "jet":
        radius = np.linalg.norm(neigh, axis=-1).max(axis=-1)
        neigh = neigh / np.where(radius > 0, radius, 1.0)[:, None, None]
        return np.stack([jet_normal(nb) for nb in neigh])
    raise ValueError(f"unknown estimator {method!r}")


def patch_size_study(cloud, estimator="pca", ks=(8, 16), queries=None, index=None):
    """RMSE and wall-clock runtime of a classical estimator per neighborhood size.

    Returns a list of ``(k, rmse_deg, seconds)``; index construction is
    shared and excluded from the timing.
    """
    from .losses import angle_errors, rmse

    if cloud.normals is None:
        raise ValueError("patch-size study needs ground-truth normals")
    index = index if index is not None else SpatialIndex(cloud)
    queries = np.arange(len(cloud)) if queries is None else np.asarray(queries)
    rows = []
    for k in ks:
        t0 = time.perf_counter()
        normals = estimate_normals(cloud, k, estimator, index=index, queries=queries)
        elapsed = time.perf_counter() - t0
        rows.append((k, rmse(angle_errors(normals, cloud.normals[queries])), elapsed))
    return rows
