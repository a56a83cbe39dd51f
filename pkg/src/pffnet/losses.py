"""Training objectives and evaluation metrics for unoriented normals."""

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DEFAULT_PGP_THRESHOLDS = tuple(range(0, 91))


@dataclass(frozen=True)
class LossWeights:
    query: float = 0.1
    neighbors: float = 0.4
    coplanarity: float = 1.0

    def __post_init__(self):
        for v in (self.query, self.neighbors, self.coplanarity):
            if not (np.isfinite(v) and v >= 0):
                raise ValueError("loss weights must be finite and non-negative")


def normal_loss(n, n_gt):
    """Sine distance plus sign-invariant squared distance, per row.

    ``n`` is a prediction tensor ``[..., 3]`` (already unit length),
    ``n_gt`` the ground truth.  Returns ``[..., 1]``.
    """
    n, n_gt = ad.as_tensor(n), ad.as_tensor(n_gt)
    d_sin = ad.norm(ad.cross(n, n_gt))
    minus = n - n_gt
    plus = n + n_gt
    d_euc = ad.minimum(ad.reduce_sum(minus * minus, axis=-1),
                       ad.reduce_sum(plus * plus, axis=-1))
    return d_sin + d_euc


def coplanarity_targets(points, n_gt_q):
    """Soft coplanarity labels and the bandwidth used to build them.

    The bandwidth is a constant w.r.t. the network (no gradient).
    """
    points = np.asarray(points, dtype=np.float64)
    dist2 = (points @ np.asarray(n_gt_q, dtype=np.float64)) ** 2
    eps = max(0.0025, 0.3 * float(dist2.sum()) / len(points))
    return np.exp(-dist2 / eps ** 2), eps


def weight_loss(tau, points, n_gt_q):
    """Mean squared gap between predicted weights and coplanarity labels."""
    tau = ad.as_tensor(tau)
    target, _ = coplanarity_targets(points, n_gt_q)
    diff = tau - target.reshape(tau.shape)
    return ad.mean_all(diff * diff)


def total_loss(pred, patch, gt_normals, weights=LossWeights()):
    """Weighted sum of query normal, neighbor normal and coplanarity losses.

    ``gt_normals`` is the cloud-level normal array; neighbors are looked up
    through ``patch.source_indices`` for the retained rows.
    """
    if gt_normals is None:
        raise ValueError("ground-truth normals are required for training")
    gt_normals = np.asarray(gt_normals, dtype=np.float64)
    n_out = pred.neighbor_normals.shape[-2]
    gt_q = gt_normals[patch.query_index]
    gt_nb = gt_normals[patch.source_indices[:n_out]]
    loss_q = ad.sum_all(normal_loss(pred.normal, gt_q))
    loss_nb = ad.mean_all(normal_loss(pred.neighbor_normals, gt_nb))
    loss_tau = weight_loss(pred.tau, patch.local_points[:n_out], gt_q)
    return weights.query * loss_q + weights.neighbors * loss_nb + weights.coplanarity * loss_tau


# ---------------------------------------------------------------------------
# metrics


def angle_error(n, n_ref):
    """Unoriented angle in degrees, in [0, 90]."""
    return float(angle_errors(np.reshape(n, (1, 3)), np.reshape(n_ref, (1, 3)))[0])


def angle_errors(n, n_ref):
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    n_ref = np.asarray(n_ref, dtype=np.float64).reshape(-1, 3)
    if n.shape != n_ref.shape:
        raise ValueError(f"{len(n)} predictions vs {len(n_ref)} references")
    ln = np.linalg.norm(n, axis=1)
    lr = np.linalg.norm(n_ref, axis=1)
    if np.any(ln == 0) or np.any(lr == 0):
        raise ValueError("angle undefined for a zero vector")
    # atan2 of |sin| and |cos| equals arccos(|cos|) but stays accurate near 0 degrees
    sin = np.linalg.norm(np.cross(n, n_ref), axis=1)
    cos = np.abs(np.einsum("ij,ij->i", n, n_ref))
    return np.degrees(np.arctan2(sin, cos))


def rmse(errors):
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("rmse of an empty error list")
    return float(np.sqrt(np.mean(errors ** 2)))


def pgp_curve(errors, thresholds=DEFAULT_PGP_THRESHOLDS):
    """Fraction of errors at or below each threshold.

    Inclusive so that PGP(90) is 1 for unoriented errors, which can be
    exactly 90 degrees.
    """
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    if errors.size == 0:
        return [(t, 0.0) for t in thresholds]
    counts = np.searchsorted(errors, thresholds, side="right")
    return [(t, float(c) / errors.size) for t, c in zip(thresholds, counts)]


@dataclass
class EvalReport:
    errors: np.ndarray
    rmse: float
    pgp: list

    @classmethod
    def from_normals(cls, pred, gt, thresholds=DEFAULT_PGP_THRESHOLDS):
        errors = angle_errors(pred, gt)
        return cls(errors, rmse(errors), pgp_curve(errors, thresholds))

    def pgp_at(self, threshold):
        return dict(self.pgp)[float(threshold)]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold_deg", "pgp"])
            for t, f in self.pgp:
                w.writerow([f"{t:g}", f"{f:.6f}"])
            w.writerow(["rmse_deg", f"{self.rmse:.6f}"])


def read_report_csv(path):
    """Parse a report CSV back into ``(pgp, rmse)``."""
    pgp, value = [], None
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["threshold_deg", "pgp"]:
        raise ValueError(f"{path}: missing header")
    for row in rows[1:]:
        if row[0] == "rmse_deg":
            value = float(row[1])
        else:
            pgp.append((float(row[0]), float(row[1])))
    return pgp, value


def pgp_svg(pgp, width=480, height=320, margin=40):
    """Polyline of a PGP curve; x is 0-90 degrees, y is 0-1."""
    sx = (width - 2 * margin) / 90.0
    sy = height - 2 * margin
    pts = " ".join(f"{margin + t * sx:.2f},{height - margin - f * sy:.2f}" for t, f in pgp)
    x0, y0 = margin, height - margin
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'  <line x1="{x0}" y1="{y0}" x2="{width - margin}" y2="{y0}" stroke="black"/>\n'
        f'  <line x1="{x0}" y1="{y0}" x2="{x0}" y2="{margin}" stroke="black"/>\n'
        f'  <text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle">threshold (deg, 0-90)</text>\n'
        f'  <text x="12" y="{height / 2:.0f}" transform="rotate(-90 12 {height / 2:.0f})" '
        f'text-anchor="middle">PGP (0-1)</text>\n'
        f'  <polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>\n'
        "</svg>\n")
