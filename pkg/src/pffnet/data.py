"""Synthetic shapes with analytic normals, corruptions, and XYZ/NORMALS files."""

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from .baselines import eigh3
from .geometry import GeometryError, PointCloud, bbox_diagonal

RNG_NAME = "philox4x64-sha256key-v1"

SHAPE_KINDS = ("plane", "sphere", "cylinder", "torus", "box-edges", "quadric")
NOISE_LEVELS = {"none": 0.0, "low": 0.0012, "medium": 0.006, "high": 0.012}
DENSITY_KINDS = ("uniform", "stripe", "gradient")


class ParseError(ValueError):
    pass


def make_rng(seed, *stream):
    """Counter-based generator keyed by a root seed and a stream label path.

    The key is a SHA-256 digest of the textual labels, so the same
    ``(seed, stream)`` yields the same numbers on every platform.
    """
    label = "/".join([RNG_NAME, str(int(seed))] + [str(s) for s in stream])
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype="<u8").copy()
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class ShapeSpec:
    kind: str = "sphere"
    count: int = 10000
    seed: int = 0
    radius: float = 1.0       # sphere / cylinder / torus tube
    major_radius: float = 2.0  # torus
    height: float = 2.0       # cylinder
    size: float = 2.0         # plane / quadric / box side
    coeffs: tuple = (0.0, 0.0, 1.0, 0.0, 1.0)  # quadric c1..c5
    name: str = ""

    def validate(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {SHAPE_KINDS}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        numbers = [self.radius, self.major_radius, self.height, self.size, *self.coeffs]
        if not all(np.isfinite(numbers)):
            raise ValueError("shape parameters must be finite")
        if min(self.radius, self.height, self.size) <= 0:
            raise ValueError("extents must be positive")
        if len(self.coeffs) != 5:
            raise ValueError("quadric needs five coefficients")


@dataclass
class CorruptionSpec:
    noise_sigma_frac: float = 0.0
    density: str = "uniform"
    seed: int = 0

    def validate(self):
        if not self.noise_sigma_frac >= 0:
            raise ValueError("noise_sigma_frac must be >= 0")
        if self.density not in DENSITY_KINDS:
            raise ValueError(f"unknown density {self.density!r}")


# ---------------------------------------------------------------------------
# analytic surfaces


def _sample_plane(spec, rng):
    xy = rng.uniform(-spec.size / 2, spec.size / 2, size=(spec.count, 2))
    pts = np.column_stack([xy, np.zeros(spec.count)])
    return pts, np.tile([0.0, 0.0, 1.0], (spec.count, 1))


def _sample_sphere(spec, rng):
    d = rng.normal(size=(spec.count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return spec.radius * d, d


def _sample_cylinder(spec, rng):
    phi = rng.uniform(0, 2 * np.pi, spec.count)
    z = rng.uniform(-spec.height / 2, spec.height / 2, spec.count)
    n = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(spec.count)])
    pts = np.column_stack([spec.radius * n[:, 0], spec.radius * n[:, 1], z])
    return pts, n


def _sample_torus(spec, rng):
    R, r = spec.major_radius, spec.radius
    u_all, v_all = [], []
    need = spec.count
    # rejection on the area element (R + r cos v)
    while need > 0:
        u = rng.uniform(0, 2 * np.pi, 2 * need)
        v = rng.uniform(0, 2 * np.pi, 2 * need)
        keep = rng.uniform(0, R + r, 2 * need) < R + r * np.cos(v)
        u_all.append(u[keep][:need])
        v_all.append(v[keep][:need])
        need -= len(u_all[-1])
    u, v = np.concatenate(u_all), np.concatenate(v_all)
    n = np.column_stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)])
    pts = np.column_stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)])
    return pts, n


def _sample_box(spec, rng):
    half = spec.size / 2
    face = rng.integers(0, 6, spec.count)
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    pts = rng.uniform(-half, half, size=(spec.count, 3))
    rows = np.arange(spec.count)
    pts[rows, axis] = sign * half
    n = np.zeros((spec.count, 3))
    n[rows, axis] = sign
    return pts, n


def quadric_height(coeffs, x, y):
    c1, c2, c3, c4, c5 = coeffs
    return c1 * x + c2 * y + c3 * x * x + c4 * x * y + c5 * y * y


def _sample_quadric(spec, rng):
    c1, c2, c3, c4, c5 = spec.coeffs
    xy = rng.uniform(-spec.size / 2, spec.size / 2, size=(spec.count, 2))
    x, y = xy[:, 0], xy[:, 1]
    pts = np.column_stack([x, y, quadric_height(spec.coeffs, x, y)])
    n = np.column_stack([-(c1 + 2 * c3 * x + c4 * y), -(c2 + c4 * x + 2 * c5 * y), np.ones_like(x)])
    return pts, n / np.linalg.norm(n, axis=1, keepdims=True)


_SAMPLERS = {
    "plane": _sample_plane,
    "sphere": _sample_sphere,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "box-edges": _sample_box,
    "quadric": _sample_quadric,
}


def synth_shape(spec):
    spec.validate()
    rng = make_rng(spec.seed, "shape", spec.kind)
    pts, normals = _SAMPLERS[spec.kind](spec, rng)
    return PointCloud(pts, normals, spec.name or spec.kind)


# ---------------------------------------------------------------------------
# corruptions


def add_noise(cloud, sigma_frac, seed):
    """Isotropic Gaussian jitter scaled by the clean bounding-box diagonal.

    Ground-truth normals stay those of the clean sample.
    """
    if sigma_frac < 0:
        raise ValueError("sigma_frac must be >= 0")
    if sigma_frac == 0:
        return cloud
    sigma = sigma_frac * bbox_diagonal(cloud)
    offsets = make_rng(seed, "noise").normal(0.0, sigma, size=cloud.points.shape)
    return PointCloud(cloud.points + offsets, cloud.normals, cloud.name)


def principal_coordinate(points):
    """Projection on the direction of largest variance."""
    centered = points - points.mean(axis=0)
    _, vecs = eigh3(centered.T @ centered / len(points))
    axis = vecs[:, 2]
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return centered @ axis


def _subset(cloud, keep):
    if not keep.any():
        raise GeometryError("density filter removed every point")
    normals = None if cloud.normals is None else cloud.normals[keep]
    return PointCloud(cloud.points[keep], normals, cloud.name)


def density_stripe(cloud, seed, slabs=6, keep_ratio=0.15):
    """Deplete every other slab along the first principal axis (stripe-v1)."""
    t = principal_coordinate(cloud.points)
    span = t.max() - t.min()
    slab = np.zeros(len(t), dtype=np.int64) if span == 0 else \
        np.minimum(((t - t.min()) / span * slabs).astype(np.int64), slabs - 1)
    u = make_rng(seed, "stripe").uniform(size=len(t))
    keep = (slab % 2 == 0) | (u < keep_ratio)
    return _subset(cloud, keep)


def density_gradient(cloud, seed, low=0.05, high=1.0):
    """Keep-probability ramping linearly along the first principal axis (gradient-v1)."""
    t = principal_coordinate(cloud.points)
    span = t.max() - t.min()
    frac = np.zeros_like(t) if span == 0 else (t - t.min()) / span
    prob = low + (high - low) * frac
    u = make_rng(seed, "gradient").uniform(size=len(t))
    return _subset(cloud, u < prob)


def corrupt(cloud, corruption):
    corruption.validate()
    out = add_noise(cloud, corruption.noise_sigma_frac, corruption.seed)
    if corruption.density == "stripe":
        out = density_stripe(out, corruption.seed)
    elif corruption.density == "gradient":
        out = density_gradient(out, corruption.seed)
    return out


def sample_queries(cloud, count, seed):
    """Uniform query indices; without replacement unless ``count`` exceeds the cloud."""
    n = cloud if isinstance(cloud, (int, np.integer)) else len(cloud)
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = make_rng(seed, "queries")
    return rng.choice(n, size=count, replace=count > n).astype(np.int64)


# ---------------------------------------------------------------------------
# files


def _read_triples(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _write_triples(path, arr):
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        for x, y, z in arr:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_xyz(path):
    return _read_triples(path)


def write_xyz(path, cloud):
    _write_triples(path, cloud.points if isinstance(cloud, PointCloud) else cloud)


def read_normals(path):
    return _read_triples(path)


def write_normals(path, normals):
    _write_triples(path, normals)


def load_cloud(xyz_path, normals_path=None, name=""):
    points = read_xyz(xyz_path)
    normals = None
    if normals_path is not None:
        normals = read_normals(normals_path)
        if len(normals) != len(points):
            raise ParseError(f"{len(points)} points but {len(normals)} normals")
        lengths = np.linalg.norm(normals, axis=1)
        # PCPNet files store normals that are unit only to print precision
        normals = normals / np.where(lengths > 0, lengths, 1.0)[:, None]
    return PointCloud(points, normals, name or str(xyz_path))


# ---------------------------------------------------------------------------
# manifests (key=value text)


def format_manifest(values):
    return "".join(f"{k}={v}\n" for k, v in values.items())


def parse_key_values(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(template, text):
    if isinstance(template, tuple):
        return tuple(float(v) for v in text.replace(",", " ").split())
    if isinstance(template, bool):
        return text.lower() in ("1", "true", "yes")
    return type(template)(text)


def manifest_values(shape, corruption):
    values = {"rng": RNG_NAME}
    for spec in (shape, corruption):
        for f in fields(spec):
            v = getattr(spec, f.name)
            values[f.name if spec is shape else f"corruption_{f.name}"] = (
                " ".join(f"{c:.17g}" for c in v) if isinstance(v, tuple) else v)
    values["density_variant"] = {"stripe": "stripe-v1", "gradient": "gradient-v1"}.get(corruption.density, "uniform")
    return values


def specs_from_manifest(text):
    kv = parse_key_values(text)
    shape, corruption = ShapeSpec(), CorruptionSpec()
    for f in fields(shape):
        if f.name in kv:
            setattr(shape, f.name, _coerce(getattr(shape, f.name), kv[f.name]))
    for f in fields(corruption):
        key = f"corruption_{f.name}"
        if key in kv:
            setattr(corruption, f.name, _coerce(getattr(corruption, f.name), kv[key]))
    shape.validate()
    corruption.validate()
    return shape, corruption


def build_from_manifest(text):
    shape, corruption = specs_from_manifest(text)
    return corrupt(synth_shape(shape), corruption)
