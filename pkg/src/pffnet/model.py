"""Multi-scale patch feature network for unoriented normal regression.

Layout of one forward pass on a distance-sorted patch of ``N`` points::

    per-point features            N rows
    F1 -> compensation            N/b rows      (repeated L times)
    F2 x n_f2                     N/b^L rows
    weighted max-pool head        query normal, neighbor normals, tau

All learnable arrays live in a ``ModelParams`` under stable dotted names,
e.g. ``f1.0.p2.alpha.1.weight`` or ``comp.1.w_a``.
"""

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .params import ModelParams, glorot_uniform

COMPENSATION_VARIANTS = ("attention", "softmax1", "softmax2", "concat", "add", "eta_add", "none")
WEIGHT_VARIANTS = ("learned", "linear")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    N: int = 800
    L: int = 2
    b: int = 2
    n_k: int = 16
    c: int = 128
    dense_layers: int = 3
    n_f2: int = 2
    use_pointwise: bool = True
    use_weight_w: bool = True
    weight_variant: str = "learned"
    use_f1: bool = True
    use_f2: bool = True
    f2_as_f1: bool = False
    compensation_variant: str = "attention"
    standardize: bool = False
    pca_align: bool = True

    def validate(self):
        reductions = self.L + (self.n_f2 if self.f2_as_f1 else 0)
        if self.b < 2 or self.N % self.b ** reductions:
            raise ConfigError(f"N={self.N} must be divisible by b^{reductions} (b={self.b})")
        if not 1 <= self.n_k < self.N:
            raise ConfigError(f"need 1 <= n_k < N, got n_k={self.n_k}, N={self.N}")
        if self.c <= 0 or self.c % 2:
            raise ConfigError("channel width must be a positive even number")
        if self.dense_layers < 0 or self.L < 0 or self.n_f2 < 0:
            raise ConfigError("layer counts must be non-negative")
        if not self.use_pointwise and self.dense_layers == 0:
            raise ConfigError("per-point features need the point-wise or the graph branch")
        if self.compensation_variant not in COMPENSATION_VARIANTS:
            raise ConfigError(f"unknown compensation variant {self.compensation_variant!r}")
        if self.weight_variant not in WEIGHT_VARIANTS:
            raise ConfigError(f"unknown weight variant {self.weight_variant!r}")
        return self

    def schedule(self):
        return ScaleSchedule.from_config(self)

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text, **overrides):
        from .data import parse_key_values

        cfg = cls()
        for key, value in {**parse_key_values(text), **overrides}.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown model option {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, bool):
                value = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
            else:
                value = type(current)(value)
            setattr(cfg, key, value)
        return cfg.validate()


DESK_CONFIG = ModelConfig(N=256, c=64)


@dataclass(frozen=True)
class ScaleSchedule:
    sizes: tuple

    @classmethod
    def from_config(cls, cfg):
        return cls(tuple(cfg.N // cfg.b ** s for s in range(cfg.L + 1)))

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ConfigError(f"scale sizes must strictly decrease: {self.sizes}")


@dataclass
class Prediction:
    normal: ad.Tensor            # [..., 1, 3], unit length
    neighbor_normals: ad.Tensor  # [..., N_o, 3], unit length
    tau: ad.Tensor               # [..., N_o, 1], in (0, 1)
    rows: tuple = ()             # row count after each stage


# ---------------------------------------------------------------------------
# parameter layout


def _mlp_layout(prefix, widths):
    out = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        out += [(f"{prefix}.{i}.weight", (a, b)), (f"{prefix}.{i}.bias", (b,))]
    return out


def _weight_layout(prefix, cfg):
    if cfg.use_weight_w and cfg.weight_variant == "learned":
        return [(f"{prefix}.w_a", (1,)), (f"{prefix}.w_b", (1,))]
    return []


def _layer_layout(prefix, cfg, real):
    c = cfg.c
    if not real:
        return _mlp_layout(f"{prefix}.row", [c, c, c])
    return (_mlp_layout(f"{prefix}.gamma", [c, c, c])
            + _mlp_layout(f"{prefix}.beta", [c, c, c])
            + _mlp_layout(f"{prefix}.alpha", [2 * c, c, c])
            + _weight_layout(prefix, cfg))


def _compensation_layout(prefix, cfg):
    c, variant = cfg.c, cfg.compensation_variant
    if variant in ("add", "none"):
        return []
    if variant == "concat":
        return _mlp_layout(f"{prefix}.cat", [2 * c, c, c])
    return (_mlp_layout(f"{prefix}.theta_q", [c, c])
            + _mlp_layout(f"{prefix}.theta_k", [c, c])
            + _mlp_layout(f"{prefix}.theta_v", [c, c])
            + _mlp_layout(f"{prefix}.theta_delta", [c, c, c])
            + _mlp_layout(f"{prefix}.mu", [c, c, c])
            + _mlp_layout(f"{prefix}.eta", [c if variant == "eta_add" else 2 * c, c, c])
            + _weight_layout(prefix, cfg))


def param_layout(cfg):
    """Ordered ``(name, shape)`` list for every learnable array."""
    cfg.validate()
    c, g, D = cfg.c, cfg.c // 2, cfg.dense_layers
    out = []
    branches = 0
    if cfg.use_pointwise:
        out += _mlp_layout("feat.point", [3, c, c])
        branches += 1
    if D > 0:
        for level in range(D):
            out += _mlp_layout(f"feat.graph.{level}", [6 + level * g, g])
        out += _mlp_layout("feat.graph.fuse", [6 + D * g, c])
        branches += 1
    out += _mlp_layout("feat.fuse", [branches * c, c, c])
    for s in range(cfg.L):
        out += _layer_layout(f"f1.{s}.p1", cfg, cfg.use_f1)
        out += _layer_layout(f"f1.{s}.p2", cfg, cfg.use_f1)
        out += _compensation_layout(f"comp.{s}", cfg)
    for j in range(cfg.n_f2):
        real = cfg.use_f1 if cfg.f2_as_f1 else cfg.use_f2
        out += _layer_layout(f"f2.{j}.p1", cfg, real)
        out += _layer_layout(f"f2.{j}.p2", cfg, real)
    out += _mlp_layout("head.xi", [c, g, 1])
    out += _mlp_layout("head.delta", [c, c, 3])
    out += _mlp_layout("head.nbr", [c, g, 3])
    out += _weight_layout("head", cfg)
    return out


def init_params(cfg, seed=0):
    """Glorot-uniform weights, zero biases, distance-weight scalars at 1."""
    from .data import make_rng

    rng = make_rng(seed, "init")
    params = ModelParams()
    for name, shape in param_layout(cfg):
        if name.endswith((".w_a", ".w_b")):
            params.add(name, np.ones(shape))
        elif name.endswith(".weight"):
            params.add(name, glorot_uniform(rng, *shape))
        else:
            params.add(name, np.zeros(shape))
    return params


# ---------------------------------------------------------------------------
# building blocks


def mlp(params, prefix, x, standardize=False):
    """Affine layers with leaky-rectifier hidden activations; last layer linear.

    ``x`` may be a list of tensors, read as their channel concatenation.
    """
    layers = 0
    while f"{prefix}.{layers}.weight" in params:
        layers += 1
    if layers == 0:
        raise KeyError(f"no layers under {prefix!r}")
    for i in range(layers):
        W, b = params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"]
        x = ad.affine_multi(x, W, b) if isinstance(x, list) else ad.affine(x, W, b)
        if i < layers - 1:
            if standardize and x.shape[-2] > 1:
                x = ad.standardize(x)
            x = ad.leaky_relu(x)
    return x


def distance_weights(radii, a=1.0, b=1.0):
    """Sigmoid-of-distance focus weights normalized to sum to one.

    ``radii`` are distances to the query in normalized patch units, shaped
    ``[..., n, 1]`` (a Patch is accepted too); ``a`` and ``b`` may be
    learnable tensors.
    """
    if hasattr(radii, "local_points"):
        radii = np.linalg.norm(radii.local_points, axis=-1, keepdims=True)
    d = ad.sigmoid(ad.sub(a, ad.mul(b, radii)))
    return ad.div(d, ad.reduce_sum(d, axis=-2))


def linear_weights(radii):
    """Fixed linear fall-off ``1 - r`` (normalized), an alternative weighting."""
    d = np.clip(1.0 - np.asarray(radii, dtype=np.float64), 0.0, None)
    return ad.Tensor(d / d.sum(axis=-2, keepdims=True))


def _focus_weights(params, prefix, radii, cfg):
    """Simplex weights rescaled by the row count before they touch features.

    The rescale keeps weighted features at the scale of the unweighted ones
    (mean weight 1 instead of 1/n); it is a fixed reparametrization of the
    next affine layer and leaves the relative weighting untouched.
    """
    if not cfg.use_weight_w:
        return None
    if cfg.weight_variant == "linear":
        w = linear_weights(radii)
    else:
        w = distance_weights(radii, params[f"{prefix}.w_a"], params[f"{prefix}.w_b"])
    return ad.mul(w, float(radii.shape[-2]))


def patch_neighbors(points, n_k):
    """Indices of the ``n_k`` nearest patch points of every patch point (self first)."""
    points = np.asarray(points, dtype=np.float64)
    diff = points[..., :, None, :] - points[..., None, :, :]
    d2 = np.einsum("...ijk,...ijk->...ij", diff, diff)
    if n_k >= d2.shape[-1]:
        return np.argsort(d2, axis=-1, kind="stable")[..., :n_k]
    # candidates up to the n_k-th smallest distance, then a stable (distance, index) order
    kth = np.partition(d2, n_k - 1, axis=-1)[..., n_k - 1:n_k]
    masked = np.where(d2 <= kth, d2, np.inf)
    return np.argsort(masked, axis=-1, kind="stable")[..., :n_k]


def per_point_features(points, params, cfg, neighbors=None):
    """Point-wise embedding fused with a max-pooled dense graph descriptor.

    ``points`` is ``[..., N, 3]`` (or a Patch); output ``[..., N, c]`` keeps
    the patch row order.
    """
    if hasattr(points, "local_points"):
        points = points.local_points
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[-2]
    if cfg.dense_layers > 0 and cfg.n_k >= n:
        raise ConfigError(f"n_k={cfg.n_k} must be smaller than the patch size {n}")
    branches = []
    if cfg.use_pointwise:
        branches.append(mlp(params, "feat.point", ad.Tensor(points), cfg.standardize))
    if cfg.dense_layers > 0:
        if neighbors is None:
            neighbors = patch_neighbors(points, cfg.n_k)
        if points.ndim == 2:
            pj = points[neighbors]
        else:
            pj = points[np.arange(points.shape[0])[:, None, None], neighbors]
        pi = np.broadcast_to(points[..., :, None, :], pj.shape)
        edges = [ad.Tensor(np.concatenate([pi, pj - pi], axis=-1))]
        for level in range(cfg.dense_layers):
            edges.append(mlp(params, f"feat.graph.{level}", list(edges)))
            edges[-1] = ad.leaky_relu(edges[-1])
        fused = mlp(params, "feat.graph.fuse", list(edges))
        local, _ = ad.maxpool_points(fused, axis=-2)
        branches.append(_squeeze_points(local))
    return mlp(params, "feat.fuse", branches, cfg.standardize)


def _squeeze_points(t):
    # [..., n, 1, c] -> [..., n, c]
    out = ad.Tensor(t.value[..., 0, :], (t,), "squeeze")
    if t.requires_grad:
        out.requires_grad = True
        out.backward_fn = lambda g: ad._accumulate(t, g[..., None, :])
    return out


def layer_p(x, radii, params, prefix, out_rows, cfg):
    """Pooled-summary layer: ``alpha(beta(max_j gamma(w_j x_j)), x_i)`` for the first ``out_rows`` rows.

    With the layer ablated (``.row`` parameters present) it degenerates to
    a per-row MLP on the retained rows.
    """
    n = x.shape[-2]
    if out_rows > n:
        raise ConfigError(f"cannot keep {out_rows} of {n} rows")
    if radii.shape[-2] != n:
        raise ad.GraphError(f"{radii.shape[-2]} distances for {n} feature rows")
    if f"{prefix}.row.0.weight" in params:
        return mlp(params, f"{prefix}.row", ad.prefix(x, out_rows), cfg.standardize)
    w = _focus_weights(params, prefix, radii, cfg)
    h = x if w is None else ad.rowscale(x, w)
    pooled, _ = ad.maxpool_points(mlp(params, f"{prefix}.gamma", h, cfg.standardize))
    summary = mlp(params, f"{prefix}.beta", pooled, cfg.standardize)
    # the single summary row broadcasts over the retained rows inside the affine
    return mlp(params, f"{prefix}.alpha", [summary, ad.prefix(x, out_rows)], cfg.standardize)


def block_f1(x, radii, params, prefix, cfg):
    """Size-reducing residual block: ``[P1(x)]_{n/b} + P2(P1(x))``."""
    n = x.shape[-2]
    if n % cfg.b:
        raise ConfigError(f"{n} rows not divisible by b={cfg.b}")
    m = n // cfg.b
    r = radii[..., :n, :]
    xk = layer_p(x, r, params, f"{prefix}.p1", n, cfg)
    return ad.add(ad.prefix(xk, m), layer_p(xk, r, params, f"{prefix}.p2", m, cfg))


def block_f2(x, radii, params, prefix, cfg):
    """Same-size residual block: ``P1(x) + P1'(P1(x))``."""
    n = x.shape[-2]
    r = radii[..., :n, :]
    xk = layer_p(x, r, params, f"{prefix}.p1", n, cfg)
    return ad.add(xk, layer_p(xk, r, params, f"{prefix}.p2", n, cfg))


def cross_scale_compensation(x, y, radii, params, prefix, cfg):
    """Modulate pre-block features by attention conditioned on post-block ones.

    ``x`` are the features entering the F1 block, ``y`` the block output;
    both are aligned on the sorted prefix of ``y``'s length.
    """
    variant = cfg.compensation_variant
    m = y.shape[-2]
    if m > x.shape[-2] or x.shape[-1] != y.shape[-1]:
        raise ad.GraphError(f"compensation: x {x.shape} vs y {y.shape}")
    xs = ad.prefix(x, m)
    if variant == "none":
        return y
    if variant == "add":
        return ad.add(xs, y)
    if variant == "concat":
        return mlp(params, f"{prefix}.cat", [xs, y], cfg.standardize)
    q = mlp(params, f"{prefix}.theta_q", y)
    k = mlp(params, f"{prefix}.theta_k", xs)
    v = mlp(params, f"{prefix}.theta_v", xs)
    delta = mlp(params, f"{prefix}.theta_delta", ad.add(q, k), cfg.standardize)
    gate = mlp(params, f"{prefix}.mu", delta, cfg.standardize)
    if variant == "softmax1":
        gate = ad.softmax(gate, axis=-1)
    elif variant == "softmax2":
        gate = ad.softmax(gate, axis=-2)
    mod = ad.mul(v, gate)
    w = _focus_weights(params, prefix, radii[..., :m, :], cfg)
    if w is not None:
        mod = ad.rowscale(mod, w)
    if variant == "eta_add":
        return mlp(params, f"{prefix}.eta", ad.add(mod, y), cfg.standardize)
    return mlp(params, f"{prefix}.eta", [mod, y], cfg.standardize)


def predict_normal(x, radii, params, cfg):
    """Weighted max-pool head.

    Returns the unit query normal ``[..., 1, 3]``, unit neighbor normals
    ``[..., N_o, 3]`` and coplanarity weights ``tau`` ``[..., N_o, 1]``.
    """
    n = x.shape[-2]
    if n < 1:
        raise ad.GraphError("head needs at least one row")
    tau = ad.sigmoid(mlp(params, "head.xi", x))
    h = ad.rowscale(x, tau)
    w = _focus_weights(params, "head", radii[..., :n, :], cfg)
    if w is not None:
        h = ad.rowscale(h, w)
    pooled, _ = ad.maxpool_points(h)
    normal = ad.normalize(mlp(params, "head.delta", pooled))
    neighbors = ad.normalize(mlp(params, "head.nbr", x))
    return normal, neighbors, tau


def pca_frame(points):
    """Rotation ``[..., 3, 3]`` whose columns are the patch principal axes, smallest first.

    Columns are reordered so the local z axis is the smallest-variance
    direction; the frame is a constant (no gradient flows through it).
    """
    from .baselines import covariance, eigh3

    _, v = eigh3(covariance(points))
    return v[..., [2, 1, 0]]


def _rotate_back(t, frame):
    # row vectors in the local frame -> world: n_world = n_local @ frame^T
    return ad.matmul(t, ad.Tensor(np.swapaxes(frame, -1, -2)))


def forward_points(points, params, cfg, neighbors=None):
    """Full forward pass on sorted, normalized patch coordinates ``[..., N, 3]``.

    With ``cfg.pca_align`` the network sees the patch in its principal
    frame and its normals are rotated back, so outputs are always in the
    caller's coordinates.
    """
    cfg.validate()
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-2] != cfg.N:
        raise ConfigError(f"patch has {points.shape[-2]} points, model expects N={cfg.N}")
    radii = np.linalg.norm(points, axis=-1, keepdims=True)
    r = radii[..., 0]
    if np.any(np.diff(r, axis=-1) < -1e-12 * np.maximum(r[..., 1:], 1.0)):
        raise ValueError("patch rows must be sorted by distance to the query")
    radii_t = radii  # constant
    frame = None
    if cfg.pca_align:
        frame = pca_frame(points)
        points = points @ frame

    x = per_point_features(points, params, cfg, neighbors)
    rows = [x.shape[-2]]
    for s in range(cfg.L):
        y = block_f1(x, radii_t, params, f"f1.{s}", cfg)
        x = cross_scale_compensation(x, y, radii_t, params, f"comp.{s}", cfg)
        rows.append(x.shape[-2])
    for j in range(cfg.n_f2):
        block = block_f1 if cfg.f2_as_f1 else block_f2
        x = block(x, radii_t, params, f"f2.{j}", cfg)
        rows.append(x.shape[-2])
    normal, nbr, tau = predict_normal(x, radii_t, params, cfg)
    if frame is not None:
        normal, nbr = _rotate_back(normal, frame), _rotate_back(nbr, frame)
    return Prediction(normal, nbr, tau, tuple(rows))


def model_forward(patch, params, cfg):
    """Forward one Patch; see ``forward_points`` for the batched core."""
    return forward_points(patch.local_points, params, cfg)


def model_forward_batch(patches, params, cfg):
    return forward_points(np.stack([p.local_points for p in patches]), params, cfg)
