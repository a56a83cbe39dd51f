"""Central-difference gradient checking."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: dict = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(build, inputs, tolerance=1e-5, h=1e-5, max_entries=None, rng=None):
    """Compare backprop gradients of ``build()`` against central differences.

    ``build`` is a zero-argument callable that constructs a scalar loss from
    the leaf tensors in ``inputs`` (a name -> Tensor map).  With
    ``max_entries`` only that many randomly chosen entries per input are
    probed, which keeps full-model checks affordable.
    """
    for t in inputs.values():
        t.value = np.ascontiguousarray(t.value)
        t.grad = None
    loss = build()
    ad.backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)).copy()
                for k, t in inputs.items()}

    rng = rng if rng is not None else np.random.default_rng(0)
    per_input = {}
    for name, t in inputs.items():
        flat = t.value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            up = float(build().value)
            flat[i] = orig - h
            down = float(build().value)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, float(relative_error(analytic[name].reshape(-1)[i], numeric)))
        per_input[name] = worst
    for t in inputs.values():
        t.grad = None
    return GradCheckReport(max(per_input.values(), default=0.0), per_input, tolerance)


# ---------------------------------------------------------------------------
# suites


def _projected(out, proj):
    # a random linear functional keeps every output entry in play
    return ad.sum_all(ad.mul(out, proj))


def _op_cases(rng):
    """``name -> (build(inputs), inputs)``; inputs avoid kinks by construction."""
    def t(*shape, lo=-1.0, hi=1.0):
        return ad.parameter(rng.uniform(lo, hi, size=shape))

    def away_from_zero(*shape):
        v = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return ad.parameter(v)

    def separated_rows(n, c):
        # distinct per-channel maxima so argmax is stable under +-h
        v = np.stack([rng.permutation(n) for _ in range(c)], axis=1) * 0.1
        return ad.parameter(v + rng.uniform(-0.01, 0.01, size=(n, c)))

    cases = {}

    def case(name, fn, **inputs):
        out_shape = fn(**inputs).shape
        proj = rng.standard_normal(out_shape)
        cases[name] = (lambda fn=fn, proj=proj, inputs=inputs: _projected(fn(**inputs), proj), inputs)

    case("add", lambda a, b: ad.add(a, b), a=t(4, 3), b=t(1, 3))
    case("sub", lambda a, b: ad.sub(a, b), a=t(4, 3), b=t(4, 3))
    case("neg", lambda a: ad.neg(a), a=t(4, 3))
    case("mul", lambda a, b: ad.mul(a, b), a=t(4, 3), b=t(4, 1))
    case("rowscale", lambda x, w: ad.rowscale(x, w), x=t(5, 3), w=t(5, 1, lo=0.1))
    case("div", lambda a, b: ad.div(a, b), a=t(4, 3), b=t(4, 1, lo=0.5, hi=2.0))
    case("exp", lambda a: ad.exp(a), a=t(4, 3))
    case("sigmoid", lambda a: ad.sigmoid(a), a=t(4, 3, lo=-5, hi=5))
    case("leaky_relu", lambda a: ad.leaky_relu(a), a=away_from_zero(4, 3))
    base = rng.uniform(-1, 1, size=(4, 3))
    gap = rng.uniform(0.1, 0.5, size=(4, 3)) * rng.choice([-1.0, 1.0], size=(4, 3))
    case("minimum", lambda a, b: ad.minimum(a, b), a=ad.parameter(base), b=ad.parameter(base + gap))
    case("matmul", lambda a, b: ad.matmul(a, b), a=t(2, 4, 3), b=t(3, 5))
    case("affine", lambda x, W, b: ad.affine(x, W, b), x=t(6, 4), W=t(4, 3), b=t(3))
    case("affine_multi", lambda x, s, W, b: ad.affine_multi([s, x], W, b),
         x=t(2, 6, 4), s=t(2, 1, 2), W=t(6, 3), b=t(3))
    case("concat", lambda a, b: ad.concat([a, b]), a=t(4, 2), b=t(4, 3))
    case("prefix", lambda a: ad.prefix(a, 3), a=t(5, 2))
    case("broadcast_row", lambda a: ad.broadcast_row(a, 4), a=t(1, 3))
    idx = rng.integers(0, 6, size=(6, 3))
    case("gather_rows", lambda a: ad.gather_rows(a, idx), a=t(6, 2))
    case("maxpool_points", lambda a: ad.maxpool_points(a)[0], a=separated_rows(6, 3))
    case("sum_all", lambda a: ad.sum_all(a), a=t(3, 3))
    case("mean_all", lambda a: ad.mean_all(a), a=t(3, 3))
    case("reduce_sum", lambda a: ad.reduce_sum(a, axis=-2), a=t(4, 3))
    case("reduce_mean", lambda a: ad.reduce_mean(a, axis=-1), a=t(4, 3))
    case("cross", lambda a, b: ad.cross(a, b), a=t(4, 3), b=t(4, 3))
    case("norm", lambda a: ad.norm(a), a=away_from_zero(4, 3))
    case("normalize", lambda a: ad.normalize(a), a=away_from_zero(4, 3))
    case("softmax", lambda a: ad.softmax(a, axis=-1), a=t(4, 5))
    case("standardize", lambda a: ad.standardize(a), a=t(6, 3))
    return cases


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)))


def ops_suite(seeds=20, tolerance=1e-5, h=1e-5):
    """Check every primitive over ``seeds`` random draws; ``{op: worst rel. error}``."""
    worst = {name: 0.0 for name in OP_NAMES}
    for seed in range(seeds):
        for name, (build, inputs) in _op_cases(np.random.default_rng(seed)).items():
            report = grad_check(build, inputs, tolerance, h)
            worst[name] = max(worst[name], report.max_rel_error)
    return worst


def model_suite(N=64, c=16, seed=0, tolerance=1e-3, h=1e-5, max_entries=4):
    """Finite-difference check of the full model under the total loss.

    Every parameter array is probed at ``max_entries`` random entries.
    Biases are drawn at random first so no unit sits on a kink.
    """
    from .data import make_rng, synth_shape, ShapeSpec
    from .geometry import SpatialIndex, extract_patch
    from .losses import total_loss
    from .model import ModelConfig, init_params, model_forward

    cfg = ModelConfig(N=N, c=c)
    cloud = synth_shape(ShapeSpec(kind="sphere", count=4 * N, seed=seed))
    patch = extract_patch(cloud, SpatialIndex(cloud), 0, N)
    params = init_params(cfg, seed)
    # zero biases put the query row (at the origin) exactly on the rectifier
    # kink; a generic point in parameter space is what the check is about
    jitter = make_rng(seed, "gradcheck", "bias")
    for name, t in params.items():
        if name.endswith(".bias"):
            t.value = jitter.uniform(-0.1, 0.1, size=t.shape)
    inputs = dict(params.items())

    def build():
        return total_loss(model_forward(patch, params, cfg), patch, cloud.normals)

    return grad_check(build, inputs, tolerance, h, max_entries=max_entries,
                      rng=make_rng(seed, "gradcheck"))
