"""Training loop, inference and evaluation runners."""

import csv
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .baselines import estimate_normals
from .data import make_rng, parse_key_values, sample_queries
from .geometry import SpatialIndex, extract_patches
from .losses import DEFAULT_PGP_THRESHOLDS, EvalReport, LossWeights, pgp_svg, total_loss
from .model import ModelConfig, forward_points, init_params, model_forward
from .params import AdamWState, ModelParams, adamw_step, load_checkpoint, lr_at_epoch, save_checkpoint, tensors_from

log = logging.getLogger(__name__)

LOSS_LOG = "loss.csv"
CHECKPOINT = "model.ckpt"
MODEL_CONFIG = "model.cfg"


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(N=256, c=64))
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    lr_factor: float = 0.2
    milestones: tuple = None  # None: halfway and three quarters through, like 400/600 of 800
    epochs: int = 50
    queries_per_shape: int = 200
    batch_size: int = 32
    weight_decay: float = 1e-2
    seed: int = 0
    checkpoint_every: int = 10

    def validate(self):
        self.model.validate()
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        ms = list(self.effective_milestones())
        if ms != sorted(ms) or (self.epochs > 0 and any(m >= self.epochs for m in ms)):
            raise ValueError(f"milestones {ms} must be ascending and below epochs={self.epochs}")
        if self.batch_size < 1 or self.queries_per_shape < 1 or self.epochs < 0:
            raise ValueError("batch size and query count must be >= 1, epochs >= 0")
        return self

    def effective_milestones(self):
        if self.milestones is None:
            return (self.epochs // 2, (3 * self.epochs) // 4) if self.epochs >= 4 else ()
        return tuple(self.milestones)

    def lr_for(self, epoch):
        return lr_at_epoch(epoch, self.lr, self.effective_milestones(), self.lr_factor)


def full_run_config(**overrides):
    """Full-scale protocol: 800 epochs, 1000 queries per shape, N=800, c=128."""
    return RunConfig(model=ModelConfig(), epochs=800, queries_per_shape=1000,
                     milestones=(400, 600), **overrides)


def desk_run_config(**overrides):
    return RunConfig(**overrides)


_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"model", "loss_weights"}
_LOSS_KEYS = {"lambda1": "query", "lambda2": "neighbors", "lambda3": "coplanarity"}


def run_config_from_text(text, base=None, **overrides):
    """key=value text; model options share the namespace (``N=256``, ``c=64``...)."""
    run = base or RunConfig()
    kv = {**parse_key_values(text), **overrides}
    model_kv, loss_kv = {}, {}
    for key, value in kv.items():
        if key in _RUN_KEYS:
            current = getattr(run, key)
            if key == "milestones":
                value = tuple(int(v) for v in str(value).replace(",", " ").split())
            else:
                value = type(current)(value)
            setattr(run, key, value)
        elif key in _LOSS_KEYS:
            loss_kv[_LOSS_KEYS[key]] = float(value)
        else:
            model_kv[key] = value
    if model_kv:
        run.model = ModelConfig.from_text(run.model.to_text(), **model_kv)
    if loss_kv:
        lw = run.loss_weights
        run.loss_weights = LossWeights(**{**{k: getattr(lw, k) for k in ("query", "neighbors", "coplanarity")}, **loss_kv})
    return run.validate()


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list
    lrs: list


def _stream_seed(root, *labels):
    return int(make_rng(root, *labels).integers(0, 2 ** 62))


def train(run, clouds, out_dir=None, params=None, progress=None):
    """Fit the model on patches drawn from ``clouds`` (with ground-truth normals).

    Each optimizer step accumulates the gradients of ``batch_size`` patches
    one at a time.  Writes ``loss.csv``, ``model.cfg`` and ``model.ckpt``
    under ``out_dir`` when given.
    """
    run.validate()
    cfg = run.model
    for cloud in clouds:
        if cloud.normals is None:
            raise TrainingError(f"shape {cloud.name!r} has no ground-truth normals")
    params = params if params is not None else init_params(cfg, _stream_seed(run.seed, "init"))
    state = AdamWState(lr=run.lr, weight_decay=run.weight_decay)
    indexes = [SpatialIndex(c) for c in clouds]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / MODEL_CONFIG).write_text(cfg.to_text())
        with open(out / LOSS_LOG, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "mean_loss", "lr"])

    epoch_losses, lrs = [], []
    for epoch in range(run.epochs):
        state.lr = run.lr_for(epoch)
        items = []
        for si, cloud in enumerate(clouds):
            qseed = _stream_seed(run.seed, "epoch", epoch, "shape", si)
            queries = sample_queries(cloud, run.queries_per_shape, qseed)
            patches = extract_patches(cloud, indexes[si], queries, cfg.N)
            items += [(si, qseed, p) for p in patches]
        order = make_rng(run.seed, "order", epoch).permutation(len(items))

        total = 0.0
        for start in range(0, len(order), run.batch_size):
            batch = order[start:start + run.batch_size]
            params.zero_grad()
            for i in batch:
                si, qseed, patch = items[i]
                loss = total_loss(model_forward(patch, params, cfg), patch, clouds[si].normals, run.loss_weights)
                value = float(loss.value)
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, shape {si} ({clouds[si].name}), "
                        f"query {patch.query_index}; patch seed {qseed} (root seed {run.seed})")
                total += value
                ad.backward(ad.mul(loss, 1.0 / len(batch)))
            adamw_step(params, params.grads(), state)
        mean = total / len(order)
        epoch_losses.append(mean)
        lrs.append(state.lr)
        log.info("epoch %d loss %.6f lr %.3g", epoch, mean, state.lr)
        if progress is not None:
            progress(epoch, mean, state.lr)
        if out is not None:
            with open(out / LOSS_LOG, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, f"{mean:.9g}", f"{state.lr:.9g}"])
            if run.checkpoint_every and (epoch + 1) % run.checkpoint_every == 0:
                save_checkpoint(out / CHECKPOINT, params)
    if out is not None:
        save_checkpoint(out / CHECKPOINT, params)
    return TrainResult(params, epoch_losses, lrs)


# ---------------------------------------------------------------------------
# inference


def predict_normals(params, cfg, cloud, queries=None, index=None, batch=8):
    """Unit normals for ``queries`` (default: all points) from frozen weights."""
    frozen = tensors_from(params.snapshot() if isinstance(params, ModelParams) else params)
    index = index if index is not None else SpatialIndex(cloud)
    queries = np.arange(len(cloud)) if queries is None else np.asarray(queries, dtype=np.int64)
    out = np.empty((len(queries), 3))
    for start in range(0, len(queries), batch):
        patches = extract_patches(cloud, index, queries[start:start + batch], cfg.N)
        pts = np.stack([p.local_points for p in patches])
        out[start:start + len(patches)] = forward_points(pts, frozen, cfg).normal.value[:, 0, :]
    return out


def load_model(checkpoint, cfg=None):
    """Checkpoint plus its config (``model.cfg`` next to it unless given)."""
    checkpoint = Path(checkpoint)
    if cfg is None:
        cfg_path = checkpoint.with_name(MODEL_CONFIG)
        if not cfg_path.exists():
            raise FileNotFoundError(f"no model config given and {cfg_path} missing")
        cfg = ModelConfig.from_text(cfg_path.read_text())
    arrays = load_checkpoint(checkpoint)
    params = init_params(cfg)
    if set(arrays) != set(params.names()):
        missing = sorted(set(params.names()) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(params.names()))[:3]
        raise ValueError(f"checkpoint does not match config (missing {missing}, unexpected {extra})")
    params.load_values(arrays)
    return params, cfg


def estimate(cloud, estimator="pff", checkpoint=None, cfg=None, queries=None, k=16):
    if estimator in ("pca", "jet"):
        return estimate_normals(cloud, k, estimator, queries=queries)
    if estimator != "pff":
        raise ValueError(f"unknown estimator {estimator!r}")
    params, cfg = load_model(checkpoint, cfg)
    return predict_normals(params, cfg, cloud, queries)


def evaluate(pred, gt, thresholds=DEFAULT_PGP_THRESHOLDS, out_dir=None, svg=True):
    """Angular errors, RMSE and PGP; optionally written as pgp.csv / pgp.svg / report.txt."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"{len(pred)} predicted normals vs {len(gt)} ground-truth normals")
    report = EvalReport.from_normals(pred, gt, thresholds)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "pgp.csv")
        if svg:
            (out / "pgp.svg").write_text(pgp_svg(report.pgp))
        lines = [f"points {len(report.errors)}", f"rmse_deg {report.rmse:.6f}"]
        lines += [f"pgp_{t:g} {f:.6f}" for t, f in report.pgp if t in (5.0, 10.0, 20.0, 30.0)]
        (out / "report.txt").write_text("\n".join(lines) + "\n")
    return report


def root_seed(default):
    """``PFF_SEED`` overrides the configured root seed."""
    value = os.environ.get("PFF_SEED")
    return int(value) if value not in (None, "") else default


# ---------------------------------------------------------------------------
# the desk shape mix

DESK_KINDS = ("plane", "sphere", "cylinder")
DESK_TRAIN_NOISE = (0.0, 0.006)
DESK_TEST_NOISE = 0.006


def desk_shapes(seed, noise_levels, count=10000, kinds=DESK_KINDS):
    """One cloud per (kind, noise level); shape and noise seeds derive from ``seed``."""
    from .data import CorruptionSpec, ShapeSpec, corrupt, synth_shape

    clouds = []
    for kind in kinds:
        spec = ShapeSpec(kind=kind, count=count, seed=_stream_seed(seed, "shape", kind))
        clean = synth_shape(spec)
        for frac in noise_levels:
            noise = CorruptionSpec(noise_sigma_frac=frac, seed=_stream_seed(seed, "noise", kind, frac))
            cloud = corrupt(clean, noise)
            clouds.append(type(cloud)(cloud.points, cloud.normals, f"{kind}-noise{frac:g}"))
    return clouds


def desk_training_set(seed=0, count=10000):
    return desk_shapes(seed, DESK_TRAIN_NOISE, count)


def desk_test_set(seed=1000, count=10000):
    """Held-out noisy shapes: different surface samples and noise draws."""
    return desk_shapes(seed, (DESK_TEST_NOISE,), count)
