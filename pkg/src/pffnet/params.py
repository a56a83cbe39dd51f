"""Named parameter store, AdamW, learning-rate schedule and checkpoints."""

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, parameter

CHECKPOINT_MAGIC = b"PFFCKPT1"


class CheckpointError(ValueError):
    pass


class ModelParams:
    """Ordered map from a stable dotted path to a trainable leaf tensor."""

    def __init__(self, arrays=None):
        self._tensors = OrderedDict()
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._tensors[name] = parameter(value)
        return self._tensors[name]

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def count(self):
        return sum(t.value.size for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.value)

    def grads(self):
        """Gradient arrays; parameters the last backward never touched read as zeros."""
        return OrderedDict(
            (k, t.grad if t.grad is not None else np.zeros_like(t.value))
            for k, t in self._tensors.items())

    def snapshot(self):
        """Frozen copies of the values, safe to share with inference workers."""
        return OrderedDict((k, t.value.copy()) for k, t in self._tensors.items())

    def load_values(self, arrays):
        for k, v in arrays.items():
            if k not in self._tensors:
                raise KeyError(f"unknown parameter {k!r}")
            if self._tensors[k].value.shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {self._tensors[k].value.shape}")
            self._tensors[k].value = np.array(v, dtype=np.float64)

    def copy(self):
        return ModelParams(self.snapshot())


def glorot_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state):
    """One AdamW update in place.

    Weight decay is decoupled: it shrinks the parameter directly and never
    enters the moment estimates.  A non-finite gradient rejects the whole
    step before anything is modified.
    """
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}; step rejected")
        if g.shape != params[name].value.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].value.shape}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        value = p.value * (1.0 - state.lr * state.weight_decay)
        p.value = value - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def lr_at_epoch(epoch, base_lr=1e-3, milestones=(400, 600), factor=0.2):
    """Step schedule: multiply by ``factor`` once per milestone reached."""
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * factor ** passed


# ---------------------------------------------------------------------------
# checkpoint container
#
# magic "PFFCKPT1", then one record per parameter until EOF:
#   u32 name length, name bytes (utf-8), u32 rank, rank x u64 dims,
#   prod(dims) x f64 payload.  All integers and floats little-endian.


def save_checkpoint(path, params):
    arrays = params.snapshot() if isinstance(params, ModelParams) else params
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, value in arrays.items():
            raw = name.encode("utf-8")
            value = np.asarray(value, dtype="<f8")  # tobytes() is C order; keeps rank 0
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            fh.write(value.tobytes())


def load_checkpoint(path):
    """Read a checkpoint into an ordered ``{name: float64 array}`` map."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    out = OrderedDict()
    pos = 8
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            if name in out:
                raise CheckpointError(f"{path}: duplicate parameter {name!r}")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out


def tensors_from(arrays):
    """Wrap frozen arrays as constant tensors (inference without grads)."""
    return OrderedDict((k, Tensor(v)) for k, v in arrays.items())
