"""Parameter storage, layers, Adam, finite-difference checks, checkpoints.

Parameters live in a ``ParameterStore`` as leaf Tensors; layers are plain
functions over the store so a model is (store, config) with no hidden state.
Checkpoints are a little-endian named-array container tagged ``TRB-CKPT-1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"TRB-CKPT-1"


class ShapeError(ValueError):
    pass


class ParameterStore:
    """Named parameter arrays plus Adam moment accumulators.

    Shapes are fixed at creation; every update asserts finiteness.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value, dtype=ad.default_dtype()))
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self):
        return list(self.params.keys())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, t in self.params.items():
            out.add(k, t.data.copy())
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step_count = self.step_count
        return out


def init_weight(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_affine(store: ParameterStore, name: str, rng, d_in: int, d_out: int):
    store.add(f"{name}_W", init_weight(rng, d_in, (d_in, d_out)))
    store.add(f"{name}_b", np.zeros(d_out))


def affine(store: ParameterStore, name: str, x):
    return ad.add(ad.matmul(x, store[f"{name}_W"]), store[f"{name}_b"])


def add_gru(store: ParameterStore, name: str, rng, d_in: int, hidden: int):
    """Standard GRU cell: update/reset gates plus tanh candidate."""
    store.add(f"{name}_Wx", init_weight(rng, d_in, (d_in, 3 * hidden)))
    store.add(f"{name}_Wh_rz", init_weight(rng, hidden, (hidden, 2 * hidden)))
    store.add(f"{name}_Wh_n", init_weight(rng, hidden, (hidden, hidden)))
    store.add(f"{name}_b", np.zeros(3 * hidden))


def gru_step(store: ParameterStore, name: str, x, h, hidden: int):
    """One GRU step for a batch: x (B, Din), h (B, H) -> h' (B, H)."""
    a = ad.add(ad.matmul(x, store[f"{name}_Wx"]), store[f"{name}_b"])
    hr = ad.matmul(h, store[f"{name}_Wh_rz"])
    r = ad.sigmoid(ad.add(a[:, :hidden], hr[:, :hidden]))
    z = ad.sigmoid(ad.add(a[:, hidden:2 * hidden], hr[:, hidden:2 * hidden]))
    n = ad.tanh(ad.add(a[:, 2 * hidden:],
                       ad.matmul(ad.mul(r, h), store[f"{name}_Wh_n"])))
    return ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))


def run_gru(store: ParameterStore, name: str, xs, hidden: int, reverse=False):
    """Run a GRU over xs (B, T, D); returns the final hidden state (B, H)."""
    B, T = (xs.data if ad.is_tensor(xs) else np.asarray(xs)).shape[:2]
    h = np.zeros((B, hidden), dtype=ad.default_dtype())
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h = gru_step(store, name, xs[:, t, :], h, hidden)
    return h


def adam_step(store: ParameterStore, grads: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update in place; increments the step counter."""
    store.step_count += 1
    t = store.step_count
    for name, p in store.params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape "
                             f"{p.data.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise ad.NumericError(f"non-finite gradient for {name}")
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(p.data)):
            raise ad.NumericError(f"non-finite parameter after update: {name}")


@dataclass
class GradientReport:
    """Max relative analytic-vs-central-difference error per parameter."""

    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def gradient_check(loss_fn, store: ParameterStore, tolerance: float = 1e-4,
                   h: float = 1e-5, names=None) -> GradientReport:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must read parameters from ``store`` and return a scalar
    Tensor. The relative error uses an absolute floor of 1e-4 in the
    denominator so near-zero gradients are compared at ~1e-8 absolute.
    Requires double-precision parameters; central differences at h=1e-5
    are meaningless in float32.
    """
    for pname, t in store.params.items():
        if t.data.dtype != np.float64:
            raise ValueError(
                f"gradient_check needs float64 parameters, {pname} is "
                f"{t.data.dtype}")
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in store.params.items()}
    report = GradientReport(tolerance=tolerance)
    check_names = names if names is not None else store.names()
    for name in check_names:
        p = store.params[name].data
        fd = np.zeros_like(p)
        flat = p.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(np.sum(ad.as_array(loss_fn())))
            flat[i] = orig - h
            lm = float(np.sum(ad.as_array(loss_fn())))
            flat[i] = orig
            fd_flat[i] = (lp - lm) / (2.0 * h)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-4)
        report.errors[name] = float(np.max(np.abs(a - fd) / denom)) if p.size else 0.0
    return report


# ---------------------------------------------------------------------------
# checkpoint container

def save_checkpoint(store: ParameterStore, path):
    """Write parameters and optimizer state as little-endian doubles."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<iq", len(store.params), store.step_count))
        for name, t in store.params.items():
            for tag, arr in (("p", t.data), ("m", store.m[name]), ("v", store.v[name])):
                key = f"{tag}:{name}".encode()
                f.write(struct.pack("<i", len(key)))
                f.write(key)
                f.write(struct.pack("<i", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
                f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> ParameterStore:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}")
        n, step_count = struct.unpack("<iq", f.read(12))
        store = ParameterStore()
        store.step_count = step_count
        for _ in range(3 * n):
            (klen,) = struct.unpack("<i", f.read(4))
            key = f.read(klen).decode()
            (ndim,) = struct.unpack("<i", f.read(4))
            shape = struct.unpack(f"<{ndim}i", f.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape).copy()
            tag, name = key.split(":", 1)
            if tag == "p":
                store.add(name, arr)
            elif tag == "m":
                store.m[name] = arr
            else:
                store.v[name] = arr
        return store
