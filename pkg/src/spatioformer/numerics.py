"""Dense float64 tensors with reverse-mode gradients, plus Adam, the learning
rate schedule, dropout, seeded random streams and the parameter checkpoint.

The graph is recorded eagerly: every operation returns a new ``Tensor`` that
remembers its parents and a closure propagating the output gradient back to
them. ``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError

DTYPE = np.float64


# --------------------------------------------------------------------------
# random streams


class RngStream:
    """Seeded random stream; ``(seed, stream_id)`` fully determines the draws."""

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF])
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, stream_id: int) -> "RngStream":
        # children share the seed and live on a disjoint stream id range
        return RngStream(self.seed, (self.stream_id + 1) * 1_000_003 + int(stream_id))

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


# --------------------------------------------------------------------------
# tensors


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, _parents=(), _backward=None, name: str | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    # -- graph ------------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if grad is None:
            if self.values.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.values)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, backward):
    rg = any(p.requires_grad for p in parents)
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite value produced by tensor operation")
    return Tensor(values, rg, parents if rg else (), backward if rg else None)


def _check_finite(*ts):
    for t in ts:
        if not np.all(np.isfinite(t.values)):
            raise NumericError("non-finite tensor input")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values + b.values, (a, b), lambda g: (g, g))


def neg(a) -> Tensor:
    return _make(-a.values, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def back(g):
        return (g * bv if a.requires_grad else None, g * av if b.requires_grad else None)

    return _make(av * bv, (a, b), back)


def reciprocal(a) -> Tensor:
    out = 1.0 / a.values
    return _make(out, (a,), lambda g: (-g * out * out,))


def power(a, p: float) -> Tensor:
    av = a.values
    return _make(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def sqrt(a) -> Tensor:
    out = np.sqrt(a.values)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    mask = a.values > 0
    return _make(a.values * mask, (a,), lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.values
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), back)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), back)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.values.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    n = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i, j) -> Tensor:
    return _make(np.swapaxes(a.values, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a, shape) -> Tensor:
    return _make(np.broadcast_to(a.values, shape).copy(), (a,), lambda g: (g,))


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), back)


def take(a, index, axis: int) -> Tensor:
    """Slice ``a`` along ``axis`` with a python slice or integer array."""
    sl = [slice(None)] * a.ndim
    sl[axis] = index
    sl = tuple(sl)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, sl, g)
        return (out,)

    return _make(a.values[sl], (a,), back)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    a = as_tensor(a)
    _check_finite(a)
    out = a.values - a.values.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * power(var + eps, -0.5) * gain + bias


def dropout(a, rate: float, rng: RngStream | None, training: bool) -> Tensor:
    """Inverted dropout. Identity (the same object) when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("active dropout needs an RngStream")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a * keep


def conv2d(x, w, b) -> Tensor:
    """Stride-1, zero-padding-1 convolution of ``x`` (N,C,H,W) with 3x3 kernels ``w`` (F,C,3,3)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    if c != c2 or (kh, kw) != (3, 3):
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    xp = np.pad(x.values, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # cols: (N, C, H, W, 3, 3)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    out = np.einsum("nchwij,fcij->nfhw", cols, w.values, optimize=True) + b.values[None, :, None, None]
    wv = w.values

    def back(g):
        gw = np.einsum("nfhw,nchwij->fcij", g, cols, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i : i + h, j : j + wd] += np.einsum("nfhw,fc->nchw", g, wv[:, :, i, j], optimize=True)
        return gxp[:, :, 1:-1, 1:-1], gw, gb

    return _make(out, (x, w, b), back)


def mse(pred, target) -> Tensor:
    d = pred - as_tensor(target)
    return (d * d).mean()


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place Adam update with decoupled weight decay.

    ``params`` maps names to Tensors; ``grads`` maps names to arrays. Names
    missing from ``grads`` are left untouched. Non-finite gradients reject the
    whole update and leave the step counter as is.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k!r} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r}; update rejected")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        p = params[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.values = p.values - update - state.lr * state.weight_decay * p.values


@dataclass
class LrSchedule:
    """Linear warmup followed by cosine annealing with warm restarts."""

    base_lr: float = 1e-3
    warmup_steps: int = 0
    period_steps: int = 1000
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.min_lr <= self.base_lr:
            raise ValueError("need 0 <= min_lr <= base_lr")
        if self.period_steps < 1 or self.warmup_steps < 0:
            raise ValueError("period_steps must be >= 1 and warmup_steps >= 0")

    @classmethod
    def for_run(cls, base_lr: float, total_steps: int, warmup_frac: float = 0.05, min_lr: float = 0.0):
        warm = int(round(warmup_frac * total_steps))
        return cls(base_lr, warm, max(1, total_steps - warm), min_lr)


def lr_at(schedule: LrSchedule, step: int) -> float:
    s = schedule
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    t = (step - s.warmup_steps) % s.period_steps
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * t / s.period_steps))


# --------------------------------------------------------------------------
# checkpoint file

CKPT_MAGIC = b"SPFORM01"


def save_checkpoint(path, arrays: dict, extra: dict | None = None) -> None:
    """Write named float64 arrays: magic, u64 manifest length, JSON manifest, payloads."""
    entries, offset = [], 0
    blobs = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = {"tensors": entries, "extra": extra or {}}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic at offset 0: {raw[:8]!r}")
    if len(raw) < 16:
        raise DataError(f"{path}: truncated checkpoint header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint manifest at offset 16") from exc
    base = 16 + n
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 8 * count > len(raw):
            raise DataError(f"{path}: truncated payload for {e['name']!r} at offset {start}")
        out[e["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(e["shape"]).astype(DTYPE)
    return out, manifest.get("extra", {})
