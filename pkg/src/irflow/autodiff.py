"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations record themselves on the active :class:`Tape`; with no tape active
they run as plain numpy (handy for inference and finite differences)::

    with Tape() as tape:
        loss = mean(relu(matmul(x, w)))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeMismatch(ValueError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class NonScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations in execution order; replays them backwards once."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``."""
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        touched = {id(loss): loss}
        # records are in execution order, so reversed order is reverse-topological
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g if out.grad is None else out.grad + g
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    gi = _unbroadcast(gi, inp.shape)
                k = id(inp)
                touched[k] = inp
                grads[k] = gi if k not in grads else grads[k] + gi
        # leaves: parameters and inputs that no record produced
        for k, g in grads.items():
            t = touched[k]
            t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    (tape or Tape.current()).backward(loss)


def _record(out_data, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    tape = Tape.current()
    need = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=need)
    if need:
        tape.records.append((out, tuple(inputs), fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural ops


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def fn(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record(a.data @ b.data, (a, b), fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", old, shape) from None
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, fn)


def take(a: Tensor, index) -> Tensor:
    """Gather rows (axis 0) with an integer index array of any shape (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"take: index out of range for {n} rows")

    def fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), fn)


embedding_lookup = take


def scatter_add(values: Tensor, src: np.ndarray, dst: np.ndarray, size: int) -> Tensor:
    """``out[dst[k]] += values[src[k]]`` into a zero vector of length ``size``."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    out = np.zeros(size, dtype=DTYPE)
    np.add.at(out, dst, values.data[src])
    k = values.shape[0]

    def fn(g):
        return (np.bincount(src, weights=g[dst], minlength=k).astype(DTYPE),)

    return _record(out, (values,), fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _record(out, (a,), fn)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (a,), fn)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatch("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def fn(g):
        gx = g * gamma.data
        dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), fn)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch("cross_entropy", logits.shape, targets.shape)
    n = logits.shape[0]
    lsm = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -lsm[rows, targets].mean()

    def fn(g):
        d = np.exp(lsm)
        d[rows, targets] -= 1.0
        return (g * d / n,)

    return _record(np.asarray(loss), (logits,), fn)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeMismatch("bce_with_logits", logits.shape, y.shape)
    x = logits.data
    # -[y log s + (1-y) log(1-s)] = softplus(x) - y x
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()
    n = x.size

    def fn(g):
        return (g * (_sigmoid(x) - y) / n,)

    return _record(np.asarray(loss), (logits,), fn)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise L2 distance between two (N, d) tensors; zero rows get zero gradient."""
    if a.shape != b.shape:
        raise ShapeMismatch("euclidean_distance", a.shape, b.shape)
    diff = a.data - b.data
    dist = np.sqrt((diff**2).sum(axis=-1))

    def fn(g):
        safe = np.where(dist > 0, dist, 1.0)
        unit = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)
        ga = g[..., None] * unit
        return ga, -ga

    return _record(dist, (a, b), fn)


def hinge(a: Tensor) -> Tensor:
    """max(0, a)."""
    return relu(a)


# --------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, lr: float = 5e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, a in self.m.items():
            out[f"adam.m.{k}"] = a
        for k, a in self.v.items():
            out[f"adam.v.{k}"] = a
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[len("adam.m."):]: a.copy() for k, a in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: a.copy() for k, a in arrays.items() if k.startswith("adam.v.")}


def optimizer_step(params: dict[str, Tensor], state: AdamW, lr: float, weight_decay: float | None = None) -> None:
    if weight_decay is not None:
        state.weight_decay = weight_decay
    state.step(params, lr)


# --------------------------------------------------------------------------
# finite differences


def numerical_gradient(f: Callable[[], float], p: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to every entry of ``p``."""
    grad = np.zeros_like(p.data)
    flat, gflat = p.data.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||); absolute difference when both are ~0."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale_ = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / scale_ if scale_ > floor else diff


# --------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, little-endian float64 payload

_MAGIC = b"IRFLOWCK"


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, payload, offset = [], [], 0
    for name, a in arrays.items():
        buf = np.ascontiguousarray(a, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(buf)})
        payload.append(buf)
        offset += len(buf)
    header = json.dumps({"tensors": entries, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in payload:
            fh.write(buf)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        a = np.frombuffer(raw[start : start + e["nbytes"]], dtype="<f8").astype(DTYPE)
        arrays[e["name"]] = a.reshape(e["shape"])
    return arrays, header["meta"]


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
