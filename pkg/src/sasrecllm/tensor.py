"""Dense-tensor kernels with reverse-mode gradients.

A Tensor wraps a row-major numpy array plus an optional backward closure, so
a forward computation builds a tape that `backward()` replays in reverse
topological order. Weights are float32 by default; every reduction (matmul
inner sums, means, variances) accumulates in float64 before casting back, and
the whole graph runs in float64 when its inputs do (the gradient checker
relies on that).

Ops are pure functions of their inputs: no global state besides the
`no_grad` switch, so concurrent forward passes on disjoint data are safe.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import RngStream

DEFAULT_DTYPE = np.float32

# Additive pre-softmax mask value. exp(x) underflows to exactly +0.0 for
# x < -745, so masked attention weights are bit-exact zeros and causality
# holds at the bit level.
MASK_FILL = -1e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d array node in the computation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and isinstance(data, (np.ndarray, np.generic)):
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor initialized with non-finite entries")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # -- tape ------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed: float = 1.0) -> None:
        """Reverse-mode sweep from a scalar node; accumulates into .grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.full_like(self.data, seed)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                if node.trainable:
                    node._accumulate(g)
            elif node._backward is None:
                node._accumulate(g)
            if node._backward is not None:
                node._backward_into(g, grads)

    def _backward_into(self, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        def collect(parent: Tensor, pg: np.ndarray) -> None:
            if not parent.requires_grad:
                return
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=parent.data.dtype, copy=True)

        self._backward(g, collect)  # type: ignore[misc]

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable leaf: persistent grad buffer plus a freeze flag.

    Frozen parameters (`trainable=False`) receive no gradient and are never
    touched by the optimizer, so their bytes are invariant across steps.
    """

    __slots__ = ("_trainable",)

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self._trainable = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.requires_grad = self._trainable

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype_(self, dtype) -> None:
        """In-place dtype change (gradcheck promotes models to float64)."""
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g, collect):
        collect(a, _unbroadcast(g, a.data.shape))
        collect(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g, collect):
        collect(a, _unbroadcast(g * b.data, a.data.shape))
        collect(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bw)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    def bw(g, collect):
        collect(a, g * c)

    return _node(a.data * a.data.dtype.type(c), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with float64 inner accumulation.

    Supports 2-d and stacked (… × m × k) @ (… × k × p) operands with numpy
    broadcasting over the stack dimensions.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out64 = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64))
    dtype = np.result_type(a.data.dtype, b.data.dtype)

    def bw(g, collect):
        g64 = g.astype(np.float64)
        da = np.matmul(g64, b.data.astype(np.float64).swapaxes(-1, -2))
        db = np.matmul(a.data.astype(np.float64).swapaxes(-1, -2), g64)
        collect(a, _unbroadcast(da, a.data.shape).astype(a.data.dtype))
        collect(b, _unbroadcast(db, b.data.shape).astype(b.data.dtype))

    return _node(out64.astype(dtype), (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g, collect):
        collect(x, g * mask)

    return _node(np.where(mask, x.data, x.data.dtype.type(0)), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # stable two-sided form
    out = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    ).astype(x.data.dtype)

    def bw(g, collect):
        collect(x, g * out * (1.0 - out))

    return _node(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g, collect):
        collect(x, g * (1.0 - out * out))

    return _node(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g, collect):
        collect(x, g * out)

    return _node(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g, collect):
        collect(x, g / x.data)

    return _node(np.log(x.data), (x,), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def bw(g, collect):
        if axis is None:
            collect(x, np.broadcast_to(g.reshape(()), x.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            collect(x, np.broadcast_to(gg, x.data.shape).copy())

    return _node(out, (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul_scalar(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ---------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g, collect):
        collect(x, g.reshape(x.data.shape))

    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    def bw(g, collect):
        collect(x, g.transpose(np.argsort(axes)) if axes is not None else g.T)

    return _node(x.data.transpose(axes), (x,), bw)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, collect):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            collect(p, g[tuple(idx)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def take(x: Tensor, idx) -> Tensor:
    """Basic indexing/slicing; backward scatter-adds into the source shape."""

    def bw(g, collect):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        collect(x, full)

    return _node(x.data[idx], (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; duplicate ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )

    def bw(g, collect):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        collect(table, full)

    return _node(table.data[ids], (table,), bw)


# -- neural-net primitives ------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction.

    Stable for inputs up to ±1e4 and beyond; entries pushed below the
    underflow threshold (e.g. the additive causal mask) come out exactly 0.
    """
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)

    def bw(g, collect):
        inner = (g * out).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
        collect(x, out * (g - inner))

    return _node(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat64 = (x64 - mu) / sigma
    xhat = xhat64.astype(x.data.dtype)
    out = xhat * gain.data + bias.data

    def bw(g, collect):
        ghat = g * gain.data
        m1 = ghat.mean(axis=-1, keepdims=True, dtype=np.float64)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
        collect(x, ((ghat - m1 - xhat64 * m2) / sigma).astype(x.data.dtype))
        reduce_axes = tuple(range(g.ndim - 1))
        collect(gain, (g * xhat).sum(axis=reduce_axes, dtype=np.float64).astype(gain.data.dtype))
        collect(bias, g.sum(axis=reduce_axes, dtype=np.float64).astype(bias.data.dtype))

    return _node(out, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, mode: str, rng: RngStream | None = None) -> Tensor:
    """Inverted dropout: train-time scaling by 1/(1-rate), eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an RngStream")
    keep = (rng.uniform(x.data.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)

    def bw(g, collect):
        collect(x, g * keep)

    return _node(x.data * keep, (x,), bw)


BCE_CLAMP = 1e-7


def bce_loss(y_hat: Tensor, y: float) -> Tensor:
    """Binary cross-entropy of a scalar probability against a {0,1} label.

    The probability is clamped to [1e-7, 1-1e-7]; the gradient is the analytic
    (yc - y) / (yc (1 - yc)) inside the clamp window and 0 where clamped.
    """
    if y not in (0, 1, 0.0, 1.0):
        raise ValueError(f"bce label must be 0 or 1, got {y!r}")
    y = float(y)
    p = y_hat.data
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pc64 = pc.astype(np.float64)
    val = -(y * np.log(pc64) + (1.0 - y) * np.log(1.0 - pc64))
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)

    def bw(g, collect):
        d = (pc64 - y) / (pc64 * (1.0 - pc64))
        collect(y_hat, (g * np.where(inside, d, 0.0)).astype(y_hat.data.dtype))

    return _node(val.astype(y_hat.data.dtype), (y_hat,), bw)


def params_of(*groups) -> list[Parameter]:
    """Flatten nested iterables / dicts / modules into a Parameter list."""
    out: list[Parameter] = []

    def walk(obj):
        if isinstance(obj, Parameter):
            out.append(obj)
        elif isinstance(obj, dict):
            for v in obj.values():
                walk(v)
        elif isinstance(obj, (list, tuple)):
            for v in obj:
                walk(v)
        elif hasattr(obj, "named_parameters"):
            for _, p in obj.named_parameters():
                out.append(p)

    for g in groups:
        walk(g)
    return out
