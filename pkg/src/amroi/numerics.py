"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Only the operations the multi-ROI model needs are provided. Every op records
its parents and a backward closure on the output tensor; ``Tensor.backward``
walks the reachable nodes in reverse creation order, which is a valid reverse
topological order because an op's inputs always exist before its output.

Gradients of leaf tensors (``requires_grad=True`` and created by the user)
accumulate across ``backward`` calls until ``zero_grad`` is called; gradients
of intermediate nodes are not retained.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ConfigurationError",
    "NonFiniteError",
    "no_grad",
    "corrupt_backward",
    "matmul",
    "conv2d",
    "max_pool2d",
    "global_avg_pool",
    "layer_norm",
    "softmax_rows",
    "gelu",
    "relu",
    "linear",
    "concat",
    "mean_rows",
    "mse",
    "gradcheck",
    "GradcheckReport",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """An op was configured with parameters that cannot produce a valid output."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf detected during debug validation."""


_ids = itertools.count()
_state = threading.local()

# op kinds whose backward is deliberately scaled; negative control for gradcheck
_CORRUPTED: set[str] = set()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording within the block (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def corrupt_backward(*ops: str, factor: float = 1.5):
    """Scale the backward output of the named op kinds by ``factor``.

    Exists only so the gradient checker can demonstrate that it catches a
    wrong backward rule.
    """
    added = [op for op in ops if op not in _CORRUPTED]
    _CORRUPTED.update(added)
    _state.corrupt_factor = factor
    try:
        yield
    finally:
        _CORRUPTED.difference_update(added)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._id = next(_ids)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data, parents: Sequence["Tensor"], op: str, backward: Callable) -> "Tensor":
        out = cls(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def validate(self) -> None:
        """Debug check: raise if data or grad hold NaN/Inf."""
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {self.op} output of shape {self.shape}")
        if self.grad is not None:
            if self.grad.shape != self.data.shape:
                raise DimensionError("grad shape differs from data shape")
            if not np.all(np.isfinite(self.grad)):
                raise NonFiniteError(f"non-finite gradient in {self.op} output")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` of every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad)

        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        factor = getattr(_state, "corrupt_factor", 1.0)
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            needs = tuple(p.requires_grad for p in t._parents)
            parent_grads = t._backward(g, needs)
            corrupt = t.op in _CORRUPTED
            for p, pg in zip(t._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if corrupt:
                    pg = pg * factor
                if p._id in grads:
                    grads[p._id] = grads[p._id] + pg
                else:
                    grads[p._id] = pg

    # -- operators --------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return Tensor._make(out, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return Tensor._make(out, (a, b), "mul", backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), "neg", lambda g, needs: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data

    def backward(g, needs):
        return (g * p * x ** (p - 1),)

    return Tensor._make(x**p, (a,), "pow", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu",
                        lambda g, needs: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g, needs):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * d,)

    return Tensor._make(out, (x,), "gelu", backward)


# -- shape ops ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {shape}") from exc
    return Tensor._make(out, (x,), "reshape", lambda g, needs: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(x.data.transpose(axes), (x,), "transpose",
                        lambda g, needs: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g, needs):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (x,), "getitem", backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``."""
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concat shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, xs, "concat", backward)


# -- reductions ---------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, (x,), "sum", backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the row axis (second to last): ``(..., n, D) -> (..., D)``."""
    if x.ndim < 2:
        raise DimensionError("mean_rows needs at least 2 dims")
    return tmean(x, axis=-2)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences."""
    target = _as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return tmean(diff * diff)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul batch shapes incompatible: {a.shape} @ {b.shape}") from exc

    def backward(g, needs):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if needs[0] else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if needs[1] else None
        return ga, gb

    return Tensor._make(out, (a, b), "matmul", backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in, out)."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


# -- normalisation / attention --------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), "softmax_rows", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis (population variance), then affine."""
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs D={d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g, needs):
        gx = ggamma = gbeta = None
        if needs[0]:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            ggamma = (g * xhat).sum(axis=lead)
        if needs[2]:
            gbeta = g.sum(axis=lead)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), "layer_norm", backward)


# -- convolution --------------------------------------------------------------


def _conv_out(n: int, k: int, stride: int, pad: int, what: str) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ConfigurationError(f"kernel {k} larger than padded {what} extent {n + 2 * pad}")
    if span % stride:
        raise ConfigurationError(
            f"non-integral output {what}: ({n}+2*{pad}-{k})/{stride}+1 is not an integer")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (C, H, W) or (B, C, H, W); ``w`` is (O, C, kh, kw); ``b`` is (O,).
    """
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects (B,C,H,W) and (O,C,kh,kw), got {x.shape}, {w.shape}")
    B, C, H, W = xd.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    Ho = _conv_out(H, kh, stride, pad, "height")
    Wo = _conv_out(W, kw, stride, pad, "width")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    xpt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols2 = cols.reshape(C * kh * kw, B * Ho * Wo)
    w2 = w.data.reshape(O, -1)
    out = (w2 @ cols2).reshape(O, B, Ho, Wo)
    if b is not None:
        out += b.data.reshape(O, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if single:
        out = out[0]

    def backward(g, needs):
        g4 = g[None] if single else g
        gt = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(O, -1)
        gx = gw = gb = None
        if needs[1]:
            gw = (gt @ cols2.T).reshape(w.shape)
        if b is not None and needs[2]:
            gb = gt.sum(axis=1)
        if needs[0]:
            dcols = (w2.T @ gt).reshape(C, kh, kw, B, Ho, Wo)
            dxp = np.zeros((C, B) + xp.shape[2:], dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
            dx = dxp[:, :, pad:pad + H, pad:pad + W].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(dx[0] if single else dx)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, "conv2d", backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max reduction over the last two axes."""
    H, W = x.shape[-2:]
    if H % size or W % size:
        raise ConfigurationError(f"max_pool2d: {H}x{W} not divisible by {size}")
    lead = x.shape[:-2]
    Hp, Wp = H // size, W // size
    blocks = x.data.reshape(lead + (Hp, size, Wp, size))
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    flat = blocks.transpose(perm).reshape(lead + (Hp, Wp, size * size))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g, needs):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        inv = tuple(np.argsort(perm))
        gblocks = gflat.reshape(lead + (Hp, Wp, size, size)).transpose(inv)
        return (gblocks.reshape(x.shape),)

    return Tensor._make(out, (x,), "max_pool2d", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``(..., C, H, W) -> (..., C)``."""
    if x.ndim < 3:
        raise DimensionError("global_avg_pool expects (..., C, H, W)")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise DimensionError("global_avg_pool needs H, W >= 1")
    return tmean(x, axis=(-2, -1))


# -- gradient checking ----------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst_index: tuple = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def gradcheck(f: Callable[..., Tensor], x, tol: float = 1e-4, step: float = 1e-5,
              floor: float = 1e-6, seed: int = 0) -> GradcheckReport:
    """Compare backward() gradients against central finite differences.

    ``x`` is a tensor or a sequence of tensors (all float64, requires_grad).
    ``f`` is called with the tensors as positional arguments. A non-scalar
    output is contracted with fixed random weights first. The relative error
    of each entry is ``|a - n| / max(|a|, |n|, floor)``; the report carries
    the maximum over all entries.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    weights: list[np.ndarray] = []

    def scalar(*args) -> Tensor:
        out = f(*args)
        if out.data.size == 1:
            return out.reshape(())
        if not weights:
            weights.append(np.random.default_rng(seed).standard_normal(out.shape))
        return (out * weights[0]).sum()

    scalar(*xs).backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]

    worst, worst_idx, count = 0.0, (), 0
    with no_grad():
        for k, t in enumerate(xs):
            flat = t.data.reshape(-1)
            an = analytic[k].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(scalar(*xs).data)
                flat[i] = orig - step
                fm = float(scalar(*xs).data)
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                rel = abs(an[i] - num) / max(abs(an[i]), abs(num), floor)
                count += 1
                if rel > worst:
                    worst, worst_idx = rel, (k, i)
    for t in xs:
        t.grad = None
    return GradcheckReport(float(worst), tol, count, worst_idx)
