"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` appends a node to
a thread-local tape. :func:`backward` walks that tape in reverse, accumulates
gradients into the leaf tensors, and frees the tape.

Shape mixing is deliberately narrow: elementwise arithmetic accepts either two
tensors of identical shape or a tensor and a scalar. Anything else needs an
explicit :func:`broadcast_to` at the call site.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradReport",
    "tensor",
    "parameter",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "clear_tape",
    "apply",
    "matmul",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "concat",
    "stack",
    "broadcast_to",
    "linear",
    "layer_norm",
    "conv2d",
    "maximum",
    "minimum",
    "relu",
    "sigmoid",
    "softplus",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _TapeState(threading.local):
    def __init__(self) -> None:
        self.nodes: list = []
        self.enabled = True


_state = _TapeState()


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def is_grad_enabled() -> bool:
    return _state.enabled


def clear_tape() -> None:
    """Drop every recorded node without computing gradients."""
    _state.nodes.clear()


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tensor:
    """A float64 array optionally participating in the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, _neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, _reciprocal(other))
        return _mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return _mul(_reciprocal(self), other)

    def __pow__(self, exponent):
        return _pow(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    # shape and reductions --------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return _transpose(self, axes)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return _sum(self, axis, keepdims) * (1.0 / n)

    def exp(self):
        return _exp(self)

    def log(self):
        return _log(self)

    def abs(self):
        return _abs(self)

    def sqrt(self):
        return _pow(self, 0.5)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def apply(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record ``fn`` for the backward pass.

    ``fn`` receives the upstream gradient and returns one gradient array (or
    ``None``) per entry of ``inputs``.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out.is_leaf = False
    track = _state.enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        _state.nodes.append(_Node(out, tuple(inputs), fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The tape is consumed and cleared. Leaves that the loss does not depend on
    keep whatever gradient they already held (zeros after ``zero_grad``).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("backward called on a non-finite loss")
    nodes = _state.nodes
    grads = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = inp.grad + gi if inp.grad is not None else np.array(gi, dtype=np.float64)
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        if loss.is_leaf and loss.requires_grad:
            loss.grad = loss.grad + np.ones_like(loss.data)
    finally:
        nodes.clear()


# elementwise -------------------------------------------------------------


def _is_scalar(x) -> bool:
    return not isinstance(x, (Tensor, np.ndarray)) or np.ndim(x) == 0


def _scalar_value(x):
    return x.data if isinstance(x, Tensor) else x


def _add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor) and b.shape == a.shape:
        return apply(a.data + b.data, (a, b), lambda g: (g, g))
    if isinstance(b, Tensor) and b.ndim == 0:
        return apply(a.data + b.data, (a, b), lambda g: (g, g.sum()))
    if isinstance(b, Tensor) and a.ndim == 0:
        return apply(a.data + b.data, (a, b), lambda g: (g.sum(), g))
    if isinstance(b, np.ndarray) and b.shape == a.shape:
        return apply(a.data + b, (a,), lambda g: (g,))
    if _is_scalar(b):
        return apply(a.data + float(b), (a,), lambda g: (g,))
    raise ShapeError(f"cannot add shapes {a.shape} and {np.shape(_scalar_value(b))}")


def _neg(a: Tensor) -> Tensor:
    return apply(-a.data, (a,), lambda g: (-g,))


def _mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        ad, bd = a.data, b.data
        if a.shape == b.shape:
            return apply(ad * bd, (a, b), lambda g: (g * bd, g * ad))
        if b.ndim == 0:
            return apply(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum()))
        if a.ndim == 0:
            return apply(ad * bd, (a, b), lambda g: ((g * bd).sum(), g * ad))
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    if isinstance(b, np.ndarray) and b.ndim > 0:
        if b.shape != a.shape:
            raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
        return apply(a.data * b, (a,), lambda g: (g * b,))
    s = float(b)
    return apply(a.data * s, (a,), lambda g: (g * s,))


def _reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return apply(out, (a,), lambda g: (-g * out * out,))


def _pow(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad**p
    return apply(out, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def _exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply(out, (a,), lambda g: (g * out,))


def _log(a: Tensor) -> Tensor:
    ad = a.data
    return apply(np.log(ad), (a,), lambda g: (g / ad,))


def _abs(a: Tensor) -> Tensor:
    ad = a.data
    return apply(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _np_sigmoid(a.data)
    return apply(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return apply(out, (a,), lambda g: (g * _np_sigmoid(ad),))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"maximum needs equal shapes, got {a.shape} and {b.shape}")
    pick_a = a.data >= b.data
    return apply(np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"minimum needs equal shapes, got {a.shape} and {b.shape}")
    pick_a = a.data <= b.data
    return apply(np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


# shape -------------------------------------------------------------------


def _reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def _transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return apply(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _getitem(a: Tensor, index) -> Tensor:
    src_shape = a.shape

    def fn(g):
        full = np.zeros(src_shape)
        np.add.at(full, index, g)
        return (full,)

    return apply(np.array(a.data[index]), (a,), fn)


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    src_shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src_shape).copy(),)

    return apply(np.asarray(out, dtype=np.float64), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    n = len(tensors)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return apply(np.stack([t.data for t in tensors], axis=axis), tensors, fn)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over repeated axes."""
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)

    def fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return apply(np.broadcast_to(a.data, shape).copy(), (a,), fn)


# linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes, if any, must match exactly (batched product, no broadcasting).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return apply(ad @ bd, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``x`` of shape [..., in] and weight [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    in_dim = wd.shape[0]

    def fn(g):
        gx = g @ wd.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, in_dim).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply(out, inputs, fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.size == 0 or x.ndim == 0 or x.shape[-1] < 1:
        raise ValueError("softmax_lastdim needs a non-empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return apply(out, (x,), fn)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    if x.size == 0 or x.ndim == 0:
        raise ValueError("log_softmax_lastdim needs a non-empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return apply(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def fn(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        return gx, (flat_g * xhat.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0)

    return apply(xhat * gd + beta.data, (x, gamma, beta), fn)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Single-image 2-D convolution.

    x: [C_in, H, W]; weight: [C_out, C_in, k, k]; returns [C_out, H_out, W_out].
    """
    c_in, h, w = x.shape
    c_out, c_in_w, k, k2 = weight.shape
    if c_in != c_in_w or k != k2:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[1:]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    wd = weight.data
    # cols[c, di, dj, y, x] = xp[c, di + stride*y, dj + stride*x]
    cols = np.empty((c_in, k, k, ho, wo))
    for di in range(k):
        for dj in range(k):
            cols[:, di, dj] = xp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride]
    cols2 = cols.reshape(c_in * k * k, ho * wo)
    out = (wd.reshape(c_out, -1) @ cols2).reshape(c_out, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def fn(g):
        g2 = g.reshape(c_out, ho * wo)
        gw = (g2 @ cols2.T).reshape(wd.shape)
        gcols = (wd.reshape(c_out, -1).T @ g2).reshape(c_in, k, k, ho, wo)
        gxp = np.zeros((c_in, hp, wp))
        for di in range(k):
            for dj in range(k):
                gxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += gcols[:, di, dj]
        gx = gxp[:, padding : hp - padding, padding : wp - padding] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply(out, inputs, fn)


# gradient checking --------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of a central-difference gradient check."""

    max_rel_error: dict = field(default_factory=dict)
    tol: float = 1e-4
    passed: bool = True

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self) -> str:
        lines = [f"grad_check {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})"]
        for key, err in self.max_rel_error.items():
            lines.append(f"  {key}: {err:.3e}")
        return "\n".join(lines)


def grad_check(
    forward: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare tape gradients with central differences.

    ``forward`` takes no arguments and reads the current values of ``params``.
    It returns either the scalar objective or a 1-D vector of terms whose sum
    is the objective. For a vector, each term is differenced separately and
    the differences are summed exactly, so rounding of a large total does not
    swamp small derivatives.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. With
    ``max_coords`` set, each parameter is checked on a random coordinate subset.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    params = list(params)
    saved = [p.grad for p in params]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)
    clear_tape()
    with _enabled():
        loss = forward()
    if loss.ndim > 1 or loss.data.size == 0 or not np.isfinite(loss.data).all():
        clear_tape()
        raise FloatingPointError(f"forward must return finite terms, got shape {loss.shape}")
    backward(loss if loss.data.size == 1 and loss.ndim == 0 else loss.sum())
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    report = GradReport(tol=tol)
    with no_grad():
        for idx, p in enumerate(params):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            worst = 0.0
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = _finite_terms(forward())
                flat[c] = orig - h
                fm = _finite_terms(forward())
                flat[c] = orig
                num = math.fsum(fp - fm) / (2.0 * h)
                ana = analytic[idx].reshape(-1)[c]
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
            report.max_rel_error[f"{idx}:{p.name}" if p.name else f"param{idx}"] = worst
    report.passed = report.worst <= tol
    for p, g, f in zip(params, saved, flags):
        p.grad = g
        p.requires_grad = f
    return report


def _finite_terms(t: Tensor) -> np.ndarray:
    v = t.data.reshape(-1)
    if not np.isfinite(v).all():
        raise FloatingPointError("forward returned a non-finite value during grad_check")
    return v


@contextmanager
def _enabled():
    prev = _state.enabled
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev
