"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every operation applied to tensors that
require gradients records its inputs and a local backward rule; calling
:func:`backward` on a scalar result orders the recorded graph into a
:class:`Tape` and replays it in reverse, accumulating ``grad`` arrays.

Only the operations needed by the routing model are provided. Broadcasting
follows numpy rules, and gradients are summed back to the input shape.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InfeasibleError, NumericError, ShapeError

DTYPE = np.float64
MASK_FILL = -1e30
NORM_EPS = 1e-12

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

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

    def __truediv__(self, other):
        return mul(self, 1.0 / _as_array(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

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


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    on = x.data > 0
    _kink_record(x.data)
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def tanh_clip(x: Tensor, clip: float) -> Tensor:
    """``clip * tanh(x)``: bounds logits to [-clip, clip]."""
    y = np.tanh(x.data)
    return _make(clip * y, (x,), lambda g: (g * clip * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# -- shape and reduction -----------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in keys)


def index(x: Tensor, key) -> Tensor:
    basic = _is_basic(key)

    def bw(g):
        out = np.zeros_like(x.data)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(x.data[key], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows ``x[b, idx[b, k], :]`` for x of shape (B, M, D), idx (B, K)."""
    b = np.arange(x.shape[0])[:, None]

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (b, idx), g)
        return (out,)

    return _make(x.data[b, idx], (x,), bw)


def pick(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select ``x[..., idx[...]]`` along the last axis (one entry per row)."""
    idx = np.asarray(idx)[..., None]

    def bw(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _make(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), bw)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; both operands need ndim >= 2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # fold batch dims into rows: one BLAS call each way
        a2 = a.data.reshape(-1, a.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make((a2 @ b.data).reshape(*a.shape[:-1], b.shape[-1]), (a, b), bw2)

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


# -- normalized outputs ------------------------------------------------------


def _check_mask(mask, axis):
    if mask is not None and not np.all(np.any(mask, axis=axis)):
        raise InfeasibleError("softmax: every entry of some row is masked")


def softmax(x, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; ``mask`` marks feasible entries (True = keep).

    Masked entries receive exactly zero probability.
    """
    x = _as_tensor(x)
    _check_mask(mask, axis)
    z = x.data if mask is None else np.where(mask, x.data, MASK_FILL)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Log of :func:`softmax`; masked entries hold ``-inf``."""
    x = _as_tensor(x)
    _check_mask(mask, axis)
    z = x.data if mask is None else np.where(mask, x.data, MASK_FILL)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = e / s
    with np.errstate(divide="ignore"):
        out = z - np.log(s)
    if mask is not None:
        out = np.where(mask, out, -np.inf)

    def bw(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def instance_norm(x: Tensor, axis: int = -2, eps: float = NORM_EPS) -> Tensor:
    """Normalize each feature to zero mean and unit variance over ``axis``.

    No learned affine. For (B, N, D) input the default normalizes over nodes.
    """
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), bw)


def layer_scale_free_norm(x: Tensor, axis: int = -2) -> Tensor:
    return instance_norm(x, axis=axis)


# -- backward ----------------------------------------------------------------


@dataclass
class Tape:
    """Graph nodes reachable from a loss, in the order they were recorded."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` of every tensor that requires grad and reaches ``loss``.

    Leaf gradients accumulate across calls; interior gradients are reset.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape()
    tape = Tape.from_loss(loss)
    for node in tape.nodes:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = g
            else:
                p.grad = p.grad + g
    return tape


# -- finite-difference checking ----------------------------------------------


def _kink_record(data: np.ndarray):
    rec = getattr(_state, "kinks", None)
    if rec is not None:
        rec.append(data > 0)


@contextlib.contextmanager
def _record_kinks():
    prev = getattr(_state, "kinks", None)
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = prev


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    skipped_kinks: int
    worst: tuple[str, int] | None
    tol: float

    def __str__(self):
        where = f" at {self.worst[0]}[{self.worst[1]}]" if self.worst else ""
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"grad-check {verdict}: max_rel_error={self.max_rel_error:.3e}{where} "
            f"(tol={self.tol:g}, checked={self.checked}, skipped_kinks={self.skipped_kinks})"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` is re-evaluated with each parameter entry shifted by ``+h`` and
    ``-h``. Relative error is ``|a - n| / max(|a|, |n|, floor)``. Entries where
    a ReLU input changes sign between the two shifted evaluations straddle a
    kink, where central differences are meaningless; those are skipped and
    counted. With ``max_entries`` set, larger tensors are subsampled.
    """
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("grad_check: function value is not finite")
    backward(loss)

    def evaluate():
        with no_grad(), _record_kinks() as kinks:
            val = float(np.asarray(f().data).reshape(-1)[0])
        if not np.isfinite(val):
            raise NumericError("grad_check: function value is not finite")
        return val, kinks

    worst, worst_err, checked, skipped = None, 0.0, 0, 0
    for name, p in params.items():
        analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            fp, kp = evaluate()
            flat[i] = orig - h
            fm, km = evaluate()
            flat[i] = orig
            if any(not np.array_equal(a, b) for a, b in zip(kp, km)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (name, int(i))
    return GradCheckReport(worst_err, worst_err < tol, checked, skipped, worst, tol)
