"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node holding its parents and a closure
that maps the output gradient to per-parent gradients.  ``backward`` walks the
graph once in reverse topological order.  Data is held in numpy arrays; math
runs in float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TrainingError(RuntimeError):
    """Raised when an optimizer step sees a non-finite gradient."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
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
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------- operators
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


# ------------------------------------------------------------------ reductions
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# ----------------------------------------------------------------- structural
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul cannot broadcast {a.shape} x {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(a.data[index], dtype=DTYPE), (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(out, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(out, tensors, backward)


# ------------------------------------------------------------ composite fused
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        gx = gxhat = None
        gxhat = g * gain.data
        if x.requires_grad:
            gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _make(out, (x, gain, bias), backward)


def binary_cross_entropy(pred, target, eps: float = 1e-12) -> Tensor:
    """Element-wise BCE of probabilities ``pred`` against constant ``target``."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    p = np.clip(pred.data, eps, 1.0 - eps)
    out = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))

    def backward(g):
        return (g * (p - t) / (p * (1.0 - p)),)

    return _make(out, (pred,), backward)


def lstm_sequence(x, h0, c0, w_ih, w_hh, bias) -> Tensor:
    """Run an LSTM over ``x`` [N, T, I] from state (h0, c0) [N, H].

    Gate order is input, forget, candidate, output.  Returns [N, T, 2H]: the
    hidden states followed by the cell states at every step, so callers can
    slice either (the final cell state seeds the attractor decoder).
    """
    x, h0, c0 = as_tensor(x), as_tensor(h0), as_tensor(c0)
    w_ih, w_hh, bias = as_tensor(w_ih), as_tensor(w_hh), as_tensor(bias)
    n, steps, n_in = x.shape
    hid = w_hh.shape[0]
    if w_ih.shape != (n_in, 4 * hid):
        raise ShapeError(f"lstm input weight {w_ih.shape} does not fit input {x.shape}")
    xproj = (x.data.reshape(n * steps, n_in) @ w_ih.data).reshape(n, steps, 4 * hid) + bias.data
    gates = np.empty((n, steps, 4 * hid))
    hs = np.empty((n, steps, hid))
    cs = np.empty((n, steps, hid))
    tcs = np.empty((n, steps, hid))
    # sigmoid(z) = 0.5 tanh(z / 2) + 0.5, so one tanh call covers all four gates
    scale = np.full(4 * hid, 0.5)
    scale[2 * hid: 3 * hid] = 1.0
    shift = np.where(scale == 0.5, 0.5, 0.0)
    xproj *= scale
    whh_scaled = w_hh.data * scale
    h, c = h0.data, c0.data
    for t in range(steps):
        gt = gates[:, t]
        np.tanh(xproj[:, t] + h @ whh_scaled, out=gt)
        gt *= scale
        gt += shift
        c = gt[:, hid: 2 * hid] * c + gt[:, :hid] * gt[:, 2 * hid: 3 * hid]
        tc = np.tanh(c)
        h = gt[:, 3 * hid:] * tc
        hs[:, t], cs[:, t], tcs[:, t] = h, c, tc
    whh = w_hh.data
    out = np.concatenate([hs, cs], axis=-1)

    def backward(g):
        dh_ext, dc_ext = g[..., :hid], g[..., hid:]
        i, f = gates[..., :hid], gates[..., hid: 2 * hid]
        cand, o = gates[..., 2 * hid: 3 * hid], gates[..., 3 * hid:]
        c_prev = np.concatenate([c0.data[:, None, :], cs[:, :-1]], axis=1)
        # per-step local derivatives, precomputed outside the recurrence
        k_cell = np.stack([cand * i * (1.0 - i), c_prev * f * (1.0 - f),
                           i * (1.0 - cand * cand)], axis=2)
        k_out = tcs * o * (1.0 - o)
        k_h2c = o * (1.0 - tcs * tcs)
        dz_all = np.empty((n, steps, 4, hid))
        dh_next = np.zeros((n, hid))
        dc_next = np.zeros((n, hid))
        whh_t = whh.T
        for t in range(steps - 1, -1, -1):
            dh = dh_ext[:, t] + dh_next
            dc = dc_ext[:, t] + dc_next + dh * k_h2c[:, t]
            dz = dz_all[:, t]
            np.multiply(k_cell[:, t], dc[:, None, :], out=dz[:, :3])
            np.multiply(dh, k_out[:, t], out=dz[:, 3])
            dh_next = dz.reshape(n, 4 * hid) @ whh_t
            dc_next = dc * f[:, t]
        h_prev = np.concatenate([h0.data[:, None, :], hs[:, :-1]], axis=1)
        dz_flat = dz_all.reshape(n * steps, 4 * hid)
        d_whh = h_prev.reshape(n * steps, hid).T @ dz_flat
        d_wih = x.data.reshape(n * steps, n_in).T @ dz_flat
        d_b = dz_flat.sum(axis=0)
        dx = (dz_flat @ w_ih.data.T).reshape(n, steps, n_in) if x.requires_grad else None
        return (dx, dh_next, dc_next, d_wih, d_whh, d_b)

    return _make(out, (x, h0, c0, w_ih, w_hh, bias), backward)


# ------------------------------------------------------------- grad checking
def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6,
               indices: Iterable[tuple[int, ...]] | None = None, five_point: bool = False) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    ``x`` is perturbed in place and restored.  ``indices`` restricts the check
    to a subset of elements (useful for large parameter tensors).  The
    five-point stencil is fourth-order accurate, which allows a larger step and
    so less rounding noise when individual gradients are tiny.
    """
    if not x.requires_grad:
        x.requires_grad = True
    x.zero_grad()
    f(x).backward()
    analytic = x.grad.copy()
    x.zero_grad()
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst = 0.0
    with no_grad():
        for idx in indices:
            orig = x.data[idx]

            def at(k):
                x.data[idx] = orig + k * step
                return f(x).item()

            if five_point:
                numeric = (8.0 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12.0 * step)
            else:
                numeric = (at(1) - at(-1)) / (2.0 * step)
            x.data[idx] = orig
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ------------------------------------------------------------------ optimizer
@dataclass
class LinearWarmupDecay:
    """Linear warm-up from 0 to ``peak`` then linear decay to 0 at ``total``."""

    peak: float
    warmup: int
    total: int

    def __post_init__(self):
        if self.total < self.warmup or self.warmup < 0:
            raise ValueError("schedule needs 0 <= warmup <= total")

    def __call__(self, step: int) -> float:
        if step <= 0:
            return 0.0
        if step < self.warmup:
            return self.peak * step / self.warmup
        if step >= self.total:
            return 0.0
        if self.total == self.warmup:
            return self.peak
        return self.peak * (self.total - step) / (self.total - self.warmup)


@dataclass
class OptimizerState:
    schedule: Callable[[int], float]
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with bias correction, global-norm clipping and a step schedule."""

    def __init__(self, params: dict[str, Tensor], schedule: Callable[[int], float],
                 betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = 5.0):
        self.params = dict(params)
        self.state = OptimizerState(schedule=schedule)
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @property
    def lr(self) -> float:
        return self.state.schedule(self.state.step)

    def step(self) -> float:
        """Apply one update; returns the learning rate used."""
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        scale = 1.0
        if self.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        st = self.state
        st.step += 1
        lr = st.schedule(st.step)
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = p.grad * scale
            m = st.first.get(name)
            if m is None:
                m = st.first[name] = np.zeros_like(p.data)
                st.second[name] = np.zeros_like(p.data)
            v = st.second[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr
