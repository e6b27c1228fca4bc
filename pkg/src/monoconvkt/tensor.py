"""Dense float64 tensors with reverse-mode autodiff and an Adam optimizer.

The library is deliberately small: row-major numpy storage, float64
everywhere, and a tape of closures built as ops execute. Desk-scale model
sizes make speed a non-issue, while full precision keeps finite-difference
gradient checks meaningful.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


class GradError(RuntimeError):
    """A gradient is missing or the tape is used incorrectly."""


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """An n-dimensional value that participates in reverse-mode differentiation.

    ``data`` is a float64 numpy array. ``grad`` holds the accumulated
    gradient (same shape as ``data``) after ``backward`` has run; it is kept
    on leaves and on nodes that set ``retain_grad``, and cleared elsewhere.
    The backward pass never mutates ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "retain_grad",
                 "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.retain_grad = False
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph plumbing ----------------------------------------------------

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add ``g`` into the gradient buffer.

        ``owned=True`` promises that ``g`` is freshly allocated and aliased
        nowhere else, letting the buffer be adopted without a copy.
        """
        if self.grad is None:
            if owned and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Run reverse-mode accumulation from this node.

        A scalar node seeds itself with 1.0; non-scalar roots need an
        explicit ``seed`` array of matching shape.
        """
        if seed is None:
            if self.size != 1:
                raise GradError("backward() on a non-scalar needs an explicit seed")
            seed = np.ones_like(self.data)
        else:
            seed = _as_array(seed)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != tensor shape {self.data.shape}")

        order = _toposort(self)
        self._accumulate(seed)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # Intermediate grads are dropped unless explicitly retained.
            if node._parents and not node.retain_grad:
                node.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_ensure_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list:
    """Reverse topological order of the graph reachable from ``root``."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return list(reversed(order))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, attaching the tape closure iff a parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accumulate(ga, owned=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            b._accumulate(gb, owned=gb is not g)

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accumulate(ga, owned=ga is not g)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data ** 2), b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _ensure_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g, owned=True)

    return _make(-a.data, (a,), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with stacked leading dims, numpy semantics."""
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


# -- nonlinearities ------------------------------------------------------------

def exp(a) -> Tensor:
    a = _ensure_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data, owned=True)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _ensure_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data, owned=True)

    return _make(np.log(a.data), (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _ensure_tensor(a)
    out_data = _sigmoid(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data), owned=True)

    return _make(out_data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + e^x), the positivity map used for decay parameters."""
    a = _ensure_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * _sigmoid(a.data), owned=True)

    return _make(out_data, (a,), backward)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _ensure_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * factor, owned=True)

    return _make(a.data * factor, (a,), backward)


def dropout(a, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: kept units scaled by 1/(1-p), identity at inference."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = _ensure_tensor(a)
    if not training or p == 0.0:
        def backward_id(g):
            if a.requires_grad:
                a._accumulate(g)
        return _make(a.data.copy(), (a,), backward_id)

    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * keep, owned=True)

    return _make(a.data * keep, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the unclamped region."""
    a = _ensure_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * inside, owned=True)

    return _make(out_data, (a,), backward)


# -- normalization -------------------------------------------------------------

def softmax(a, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` is an optional boolean array (broadcastable to ``a``) marking
    valid entries; invalid entries receive exactly zero weight. Rows with no
    valid entry come out all-zero.
    """
    a = _ensure_tensor(a)
    x = a.data
    if x.size == 0:
        return _make(x.copy(), (a,), lambda g: a._accumulate(g) if a.requires_grad else None)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        mx = np.max(x, axis=axis, keepdims=True, initial=-np.inf, where=mask)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        # exp written only at valid entries; invalid ones stay exactly zero
        e = np.zeros_like(x)
        np.exp(x - mx, out=e, where=mask)
    else:
        mx = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - mx)
    denom = e.sum(axis=axis, keepdims=True)
    safe = np.where(denom == 0.0, 1.0, denom)
    out_data = e / safe

    def backward(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - inner), owned=True)

    return _make(out_data, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _ensure_tensor(a), _ensure_tensor(gain), _ensure_tensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out_data = gain.data * xhat + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape), owned=True)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
            bias._accumulate(gb, owned=gb is not g)
        if a.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            a._accumulate((gy - m1 - xhat * m2) * inv, owned=True)

    return _make(out_data, (a, gain, bias), backward)


# -- reductions and reshaping ---------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None or keepdims:
            gg = g
        else:
            gg = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).copy(), owned=True)

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _ensure_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _ensure_tensor(a)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def swap_axes(a, ax1: int, ax2: int) -> Tensor:
    a = _ensure_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_ensure_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, tensors, backward)


def tslice(a, key) -> Tensor:
    """Basic slicing (slices / ints / ellipsis); no advanced indexing."""
    a = _ensure_tensor(a)
    out_data = a.data[key]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            a._accumulate(full, owned=True)

    return _make(out_data.copy(), (a,), backward)


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add backward."""
    table = _ensure_tensor(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}")
    out_data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
            table._accumulate(acc, owned=True)

    return _make(out_data, (table,), backward)


def select(a, mask: np.ndarray) -> Tensor:
    """Pick entries of ``a`` where boolean ``mask`` is True, as a 1-D tensor."""
    a = _ensure_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} != tensor shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[mask] = g
            a._accumulate(full, owned=True)

    return _make(a.data[mask].copy(), (a,), backward)


def stop_gradient(a) -> Tensor:
    return _ensure_tensor(a).detach()


# -- optimizer ------------------------------------------------------------------

class AdamState:
    """Adam accumulators for a fixed parameter list.

    Defaults: lr=0.001 with the conventional beta1=0.9, beta2=0.999,
    eps=1e-8. Moment buffers match their parameters' shapes; the step
    counter increases by one per call to :func:`adam_step`.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: AdamState) -> Sequence[Tensor]:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` entries must align with ``params``; a missing gradient is a
    usage error. The caller zeroes grads afterwards.
    """
    if len(params) != len(grads) or len(params) != len(state.params):
        raise GradError("params/grads/state lengths differ")
    for p, g in zip(params, grads):
        if g is None:
            raise GradError(f"missing gradient for parameter {p.name or p.shape}")
        if np.shape(g) != p.shape:
            raise ShapeError(f"grad shape {np.shape(g)} != param shape {p.shape}")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
