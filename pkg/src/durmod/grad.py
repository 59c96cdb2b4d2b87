"""Small dense-tensor library with reverse-mode automatic differentiation.

Only the operations the duration model needs are provided. Every op takes
:class:`Tensor` inputs (numpy arrays are wrapped as constants), computes its
value eagerly and records a closure that maps the output gradient back to its
inputs. :func:`backward` walks the recorded graph in reverse topological order
and accumulates gradients additively, so tensors with fan-out work as expected.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar keeps model code readable
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Backpropagate from ``root``; leaf gradients accumulate into ``.grad``."""
    if not root.requires_grad:
        raise ValueError("backward() called on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise ShapeError(f"implicit gradient needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    order = _topo_order(root)
    # interior gradients live here so leaves keep their own accumulated .grad
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


# ----------------------------------------------------------------- reductions


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def mean_pool_time(x) -> Tensor:
    """Average a ``C x T`` sequence over time, returning ``C x 1``."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"mean_pool_time expects C x T, got shape {x.shape}")
    T = x.shape[1]
    return _make(x.data.mean(axis=1, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / T, x.shape).copy(),))


# --------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def linear(x, W, bias=None) -> Tensor:
    """``W @ x + bias`` for channel-major ``x`` (``C_in x T``)."""
    out = matmul(W, x)
    return out if bias is None else add(out, bias)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(data, ts, back)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), back)


# ------------------------------------------------------------ convolution / GLU


def conv1d(x, kernels, bias=None, padding: str = "same") -> Tensor:
    """1-D convolution of ``C_in x T`` input with ``C_out x C_in x k`` kernels.

    ``same`` pads ``(k-1)/2`` on both sides and needs odd ``k``; ``causal`` pads
    ``k-1`` zeros on the left so output ``t`` sees inputs ``<= t`` only.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim != 2 or kernels.data.ndim != 3:
        raise ShapeError(f"conv1d: expected 2-D input and 3-D kernels, got {x.shape} and {kernels.shape}")
    c_out, c_in, k = kernels.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv1d: channel mismatch, input {x.shape} vs kernels {kernels.shape}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"conv1d: same padding needs odd kernel width, got {k}")
        left = right = (k - 1) // 2
    elif padding == "causal":
        left, right = k - 1, 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    T = x.shape[1]
    xp = np.zeros((c_in, T + left + right))
    xp[:, left:left + T] = x.data
    # cols[c, m, t] = xp[c, t + m]
    cols2 = np.stack([xp[:, m:m + T] for m in range(k)], axis=1).reshape(c_in * k, T)
    kmat = kernels.data.reshape(c_out, c_in * k)
    out = kmat @ cols2

    def back(g):
        dk = (g @ cols2.T).reshape(kernels.shape)
        dcols = (kmat.T @ g).reshape(c_in, k, T)
        dxp = np.zeros_like(xp)
        for m in range(k):
            dxp[:, m:m + T] += dcols[:, m, :]
        return (dxp[:, left:left + T], dk)

    result = _make(out, (x, kernels), back)
    return result if bias is None else add(result, bias)


def glu(x) -> Tensor:
    """Gated linear unit: first channel half times sigmoid of the second half."""
    x = _as_tensor(x)
    C2 = x.shape[0]
    if C2 % 2:
        raise ShapeError(f"glu needs an even channel count, got {C2}")
    C = C2 // 2
    a, b = x.data[:C], x.data[C:]
    s = _sigmoid(b)

    def back(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=0),)

    return _make(a * s, (x,), back)


# ------------------------------------------------------------------ attention


def masked_softmax(scores, allowed) -> Tensor:
    """Softmax over axis 0 restricted to ``allowed`` cells.

    Works on a single score vector or column-wise on a ``T_s x T`` matrix.
    Blocked entries are exactly zero in the output and receive no gradient.
    """
    scores = _as_tensor(scores)
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != scores.shape:
        raise ShapeError(f"masked_softmax: mask shape {allowed.shape} vs scores {scores.shape}")
    if not allowed.any(axis=0).all():
        raise ValueError("masked_softmax: a column has no allowed entries")
    z = np.where(allowed, scores.data, -np.inf)
    z = z - z.max(axis=0, keepdims=True)
    e = np.where(allowed, np.exp(z), 0.0)
    p = e / e.sum(axis=0, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=0, keepdims=True)
        return (np.where(allowed, p * (g - dot), 0.0),)

    return _make(p, (scores,), back)


def sample_one_hot(p, rng: np.random.Generator, tol: float = 1e-4) -> Tensor:
    """Draw a one-hot sample per column of ``p``; straight-through gradient.

    The forward value is the discrete draw. The backward pass hands the
    incoming gradient to ``p`` unchanged, as if ``p`` itself had been used.
    """
    p = _as_tensor(p)
    probs = p.data
    vector = probs.ndim == 1
    P = probs[:, None] if vector else probs
    if (P < -tol).any() or np.abs(P.sum(axis=0) - 1.0).max() > tol:
        raise ValueError("sample_one_hot: input columns are not probability distributions")
    cdf = np.cumsum(P, axis=0)
    u = rng.random(P.shape[1]) * cdf[-1]
    idx = (cdf <= u[None, :]).sum(axis=0)
    idx = np.minimum(idx, P.shape[0] - 1)
    # never land on a zero-probability cell through round-off
    for c in np.nonzero(P[idx, np.arange(P.shape[1])] <= 0)[0]:
        idx[c] = int(np.argmax(P[:, c]))
    onehot = np.zeros_like(P)
    onehot[idx, np.arange(P.shape[1])] = 1.0
    if vector:
        onehot = onehot[:, 0]
    return _make(onehot, (p,), lambda g: (g,))


def argmax_one_hot(p) -> Tensor:
    """Column-wise mode of ``p`` as one-hot, straight-through gradient."""
    p = _as_tensor(p)
    P = p.data[:, None] if p.data.ndim == 1 else p.data
    onehot = np.zeros_like(P)
    onehot[np.argmax(P, axis=0), np.arange(P.shape[1])] = 1.0
    if p.data.ndim == 1:
        onehot = onehot[:, 0]
    return _make(onehot, (p,), lambda g: (g,))


# ---------------------------------------------------------------------- losses


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error; the subgradient at zero is zero."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sgn = np.sign(diff)
    return _make(np.asarray(np.abs(diff).mean()), (pred, target),
                 lambda g: (g * sgn / n, -g * sgn / n))
