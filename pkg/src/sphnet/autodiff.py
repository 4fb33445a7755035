"""A small dense reverse-mode differentiation engine on top of numpy.

Only the operations the point networks need are provided.  Every op returns a
new :class:`Tensor`; if any input requires gradients the result records its
parents and a closure mapping the output gradient to input gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_EPS = {np.dtype(np.float64): 1e-12, np.dtype(np.float32): 1e-6}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def max(self, axis):
        return max_(self, axis)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


def _make(data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims (both >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), np.asarray(1.0 / count, dtype=a.dtype))


def max_(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry only."""
    axis = axis % a.ndim
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (grad,)

    return _make(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def _norm_eps(dtype, eps):
    return NORM_EPS.get(np.dtype(dtype), 1e-6) if eps is None else eps


def l2norm(a: Tensor, axis: int, eps=None) -> Tensor:
    """``sqrt(sum(a**2, axis) + eps**2)``: smooth at the zero vector."""
    eps = _norm_eps(a.dtype, eps)
    out = np.sqrt((a.data * a.data).sum(axis=axis) + eps * eps)

    def backward(g):
        return (a.data * np.expand_dims(g / out, axis),)

    return _make(out, (a,), backward)


def segment_l2norm(a: Tensor, sizes: Sequence[int], eps=None) -> Tensor:
    """Guarded L2 norms over consecutive segments of the last axis.

    With ``sizes = (1, 3, 5, ...)`` this reduces a flat ``(l, m)`` axis to one
    value per degree.
    """
    eps = _norm_eps(a.dtype, eps)
    sizes = np.asarray(sizes)
    if sizes.sum() != a.shape[-1]:
        raise ValueError(f"segments {list(sizes)} do not cover axis of length {a.shape[-1]}")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    out = np.sqrt(np.add.reduceat(a.data * a.data, starts, axis=-1) + eps * eps)

    def backward(g):
        return (a.data * np.repeat(g / out, sizes, axis=-1),)

    return _make(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def repeat(a: Tensor, repeats: int, axis: int) -> Tensor:
    """``np.repeat`` along ``axis``; the adjoint sums each run of copies."""
    axis = axis % a.ndim

    def backward(g):
        shape = g.shape[:axis] + (a.shape[axis], repeats) + g.shape[axis + 1 :]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _make(np.repeat(a.data, repeats, axis=axis), (a,), backward)


def _flat_rows(index: np.ndarray, n: int) -> np.ndarray:
    batch = index.shape[0]
    offsets = (np.arange(batch) * n).reshape((batch,) + (1,) * (index.ndim - 1))
    return (index + offsets).reshape(-1)


def _scatter_rows(values: np.ndarray, flat_index: np.ndarray, n_rows: int) -> np.ndarray:
    # bincount per column beats np.add.at by a wide margin for our sizes
    cols = values.reshape(len(flat_index), -1)
    out = np.empty((n_rows, cols.shape[1]), dtype=values.dtype)
    for c in range(cols.shape[1]):
        out[:, c] = np.bincount(flat_index, weights=cols[:, c], minlength=n_rows)
    return out


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Batched row gather: ``a`` is ``(B, N, C)``, ``index`` is ``(B, ...)`` into ``N``.

    Output shape ``index.shape + (C,)``.
    """
    if a.ndim != 3 or index.shape[0] != a.shape[0]:
        raise ValueError(f"gather expects (B, N, C) data and (B, ...) index, got {a.shape}, {index.shape}")
    batch, n, c = a.shape
    flat = _flat_rows(index, n)
    out = a.data.reshape(batch * n, c)[flat].reshape(index.shape + (c,))

    def backward(g):
        return (_scatter_rows(g, flat, batch * n).reshape(a.shape),)

    return _make(out, (a,), backward)


def scatter_add(a: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Adjoint of :func:`gather`: sum rows of ``a`` (shape ``index.shape + (C,)``) into ``(B, n, C)``."""
    batch = index.shape[0]
    c = a.shape[-1]
    if a.shape[:-1] != index.shape:
        raise ValueError(f"scatter_add index {index.shape} does not match data {a.shape}")
    flat = _flat_rows(index, n)
    out = _scatter_rows(a.data, flat, batch * n).reshape(batch, n, c)

    def backward(g):
        return (g.reshape(batch * n, c)[flat].reshape(a.shape),)

    return _make(out, (a,), backward)


def dropout(a: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    """Inverted dropout with an explicit keep-mask (1 keep, 0 drop)."""
    scale = (mask / (1.0 - rate)).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax_np(x, axis))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)`` over the last axis."""
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    logp = log_softmax_np(logits.data)
    flat_logp = logp.reshape(-1, logp.shape[-1])
    flat_lab = labels.reshape(-1)
    count = len(flat_lab)
    loss = -flat_logp[np.arange(count), flat_lab].sum() / count

    def backward(g):
        grad = np.exp(flat_logp)
        grad[np.arange(count), flat_lab] -= 1.0
        return ((grad * (g / count)).reshape(logits.shape).astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Training-mode batch normalisation over every axis but the last.

    Returns ``(output, batch_mean, batch_var)``; variance is the biased one.
    """
    axes = tuple(range(x.ndim - 1))
    count = x.data.size // x.shape[-1]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gx = (gamma.data * inv / count) * (count * g - gb - xhat * gg)
        return gx, gg, gb

    return _make(out.astype(x.dtype), (x, gamma, beta), backward), mu, var


def batchnorm_inference(x: Tensor, gamma: Tensor, beta: Tensor, mean_, var, eps: float = 1e-5) -> Tensor:
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    scale = mul(gamma, inv)
    return add(mul(add(x, Tensor(-mean_.astype(x.dtype))), scale), beta)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_leaf: int
    worst_index: tuple
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    tolerance: float = 1e-5,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``fn()`` with central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is zero from dividing round-off
    by round-off.  ``max_entries`` samples that many coordinates per leaf.
    """
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]
    rng = np.random.default_rng(seed)
    worst = (0.0, -1, ())
    checked = 0
    for li, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, max_entries, replace=False)
        for e in entries:
            orig = flat[e]
            flat[e] = orig + step
            up = float(fn().data)
            flat[e] = orig - step
            down = float(fn().data)
            flat[e] = orig
            num = (up - down) / (2 * step)
            ana = analytic[li].reshape(-1)[e]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if err > worst[0]:
                worst = (err, li, np.unravel_index(e, leaf.shape))
    for leaf in leaves:
        leaf.grad = None
    return GradCheckReport(worst[0], worst[1], tuple(int(i) for i in worst[2]), checked, tolerance)
