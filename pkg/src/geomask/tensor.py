"""Small float64 tensor library with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients.  Node ids are
drawn from a monotonically increasing counter, so sorting reachable nodes by
id in descending order replays the graph in reverse insertion order.

Only the operations the point-cloud transformer needs are provided.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_ids = itertools.count()

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class InvalidMaskError(ValueError):
    """A key mask hides every key."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class DivergenceError(FloatingPointError):
    """Optimizer received a non-finite gradient."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward
        self._id = next(_ids)

    @property
    def shape(self) -> tuple:
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    # NaN/Inf anywhere propagates into the sum; far cheaper than isfinite().all()
    if not math.isfinite(data.sum()):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
    for p in parents:
        if p.requires_grad:
            return Tensor(data, True, op=op, parents=tuple(parents), backward=fn)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

    Gradients add onto whatever is already stored, so call ``zero_grad`` on
    the leaves between independent backward passes.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _result(out, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data * s, "scale", (a,), lambda g: (g * s,))
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data
    return _result(out, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {tuple(shape)}") from exc
    return _result(out, "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,),
                   lambda g: (g.transpose(inv),))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    out = xd * cdf

    def fn(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _result(out, "gelu", (x,), fn)


def max_pool(x: Tensor, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first arg-max."""
    xd = x.data
    axis = axis % xd.ndim
    if xd.shape[axis] == 0:
        raise ShapeError("max_pool over an empty axis")
    idx = np.expand_dims(xd.argmax(axis=axis), axis)
    out = np.take_along_axis(xd, idx, axis=axis).squeeze(axis)

    def fn(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, "max_pool", (x,), fn)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, "matmul", (a, b),
                   lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` applied over the last axis of ``x`` (any leading shape)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        raise ShapeError(f"linear: x{x.shape}, W{W.shape}, b{None if b is None else b.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out = out + b.data
    lead = xd.shape[:-1]

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ Wd.T).reshape(*lead, Wd.shape[0])
        gW = xd.reshape(-1, Wd.shape[0]).T @ g2
        return (gx, gW) if b is None else (gx, gW, g2.sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return _result(out, "linear", parents, fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: x{x.shape}, gain{gain.shape}, bias{bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, "layer_norm", (x, gain, bias), fn)


def masked_softmax(logits: Tensor, key_mask=None) -> Tensor:
    """Softmax over the last axis with hidden keys forced to exactly zero.

    ``key_mask`` is a boolean vector over the last axis; ``True`` hides that key.
    """
    ld = logits.data
    if key_mask is None:
        keep = np.ones(ld.shape[-1], dtype=bool)
    else:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (ld.shape[-1],):
            raise ShapeError(f"masked_softmax: mask {key_mask.shape} vs logits {ld.shape}")
        keep = ~key_mask
        if not keep.any():
            raise InvalidMaskError("every key is masked")
    if keep.all():
        p = ld - ld.max(axis=-1, keepdims=True)
    else:
        p = ld.copy()
        p[..., ~keep] = -np.inf
        p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, "masked_softmax", (logits,), fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the first axis of the per-row Euclidean distance (not squared).

    The gradient of a row with zero residual is taken to be zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim < 1 or a.shape[0] == 0:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    n = a.shape[0]
    diff = (a.data - b.data).reshape(n, -1)
    norms = np.sqrt((diff * diff).sum(axis=1))
    shape = a.shape

    def fn(g):
        safe = np.where(norms > 0.0, norms, 1.0)
        gd = (diff / safe[:, None]) * (np.where(norms > 0.0, 1.0, 0.0) / n)[:, None] * g
        gd = gd.reshape(shape)
        return gd, -gd

    return _result(np.asarray(norms.mean()), "mse", (a, b), fn)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay.  ``lr`` may be reassigned between steps.

    Parameter storage is moved into one flat buffer (each ``param.data``
    becomes a view into it) so an update is a handful of vector ops.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        sizes = [p.data.size for p in self.params]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        total = int(self._offsets[-1])
        self._flat = np.empty(total)
        self._m = np.zeros(total)
        self._v = np.zeros(total)
        self._g = np.zeros(total)
        for p, a, b in zip(self.params, self._offsets[:-1], self._offsets[1:]):
            self._flat[a:b] = p.data.ravel()
            p.data = self._flat[a:b].reshape(p.data.shape)

    def _views(self, buf: np.ndarray) -> list[np.ndarray]:
        return [buf[a:b].reshape(p.data.shape)
                for p, a, b in zip(self.params, self._offsets[:-1], self._offsets[1:])]

    @property
    def m(self) -> list[np.ndarray]:
        return self._views(self._m)

    @property
    def v(self) -> list[np.ndarray]:
        return self._views(self._v)

    def load_moments(self, m: Sequence[np.ndarray], v: Sequence[np.ndarray]) -> None:
        for dst, src in zip(self.m, m):
            dst[...] = src
        for dst, src in zip(self.v, v):
            dst[...] = src

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        g = self._g
        for p, a, b in zip(self.params, self._offsets[:-1], self._offsets[1:]):
            if p.grad is None:
                g[a:b] = 0.0
            else:
                g[a:b] = p.grad.ravel()
        if not math.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            bad = next(p for p in self.params if p.grad is not None and not np.all(np.isfinite(p.grad)))
            raise DivergenceError(f"non-finite gradient for parameter of shape {bad.shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        if self.weight_decay:
            self._flat *= 1.0 - self.lr * self.weight_decay
        self._m *= self.beta1
        self._m += (1.0 - self.beta1) * g
        self._v *= self.beta2
        self._v += (1.0 - self.beta2) * (g * g)
        denom = np.sqrt(self._v / c2)
        denom += self.eps
        self._flat -= (self.lr / c1) * self._m / denom


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numerical_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                   index: np.ndarray | None = None) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``param.data``.

    With ``index`` (flat positions) only those entries are perturbed; the rest stay 0.
    """
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size) if index is None else index:
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a-n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              floor: float = 1e-6, per_param: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences over ``params``.

    ``per_param`` limits the check to that many randomly chosen entries of each
    parameter, which keeps whole-model checks affordable.
    """
    for p in params:
        p.grad = None
    backward(f())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        index = None
        if per_param is not None and p.data.size > per_param:
            index = np.sort(rng.choice(p.data.size, per_param, replace=False))
        numeric = numerical_grad(f, p, h, index)
        if index is not None:
            analytic, numeric = analytic.reshape(-1)[index], numeric.reshape(-1)[index]
        worst = max(worst, relative_error(analytic, numeric, floor))
    for p in params:
        p.grad = None
    return worst
