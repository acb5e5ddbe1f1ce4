"""Dense tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active on the
current thread and an input requires gradients, the result is appended to the
tape together with a vector-Jacobian closure. Since nodes are appended in
creation order, the tape is already topologically sorted and ``backward``
simply walks it in reverse.

Layout convention for sequence data is channel-last: ``(batch, length, channels)``.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as _k


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, self.shapes))}")


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-d array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records the forward graph for one pass.

    Use as a context manager; tapes nest per thread and independent threads
    each see their own stack.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _record(out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    t = Tensor(out)
    stack = getattr(_local, "stack", None)
    if not stack:
        return t
    tape = stack[-1]
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
        tape.nodes.append(t)
    return t


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar ``loss`` w.r.t. every leaf tensor that requires grad.

    Returns a dict keyed by the leaf tensors themselves (identity hashed).
    """
    if loss.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    leaves: dict[int, Tensor] = {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._vjp is None:
        if loss.requires_grad:
            return {loss: grads[id(loss)]}
        raise ValueError("loss is not on the tape and does not require grad")
    if not tape.nodes or not any(n is loss for n in reversed(tape.nodes)):
        raise ValueError("loss was not recorded on this tape")
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if p._vjp is None:
                leaves[key] = p
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {leaves[k]: grads[k] for k in leaves if k in grads}


# --------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.data.shape, b.data.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    sa, sb = a.data.shape, b.data.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    try:
        out = ad * bd
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), vjp)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _record(xd * sig, (x,), lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),))


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x))."""
    xd = x.data
    # tanh(softplus(x)) = n / (n + 2) with n = e^x (e^x + 2); exact up to float rounding for x <= 20
    e = np.exp(np.minimum(xd, 20.0))
    n = e * (e + 2.0)
    tsp = n / (n + 2.0)

    def vjp(g):
        sig = e / (1.0 + e)
        return (g * (tsp + xd * (1.0 - tsp * tsp) * sig),)

    return _record(xd * tsp, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return _record(xd * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _record(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Iterable[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(out, xs, vjp)


def split(x: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into ``sections`` equal chunks along ``axis``."""
    n = x.shape[axis]
    if n % sections:
        raise ShapeError(f"split({sections})", x.shape)
    w = n // sections
    return [take_slice(x, i * w, (i + 1) * w, axis) for i in range(sections)]


def take_slice(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    idx = (slice(None),) * axis + (slice(start, stop),)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _record(x.data[idx], (x,), vjp)


def upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling along the length axis of ``(B, L, C)``."""
    if x.ndim != 3:
        raise ShapeError("upsample", x.shape)
    B, L, C = x.shape

    def vjp(g):
        return (g.reshape(B, L, factor, C).sum(axis=2),)

    return _record(np.repeat(x.data, factor, axis=1), (x,), vjp)


# --------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size
        return _record(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    n = int(np.prod([shape[a] for a in axes]))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / n,)

    return _record(x.data.mean(axis=axes), (x,), vjp)


def _extreme(x: Tensor, axis: int, op: str) -> Tensor:
    axis = axis % x.ndim
    fn = np.argmax if op == "max" else np.argmin
    idx = np.expand_dims(fn(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (x,), vjp)


def max_pool(x: Tensor, axis: int) -> Tensor:
    """Global max over ``axis``; the gradient routes to the first arg-max."""
    return _extreme(x, axis, "max")


def min_reduce(x: Tensor, axis: int) -> Tensor:
    return _extreme(x, axis, "min")


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _record(np.asarray((diff * diff).mean()), (a, b), vjp)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)``; the right operand is a weight matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    k, m = bd.shape

    def vjp(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.reshape(-1, k).T @ g.reshape(-1, m) if b.requires_grad else None
        return ga, gb

    return _record(ad @ bd, (a, b), vjp)


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channel-last 1D convolution.

    x: ``(B, L, Cin)``; w: ``(K, Cin, Cout)``; b: ``(Cout,)``.
    Output length is ``(L + 2*padding - K) // stride + 1``.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[2],):
        raise ShapeError("conv1d(bias)", w.shape, b.shape)
    B, L, Cin = x.shape
    K, _, Cout = w.shape
    Lp = L + 2 * padding
    Lout = (Lp - K) // stride + 1
    if Lout < 1:
        raise ShapeError("conv1d(length)", x.shape, w.shape)
    if padding:
        xp = np.zeros((B, Lp, Cin), dtype=x.dtype)
        xp[:, padding : padding + L, :] = x.data
    else:
        xp = x.data
    span = stride * (Lout - 1) + 1
    if K == 1:
        cols = xp[:, 0:span:stride, :]
    else:
        s0, s1, s2 = xp.strides
        cols = np.lib.stride_tricks.as_strided(xp, (B, Lout, K, Cin), (s0, s1 * stride, s1, s2))
    cols = cols.reshape(B * Lout, K * Cin)
    wm = w.data.reshape(K * Cin, Cout)
    out = cols @ wm
    out = out.reshape(B, Lout, Cout)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(B * Lout, Cout)
        gw = (cols.T @ g2).reshape(K, Cin, Cout) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wm.T).reshape(B, Lout, K, Cin)
            gxp = np.zeros((B, Lp, Cin), dtype=g.dtype)
            for k in range(K):
                gxp[:, k : k + span : stride, :] += gcols[:, :, k, :]
            gx = gxp[:, padding : padding + L, :] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, parents, vjp)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization over ``(B, L, C)`` with per-channel affine."""
    if x.ndim != 3 or x.shape[2] % groups or gamma.shape != (x.shape[2],) or beta.shape != (x.shape[2],):
        raise ShapeError(f"group_norm(groups={groups})", x.shape, gamma.shape, beta.shape)
    gd = gamma.data.astype(x.dtype, copy=False)
    out, xhat, inv = _k.group_norm_fwd(np.ascontiguousarray(x.data), groups, gd, beta.data.astype(x.dtype, copy=False), eps)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 1)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 1)) if beta.requires_grad else None
        gx = _k.group_norm_bwd(np.ascontiguousarray(g), xhat, inv, gd, groups) if x.requires_grad else None
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), vjp)


def sq_dist_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared distances: ``(B, P, d), (B, Q, d) -> (B, P, Q)``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError("sq_dist_matrix", a.shape, b.shape)
    ad, bd = a.data, b.data
    diff = ad[:, :, None, :] - bd[:, None, :, :]
    out = (diff * diff).sum(axis=-1)

    def vjp(g):
        w = 2.0 * g[..., None] * diff
        return (w.sum(axis=2) if a.requires_grad else None, -w.sum(axis=1) if b.requires_grad else None)

    return _record(out, (a, b), vjp)
