"""Minimal dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays. Every differentiable kernel records its
parents and a backward rule; ``Tensor.backward`` walks the recorded graph in
reverse topological order exactly once and then releases it.

Broadcasting is deliberately narrow: elementwise binary kernels accept equal
shapes, or a second operand whose shape is a trailing suffix of the first
(bias-style). Anything else is a ShapeError naming both shapes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError, TapeError

_state = {"dtype": np.float32, "grad": True, "debug": False}


@contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` (e.g. ``np.float64`` for gradient checks)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextmanager
def debug_mode(enabled: bool = True):
    """Trap NaN/Inf produced by any kernel."""
    old = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = old


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        want = dtype if dtype is not None else _state["dtype"]
        self.data = np.ascontiguousarray(data, dtype=want)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise TapeError("backward already called on this loss; rebuild the graph first")
        if not self.requires_grad:
            raise TapeError("loss does not depend on any tensor that requires grad")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise TapeError(f"backward produced grad {pg.shape} for tensor {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
            node._parents = ()
        self._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ShapeError("division is only supported by Python scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
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
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by kernel")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _trailing(a: tuple, b: tuple) -> bool:
    return len(b) <= len(a) and tuple(a[len(a) - len(b):]) == tuple(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not _trailing(a.shape, b.shape):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and _trailing(b.shape, a.shape):
        a, b = b, a
    _binary_shapes(a, b, "add")
    sb = b.shape
    return _make(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    sb = b.shape
    return _make(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and _trailing(b.shape, a.shape):
        a, b = b, a
    _binary_shapes(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape
    return _make(ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis."""
    idx = index if isinstance(index, tuple) else (index,)
    for item in idx:
        if not (isinstance(item, (int, slice, np.integer)) or item is Ellipsis):
            raise ShapeError(f"slice: only basic indexing is differentiable, got {type(item).__name__}")
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), backward)


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axis=axes), (a,), lambda g: (np.roll(g, back, axis=axes),))


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as in ``numpy.pad``."""
    pad_width = tuple(tuple(p) for p in pad_width)
    if all(lo == 0 and hi == 0 for lo, hi in pad_width):
        return a
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make(np.pad(a.data, pad_width), (a,), lambda g: (np.ascontiguousarray(g[index]),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: parameter shapes {gamma.shape}, {beta.shape} vs features {C}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, C)
        return (dx, (g2 * xhat.reshape(-1, C)).sum(axis=0), g2.sum(axis=0))

    return _make(out, (x, gamma, beta), backward)


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor, approximate: str = "tanh") -> Tensor:
    xd = x.data
    if approximate == "tanh":
        u = _SQRT_2_OVER_PI * (xd + 0.044715 * (xd * xd * xd))
        t = np.tanh(u)
        out = 0.5 * xd * (1.0 + t)

        def backward(g):
            du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * xd * xd)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)
    elif approximate == "none":
        from scipy.special import erf

        cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
        out = (xd * cdf).astype(xd.dtype)

        def backward(g):
            pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
            return ((g * (cdf + xd * pdf)).astype(xd.dtype),)
    else:
        raise ValueError(f"unknown gelu approximation {approximate!r}")
    return _make(out, (x,), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table {table.shape}")
    tshape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(tshape, dtype=dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, tshape[1]))
        return (full,)

    return _make(table.data[idx], (table,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood; logits (B, C) with integer labels (B,)."""
    single = logits.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (B, C), got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, C = z.shape
    if y.shape != (B,):
        raise ShapeError(f"cross_entropy: {y.shape[0]} labels for {B} rows")
    if y.min() < 0 or y.max() >= C:
        raise ShapeError(f"cross_entropy: label out of range 0..{C - 1}")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(B), y]
    loss = np.asarray(nll.mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(B), y] -= 1.0
        return ((p * (g / B)).reshape(logits.shape).astype(z.dtype),)

    return _make(loss, (logits,), backward)


def grad_check(f, x, eps: float = 1e-4) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``x`` is a Tensor or a list of Tensors; ``f`` is called as ``f(x)`` or
    ``f(*x)`` and must return a scalar Tensor. Run in 64-bit precision.
    """
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    call = (lambda: f(*xs)) if isinstance(x, (list, tuple)) else (lambda: f(xs[0]))
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = call()
    if out.size != 1:
        raise TapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    worst = 0.0
    for t in xs:
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        g_fd = np.empty(flat.size, dtype=np.float64)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = call().item()
                flat[i] = orig - eps
                down = call().item()
                flat[i] = orig
                g_fd[i] = (up - down) / (2 * eps)
        ga = g_ad.reshape(-1).astype(np.float64)
        rel = np.abs(ga - g_fd) / (np.abs(ga) + np.abs(g_fd) + 1e-8)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


def adamw_step(params, grads, state=None, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01, decay_mask=None):
    """One AdamW update with bias-corrected moments and decoupled weight decay.

    Returns ``(new_params, state)``; inputs are not modified. ``decay_mask``
    optionally disables weight decay per parameter.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adamw_step: {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is not None and p.shape != g.shape:
            raise ShapeError(f"adamw_step: param {p.shape} vs grad {g.shape}")
    if state is None:
        state = {"step": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    b1, b2 = betas
    t = state["step"] + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, ms, vs = [], [], []
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state["m"][k] + (1.0 - b1) * g
        v = b2 * state["v"][k] + (1.0 - b2) * (g * g)
        wd = weight_decay if decay_mask is None or decay_mask[k] else 0.0
        q = p * (1.0 - lr * wd)
        q = q - lr * ((m / c1) / (np.sqrt(v / c2) + eps))
        new_params.append(q.astype(p.dtype, copy=False))
        ms.append(m.astype(p.dtype, copy=False))
        vs.append(v.astype(p.dtype, copy=False))
    return new_params, {"step": t, "m": ms, "v": vs}


class AdamW:
    """Stateful wrapper around ``adamw_step`` for named Tensor parameters.

    One-dimensional parameters (biases, norm scales) are exempt from decay.
    """

    def __init__(self, named_params, lr: float = 2e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.decay_mask = [p.ndim > 1 for p in self.params]
        self.state = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        new, self.state = adamw_step(
            [p.data for p in self.params], [p.grad for p in self.params], self.state,
            lr=self.lr, betas=self.betas, eps=self.eps, weight_decay=self.weight_decay,
            decay_mask=self.decay_mask,
        )
        for p, q in zip(self.params, new):
            p.data = q
