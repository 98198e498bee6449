"""Dense real tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable function in this
module records the producing operation (its parents and a closure mapping the
output gradient to parent gradients) when at least one input requires a
gradient and recording is enabled. :meth:`Tensor.backward` walks that graph in
reverse topological order, accumulates gradients into the leaves and then
releases the graph, so a second call on the same loss is rejected.

Shapes follow numpy broadcasting. Sequence ops (``conv1d``, ``group_norm``,
``mhsa``) use a channels-last layout ``[..., L, C]``.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "ShapeError", "GraphError", "no_grad", "is_recording", "as_tensor",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "sum", "mean",
    "reshape", "transpose", "concat", "stack", "exp", "log", "sqrt", "sigmoid",
    "clip", "silu", "prelu", "softmax", "linear", "conv1d", "layer_norm",
    "group_norm", "dropout", "mhsa", "linear_map", "numerical_grad", "gradcheck",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Backward was called on something without a usable recorded graph."""


_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str | None = None
        self.name = name

    # basic properties
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
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return _getitem(self, index)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        ``self`` must be a scalar unless ``grad`` is given. The graph is
        released afterwards; calling ``backward`` again raises GraphError.
        """
        if self._op == "<consumed>":
            raise GraphError("graph already consumed by a previous backward()")
        if not self.requires_grad:
            raise GraphError("tensor was not produced by a recorded operation")
        if grad is None:
            if self.size != 1:
                raise GraphError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
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
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._op = "<consumed>"


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {shapes}") from exc


# --- elementwise arithmetic ---------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain scalars/arrays adopt the dtype of the Tensor operand (no float32 -> float64 drift)
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.asarray(b).dtype.kind != "c":
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.asarray(a).dtype.kind != "c":
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,), "clip")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


# --- shape manipulation -------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)
    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))), "stack")


# --- reductions ---------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum(a, axis, keepdims) * (1.0 / count)


# --- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map along the last axis: ``x @ weight + bias``.

    ``weight`` has shape ``[D_in, D_out]``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d, got {weight.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} != weight rows {weight.shape[0]} "
                         f"(x {x.shape}, weight {weight.shape})")
    parents = [x, weight]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return _make(out.reshape(*x.shape[:-1], weight.shape[1]), parents, backward, "linear")


def _windows(xp: np.ndarray, k: int, length: int) -> np.ndarray:
    # [..., L+K-1, C] -> [..., L, C, K] strided view
    return np.lib.stride_tricks.sliding_window_view(xp, k, axis=-2)[..., :length, :, :]


def conv1d(x, weight, bias=None, groups: int = 1) -> Tensor:
    """Zero-padded 'same' grouped 1-D cross-correlation along axis -2.

    ``x``: ``[..., L, C_in]``; ``weight``: ``[C_out, C_in // groups, K]`` with
    odd ``K``; returns ``[..., L, C_out]``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim < 2:
        raise ShapeError("conv1d input must be at least 2-d [..., L, C]")
    c_out, cg_in, k = weight.shape
    c_in = x.shape[-1]
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(f"channels (in={c_in}, out={c_out}) not divisible by groups={groups}")
    if cg_in != c_in // groups:
        raise ShapeError(f"weight expects {cg_in} channels per group, input gives {c_in // groups}")
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    lead, length = x.shape[:-2], x.shape[-2]
    pad = k // 2
    cg_out = c_out // groups
    n = int(np.prod(lead)) * length

    xp = np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)])
    cols = _windows(xp, k, length).reshape(n, groups, cg_in * k).transpose(1, 0, 2)
    # [G, Cg_out, Cg_in, K] -> [G, Cg_in*K, Cg_out]
    w = weight.data.reshape(groups, cg_out, cg_in * k).transpose(0, 2, 1)
    out = np.matmul(cols, w)  # [G, n, Cg_out]
    out = out.transpose(1, 0, 2).reshape(*lead, length, c_out)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gg = g.reshape(n, groups, cg_out).transpose(1, 0, 2)  # [G, n, Cg_out]
        gx = gw = None
        if x.requires_grad:
            gcols = np.matmul(gg, w.transpose(0, 2, 1))  # [G, n, Cg_in*K]
            gcols = gcols.transpose(1, 0, 2).reshape(*lead, length, c_in, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + length, :] += gcols[..., j]
            gx = gxp[..., pad:pad + length, :]
        if weight.requires_grad:
            gw = np.matmul(cols.transpose(0, 2, 1), gg)  # [G, Cg_in*K, Cg_out]
            gw = gw.transpose(0, 2, 1).reshape(c_out, cg_in, k)
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, c_out).sum(axis=0)
    return _make(out, parents, backward, "conv1d")


# --- normalization ------------------------------------------------------------

def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply an optional per-channel affine."""
    x = as_tensor(x)
    return _normalize(x, gain, bias, eps, groups=None)


def group_norm(x, groups: int, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Group normalization of ``[..., L, C]``: statistics over L and each channel group."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("group_norm input must be at least 2-d [..., L, C]")
    if groups < 1 or x.shape[-1] % groups:
        raise ShapeError(f"{x.shape[-1]} channels not divisible by {groups} groups")
    return _normalize(x, gain, bias, eps, groups=groups)


def _normalize(x: Tensor, gain, bias, eps: float, groups: int | None) -> Tensor:
    c = x.shape[-1]
    if groups is None:
        xv = x.data
        axes = (-1,)
    else:
        xv = x.data.reshape(*x.shape[:-1], groups, c // groups)
        axes = (-3, -1)
    mu = xv.mean(axis=axes, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    count = xv.shape[-1] * (1 if groups is None else xv.shape[-3])

    parents = [x]
    out = xhat
    if gain is not None:
        gain = as_tensor(gain)
        out = out * gain.data
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = []
        gh = g * gain.data if gain is not None else g
        if x.requires_grad:
            ghv = gh.reshape(xv.shape)
            xhv = xhat.reshape(xv.shape)
            gx = inv * (ghv - ghv.mean(axis=axes, keepdims=True)
                        - xhv * (ghv * xhv).sum(axis=axes, keepdims=True) / count)
            grads.append(gx.reshape(x.shape))
        else:
            grads.append(None)
        if gain is not None:
            grads.append((g * xhat).reshape(-1, c).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, c).sum(axis=0))
        return tuple(grads)
    return _make(out, parents, backward, "group_norm" if groups else "layer_norm")


# --- activations --------------------------------------------------------------

def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return _make(out, (x,), lambda g: (g * (s + out * (1 - s)),), "silu")


def prelu(x, alpha) -> Tensor:
    """Parametric ReLU; ``alpha`` is a scalar or per-channel (last axis) slope."""
    x, alpha = as_tensor(x), as_tensor(alpha)
    _broadcast_shape(x.shape, alpha.shape)
    neg_mask = x.data < 0
    out = np.where(neg_mask, alpha.data * x.data, x.data)

    def backward(g):
        gx = g * np.where(neg_mask, alpha.data, 1.0) if x.requires_grad else None
        ga = _unbroadcast(g * np.where(neg_mask, x.data, 0.0), alpha.shape) if alpha.requires_grad else None
        return gx, ga
    return _make(out, (x, alpha), backward, "prelu")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (x,), backward, "softmax")


def dropout(x, p: float, training: bool, rng: np.random.Generator | int | None = None) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# --- attention ----------------------------------------------------------------

def mhsa(x, heads: int, wq, wk, wv, wo, bq=None, bk=None, bv=None, bo=None,
         record: list | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over axis -2 of ``[..., T, C]``.

    No positional information is added, so the op is equivariant to
    permutations of the T axis. If ``record`` is a list, the attention
    probabilities ``[..., H, T_q, T_k]`` are appended to it as an ndarray.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if heads < 1 or c % heads:
        raise ShapeError(f"{c} channels not divisible by {heads} heads")
    lead, t = x.shape[:-2], x.shape[-2]
    dh = c // heads

    def split(h: Tensor) -> Tensor:
        h = reshape(h, (*lead, t, heads, dh))
        nd = h.ndim
        return transpose(h, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    nd = q.ndim
    kt = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = matmul(q, kt) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    if record is not None:
        record.append(attn.data.copy())
    ctx = matmul(attn, v)  # [..., H, T, dh]
    ctx = transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    ctx = reshape(ctx, (*lead, t, c))
    return linear(ctx, wo, bo)


# --- generic linear operators -------------------------------------------------

def linear_map(x, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray], op: str = "linear_map") -> Tensor:
    """Apply an arbitrary linear operator given as a forward/adjoint pair."""
    x = as_tensor(x)
    out = forward(x.data)
    return _make(out, (x,), lambda g: (adjoint(g).reshape(x.shape),), op)


# --- gradient checking --------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                   indices: Iterable | None = None) -> dict:
    """Central finite differences of the scalar ``fn()`` w.r.t. entries of ``t``.

    Returns ``{flat_index: derivative}``; all entries when ``indices`` is None.
    """
    flat = t.data.reshape(-1)
    out = {}
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            out[int(i)] = (fp - fm) / (2 * step)
    return out


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
              samples: int | None = None, rng=None, floor: float = 1e-6) -> float:
    """Max relative error between reverse-mode and finite-difference gradients.

    ``fn`` must rebuild the graph from ``inputs`` on every call. With
    ``samples`` set, that many random entries (across all inputs) are checked.
    Relative error is ``|a - n| / max(|a|, |n|, floor * max(1, |f|))``; the
    floor keeps entries whose true gradient is ~0 (finite differences then
    return rounding noise proportional to ``|f|``) from dominating.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    floor = floor * max(1.0, abs(float(loss.data)))
    loss.backward()
    picks: list[tuple[int, int]] = []
    if samples is None:
        picks = [(j, i) for j, t in enumerate(inputs) for i in range(t.size)]
    else:
        rng = np.random.default_rng(rng)
        sizes = np.array([t.size for t in inputs])
        owner = rng.choice(len(inputs), size=samples, p=sizes / sizes.sum())
        picks = [(int(j), int(rng.integers(inputs[j].size))) for j in owner]
    worst = 0.0
    for j, i in picks:
        t = inputs[j]
        num = numerical_grad(fn, t, step, [i])[i]
        ana = 0.0 if t.grad is None else float(t.grad.reshape(-1)[i])
        scale = max(abs(ana), abs(num), floor)
        worst = max(worst, abs(ana - num) / scale)
    return worst
