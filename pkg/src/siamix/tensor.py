"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the segmentation model needs are provided. Each op
computes its forward value with numpy and registers a closure mapping the
output gradient to one gradient per parent. ``backward`` walks the recorded
graph in reverse topological order and accumulates additively, so fan-out
is handled by the engine rather than by individual ops.
"""

from __future__ import annotations

import math
from collections import Counter
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_state = {"grad": True, "macs": None, "tag": "other"}


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextmanager
def count_macs():
    """Count multiply-accumulates of every op executed inside the block.

    Yields a ``Counter`` keyed by the tag active when each op ran (see
    ``mac_tag``).  Elementwise ops, normalisations and resampling are not
    counted.
    """
    prev = _state["macs"]
    counter: Counter = Counter()
    _state["macs"] = counter
    try:
        yield counter
    finally:
        _state["macs"] = prev


@contextmanager
def mac_tag(tag: str):
    prev = _state["tag"]
    _state["tag"] = tag
    try:
        yield
    finally:
        _state["tag"] = prev


def _record_macs(n: int) -> None:
    counter = _state["macs"]
    if counter is not None:
        counter[_state["tag"]] += int(n)


class Tensor:
    """N-dimensional float array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording ``backward_fn`` when any parent needs grad.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or None) per parent, in order.
    """
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------
class Graph:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def is_topological(self) -> bool:
        position = {id(n): i for i, n in enumerate(self.nodes)}
        for i, node in enumerate(self.nodes):
            for p in node._parents:
                if p.requires_grad and position.get(id(p), len(self.nodes)) >= i:
                    return False
        return True


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None, retain_graph: bool = False) -> Graph:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Leaf gradients accumulate into existing buffers.  Tensors listed in
    ``inputs`` that do not lie on the loss path receive zero gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True).reshape(node.shape)
            else:
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
    if not retain_graph:
        for node in graph.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
    for t in inputs or ():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return graph


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return from_op(out, (a, b), bw, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const(b, a)
    if isinstance(b, Tensor):
        return _const(a, b), b
    return as_tensor(a), as_tensor(b)


def neg(x: Tensor) -> Tensor:
    return from_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def power(x: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise ContractError("only scalar exponents are supported")
    p = float(p)
    out = x.data**p

    def bw(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        return (g * p * x.data ** (p - 1.0),)

    return from_op(out, (x,), bw, "pow")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = (0.5 * (1.0 + erf(x.data * _INV_SQRT2))).astype(x.dtype)
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return from_op(out, (x,), bw, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return from_op(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from exc
    return from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx], dtype=x.dtype)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return from_op(out, (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat axis {axis}: incompatible shapes {ref.shape} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return from_op(out, tensors, bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from exc
    out = np.matmul(a.data, b.data)
    _record_macs(int(np.prod(batch, dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return from_op(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is stored as (in, out)."""
    cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    _record_macs(x2.shape[0] * cin * cout)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return from_op(out.reshape(lead + (cout,)), parents, bw, "linear")


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return from_op(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return from_op(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation of ``x`` (B, Cin, H, W) with ``w`` (Cout, Cin/groups, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if cin % groups or cout % groups or cg != cin // groups:
        raise ShapeError(f"conv2d: input {x.shape}, weight {w.shape} incompatible with groups={groups}")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1 or h + 2 * p < kh or wd + 2 * p < kw:
        raise ShapeError(f"conv2d: non-positive output size for input {x.shape}, kernel {kh}x{kw}, stride {s}, pad {p}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    og = cout // groups
    hspan, wspan = s * (ho - 1) + 1, s * (wo - 1) + 1
    _record_macs(bsz * cout * ho * wo * cg * kh * kw)

    if cg == 1 and og == 1:
        # depthwise: accumulate over kernel offsets, fixed order
        out = np.zeros((bsz, cout, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i : i + hspan : s, j : j + wspan : s] * w.data[None, :, 0, i, j, None, None]
        if b is not None:
            out += b.data[None, :, None, None]

        def bw(g):
            gx = gw = None
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + hspan : s, j : j + wspan : s] += g * w.data[None, :, 0, i, j, None, None]
                gx = gxp[:, :, p : p + h, p : p + wd]
            if w.requires_grad:
                gw = np.zeros_like(w.data)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = (g * xp[:, :, i : i + hspan : s, j : j + wspan : s]).sum(axis=(0, 2, 3))
            if b is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = (
            win.reshape(bsz, groups, cg, ho, wo, kh, kw)
            .transpose(0, 1, 2, 5, 6, 3, 4)
            .reshape(bsz, groups, cg * kh * kw, ho * wo)
        )
        wm = w.data.reshape(groups, og, cg * kh * kw)
        out = np.matmul(wm, cols).reshape(bsz, cout, ho, wo)
        if b is not None:
            out += b.data[None, :, None, None]

        def bw(g):
            gm = g.reshape(bsz, groups, og, ho * wo)
            gx = gw = None
            if w.requires_grad:
                gw = np.matmul(gm, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(w.shape)
            if x.requires_grad:
                gcols = np.matmul(np.swapaxes(wm, -1, -2), gm).reshape(bsz, cin, kh, kw, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + hspan : s, j : j + wspan : s] += gcols[:, :, i, j]
                gx = gxp[:, :, p : p + h, p : p + wd]
            if b is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return from_op(out, parents, bw, "conv2d")


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Row i holds the bilinear weights of output i (half-pixel centres)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m.astype(dtype_name)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    return _interp_matrix(int(n_in), int(n_out), np.dtype(dtype).name)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of (B, C, H, W) with align_corners=False semantics."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects (B, C, H, W), got {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return from_op(x.data.copy(), (x,), lambda g: (g,), "resize")
    ah = interp_matrix(h, out_h, x.dtype)
    aw = interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return from_op(out, (x,), bw, "resize")
