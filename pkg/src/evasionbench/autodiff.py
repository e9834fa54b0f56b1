"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every differentiable operation takes :class:`Node` handles (plain tensors,
arrays and numbers are promoted to constants) and appends a record to the
graph that owns its inputs, or to the innermost active ``with Graph():``
block. :func:`backward` walks the records in reverse creation order, which is
a valid topological order because inputs always precede their consumers.

Operations accept an optional leading batch axis where noted; there is no
general broadcasting.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "AutodiffError",
    "Tensor",
    "Node",
    "Graph",
    "dense",
    "conv2d",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul_scalar",
    "sign",
    "clamp",
    "avg_pool_all",
    "mean",
    "sum_all",
    "reshape",
    "transpose",
    "crop",
    "bce_with_logit",
    "backward",
    "finite_difference_gradient",
    "stable_sigmoid",
]


class AutodiffError(ValueError):
    """Raised on shape mismatches, non-finite values and misuse of graphs."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise AutodiffError(f"{where}: non-finite value encountered")


class Tensor:
    """Immutable float64 array.

    The backing array is copied on construction and flagged read-only, so a
    tensor can be shared freely between threads.
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if int(np.prod(shape, dtype=np.int64)) != arr.size:
                raise AutodiffError(
                    f"shape {shape} does not match {arr.size} data entries"
                )
            arr = arr.reshape(shape)
        _check_finite(arr, "Tensor")
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # trusted internal constructor: no copy, no finiteness re-check
        obj = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        obj._array = arr
        return obj

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape)))

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._array

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def size(self) -> int:
        return self._array.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._array.copy()

    def flat(self) -> np.ndarray:
        """Row-major flat copy."""
        return self._array.ravel().copy()

    def item(self) -> float:
        return float(self._array.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self._array, threshold=8)})"


class _Record(NamedTuple):
    kind: str
    inputs: tuple[int, ...]
    value: Tensor
    vjp: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]] | None


class Node:
    """Handle to a value recorded on a :class:`Graph`."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> Tensor:
        return self.graph.nodes[self.id].value

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def kind(self) -> str:
        return self.graph.nodes[self.id].kind

    def item(self) -> float:
        return self.value.item()

    def __repr__(self) -> str:
        return f"Node(id={self.id}, kind={self.kind!r}, shape={self.shape})"


_local = threading.local()


def _active_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Graph:
    """Append-only record of one forward pass.

    Use as a context manager to make it the active graph for operations whose
    inputs are all constants. Graphs are confined to the thread that builds
    them.
    """

    def __init__(self):
        self.nodes: list[_Record] = []
        self.roots: set[int] = set()

    def __enter__(self) -> "Graph":
        _active_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> Node:
        """Record a differentiation leaf (an input we may want gradients for)."""
        node = self._record("leaf", (), _to_tensor(value), None)
        self.roots.add(node.id)
        return node

    def constant(self, value) -> Node:
        return self._record("const", (), _to_tensor(value), None)

    def is_leaf(self, node: Node) -> bool:
        return node.graph is self and node.id in self.roots

    def _record(self, kind, inputs, value: Tensor, vjp) -> Node:
        self.nodes.append(_Record(kind, tuple(inputs), value, vjp))
        return Node(self, len(self.nodes) - 1)


def _to_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, Node):
        return value.value
    return Tensor(value)


def _graph_for(*operands) -> Graph:
    for x in operands:
        if isinstance(x, Node):
            return x.graph
    stack = _active_stack()
    if stack:
        return stack[-1]
    return Graph()


def _nodes(graph: Graph, *operands) -> list[Node]:
    out = []
    for x in operands:
        if isinstance(x, Node):
            if x.graph is not graph:
                raise AutodiffError("operands belong to different graphs")
            out.append(x)
        else:
            out.append(graph.constant(x))
    return out


def _emit(graph: Graph, kind: str, inputs: Iterable[Node], arr: np.ndarray, vjp) -> Node:
    _check_finite(arr, kind)
    return graph._record(kind, [n.id for n in inputs], Tensor._wrap(arr), vjp)


# ---------------------------------------------------------------------------
# linear maps


def dense(x, weights, bias=None) -> Node:
    """``bias + weights @ x`` for ``x`` of shape (n,) or (batch, n)."""
    g = _graph_for(x, weights, bias)
    if bias is None:
        xn, wn = _nodes(g, x, weights)
        bn = None
    else:
        xn, wn, bn = _nodes(g, x, weights, bias)
    xv, wv = xn.data, wn.data
    if wv.ndim != 2 or xv.ndim not in (1, 2) or xv.shape[-1] != wv.shape[1]:
        raise AutodiffError(
            f"dense: input shape {xv.shape} incompatible with weights shape {wv.shape}"
        )
    if bn is not None and bn.shape != (wv.shape[0],):
        raise AutodiffError(
            f"dense: bias shape {bn.shape} incompatible with weights shape {wv.shape}"
        )
    out = xv @ wv.T
    if bn is not None:
        out = out + bn.data
    batched = xv.ndim == 2
    has_bias = bn is not None  # closures must not hold Nodes: that would cycle back to the graph

    def vjp(grad, need):
        gx = grad @ wv if need[0] else None
        gw = None
        if need[1]:
            gw = grad.T @ xv if batched else np.outer(grad, xv)
        if not has_bias:
            return gx, gw
        gb = (grad.sum(axis=0) if batched else grad) if need[2] else None
        return gx, gw, gb

    inputs = [xn, wn] if bn is None else [xn, wn, bn]
    return _emit(g, "dense", inputs, out, vjp)


def conv2d(x, kernels, stride: int = 1, bias=None) -> Node:
    """Valid cross-correlation.

    ``x`` is (C, H, W) or (batch, C, H, W); ``kernels`` is (K, C, kh, kw);
    the optional ``bias`` has shape (K,).
    """
    g = _graph_for(x, kernels, bias)
    if bias is None:
        xn, kn = _nodes(g, x, kernels)
        bn = None
    else:
        xn, kn, bn = _nodes(g, x, kernels, bias)
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise AutodiffError(f"conv2d: stride must be a positive int, got {stride!r}")
    xv, kv = xn.data, kn.data
    unbatched = xv.ndim == 3
    if unbatched:
        xv = xv[None]
    if xv.ndim != 4 or kv.ndim != 4 or xv.shape[1] != kv.shape[1]:
        raise AutodiffError(
            f"conv2d: input shape {xn.shape} incompatible with kernel shape {kv.shape}"
        )
    K, C, kh, kw = kv.shape
    H, W = xv.shape[2:]
    if kh > H or kw > W:
        raise AutodiffError(f"conv2d: kernel {kh}x{kw} larger than input {H}x{W}")
    if bn is not None and bn.shape != (K,):
        raise AutodiffError(f"conv2d: bias shape {bn.shape} does not match {K} kernels")
    s = int(stride)
    Ho = (H - kh) // s + 1
    Wo = (W - kw) // s + 1
    # (B, C, Ho, Wo, kh, kw) view; tensordot makes the im2col copy
    windows = sliding_window_view(xv, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out = np.tensordot(windows, kv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bn is not None:
        out = out + bn.data[None, :, None, None]
    if unbatched:
        out = out[0]
    has_bias = bn is not None

    def vjp(grad, need):
        gb4 = grad[None] if unbatched else grad
        gk = gx = None
        if need[1]:
            gk = np.tensordot(gb4, windows, axes=([0, 2, 3], [0, 2, 3]))
        if need[0]:
            cols = np.tensordot(gb4, kv, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
            gx = np.zeros_like(xv)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += (
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if unbatched:
                gx = gx[0]
        if not has_bias:
            return gx, gk
        return gx, gk, (gb4.sum(axis=(0, 2, 3)) if need[2] else None)

    inputs = [xn, kn] if bn is None else [xn, kn, bn]
    return _emit(g, "conv2d", inputs, np.ascontiguousarray(out), vjp)


# ---------------------------------------------------------------------------
# elementwise


def stable_sigmoid(z) -> np.ndarray:
    """Logistic function without overflow for large ``|z|``."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x) -> Node:
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    mask = xn.data > 0
    return _emit(g, "relu", [xn], np.where(mask, xn.data, 0.0), lambda grad, need: (grad * mask,))


def sigmoid(x) -> Node:
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    s = stable_sigmoid(xn.data)
    return _emit(g, "sigmoid", [xn], s, lambda grad, need: (grad * s * (1.0 - s),))


def _binary(kind, a, b, fn, vjp_fn) -> Node:
    g = _graph_for(a, b)
    an, bn = _nodes(g, a, b)
    if an.shape != bn.shape:
        raise AutodiffError(f"{kind}: shape mismatch {an.shape} vs {bn.shape}")
    return _emit(g, kind, [an, bn], fn(an.data, bn.data), vjp_fn)


def add(a, b) -> Node:
    return _binary("add", a, b, np.add, lambda grad, need: (grad, grad))


def sub(a, b) -> Node:
    return _binary("sub", a, b, np.subtract, lambda grad, need: (grad, -grad))


def mul_scalar(x, c: float) -> Node:
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    c = float(c)
    return _emit(g, "mul_scalar", [xn], xn.data * c, lambda grad, need: (grad * c,))


def sign(x) -> Node:
    """Elementwise sign with ``sign(0) == 0``. Blocks gradients."""
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    return _emit(g, "sign", [xn], np.sign(xn.data), None)


def clamp(x, lo: float, hi: float) -> Node:
    """Elementwise projection onto ``[lo, hi]``. Blocks gradients."""
    if lo > hi:
        raise AutodiffError(f"clamp: lower bound {lo} exceeds upper bound {hi}")
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    return _emit(g, "clamp", [xn], np.clip(xn.data, lo, hi), None)


# ---------------------------------------------------------------------------
# reductions and reshaping


def avg_pool_all(x) -> Node:
    """Mean of every entry, as a scalar node."""
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    n = xn.value.size
    if n == 0:
        raise AutodiffError("avg_pool_all: empty tensor")
    shape = xn.shape
    return _emit(
        g, "avg_pool_all", [xn], np.asarray(xn.data.mean()), lambda grad, need: (np.full(shape, grad / n),)
    )


def mean(x, axis) -> Node:
    """Mean over ``axis`` (int or tuple), dropping the reduced axes."""
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % xn.data.ndim for a in axes)
    n = int(np.prod([xn.shape[a] for a in axes]))
    if n == 0:
        raise AutodiffError("mean: empty reduction")
    shape = xn.shape

    def vjp(grad, need):
        return (np.broadcast_to(np.expand_dims(grad, axes), shape) / n,)

    return _emit(g, "mean", [xn], xn.data.mean(axis=axes), vjp)


def sum_all(x) -> Node:
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    shape = xn.shape
    return _emit(g, "sum_all", [xn], np.asarray(xn.data.sum()), lambda grad, need: (np.full(shape, grad),))


def reshape(x, shape: Sequence[int]) -> Node:
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    old = xn.shape
    try:
        out = xn.data.reshape(tuple(shape))
    except ValueError as exc:
        raise AutodiffError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return _emit(g, "reshape", [xn], out, lambda grad, need: (grad.reshape(old),))


def crop(x, starts: Sequence[int], sizes: Sequence[int]) -> Node:
    """Contiguous window ``x[s0:s0+n0, s1:s1+n1, ...]``; trailing axes are kept whole."""
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    shape = xn.shape
    if len(starts) != len(sizes) or len(starts) > len(shape):
        raise AutodiffError("crop: starts and sizes must match and not exceed the rank")
    window = []
    for s, n, dim in zip(starts, sizes, shape):
        if s < 0 or n < 0 or s + n > dim:
            raise AutodiffError(f"crop: window {s}:{s + n} outside axis of length {dim}")
        window.append(slice(s, s + n))
    window = tuple(window)
    out = xn.data[window].copy()

    def vjp(grad, need):
        full = np.zeros(shape)
        full[window] = grad
        return (full,)

    return _emit(g, "crop", [xn], out, vjp)


def transpose(x, axes: Sequence[int]) -> Node:
    g = _graph_for(x)
    (xn,) = _nodes(g, x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(
        g,
        "transpose",
        [xn],
        np.ascontiguousarray(xn.data.transpose(axes)),
        lambda grad, need: (grad.transpose(inverse),),
    )


# ---------------------------------------------------------------------------
# loss


def bce_with_logit(logit, target) -> Node:
    """Binary cross-entropy on raw logits, elementwise.

    ``target`` is 0/1, either a scalar or an array shaped like ``logit``.
    Uses ``max(z, 0) - z*t + log1p(exp(-|z|))`` so saturated logits neither
    overflow nor lose the tiny tail of the loss.
    """
    g = _graph_for(logit)
    (zn,) = _nodes(g, logit)
    z = zn.data
    t = np.asarray(target, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise AutodiffError("bce_with_logit: target must be 0 or 1")
    if t.shape not in ((), z.shape):
        raise AutodiffError(f"bce_with_logit: target shape {t.shape} vs logit shape {z.shape}")
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    dz = stable_sigmoid(z) - t
    return _emit(g, "bce_with_logit", [zn], loss, lambda grad, need: (grad * dz,))


# ---------------------------------------------------------------------------
# differentiation


def backward(graph: Graph, loss, wrt) -> dict[int, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` node.

    ``wrt`` is an iterable of nodes or node ids. Returns a map from node id
    to gradient; nodes the loss does not depend on get zeros.
    """
    loss_id = loss.id if isinstance(loss, Node) else int(loss)
    if isinstance(loss, Node) and loss.graph is not graph:
        raise AutodiffError("backward: loss node belongs to another graph")
    if not 0 <= loss_id < len(graph.nodes):
        raise AutodiffError(f"backward: unknown node id {loss_id}")
    if graph.nodes[loss_id].value.shape != ():
        raise AutodiffError(
            f"backward: loss must be scalar, got shape {graph.nodes[loss_id].value.shape}"
        )
    wanted = [w.id if isinstance(w, Node) else int(w) for w in wrt]

    # only nodes downstream of a requested leaf need gradients
    needed = set(wanted)
    for nid in range(min(wanted, default=loss_id + 1), loss_id + 1):
        if any(i in needed for i in graph.nodes[nid].inputs):
            needed.add(nid)

    grads: dict[int, np.ndarray] = {loss_id: np.ones(())}
    for nid in range(loss_id, -1, -1):
        grad = grads.get(nid)
        rec = graph.nodes[nid]
        if grad is None or rec.vjp is None or nid not in needed:
            continue
        need = tuple(i in needed for i in rec.inputs)
        for src, gsrc in zip(rec.inputs, rec.vjp(grad, need)):
            if gsrc is None or src not in needed:
                continue
            if src in grads:
                grads[src] = grads[src] + gsrc
            else:
                grads[src] = gsrc

    result = {}
    for wid in wanted:
        shape = graph.nodes[wid].value.shape
        g = grads.get(wid)
        result[wid] = Tensor._wrap(np.array(g, dtype=np.float64)) if g is not None else Tensor.zeros(shape)
    return result


def finite_difference_gradient(
    f: Callable[[Tensor], float],
    x: Tensor,
    h: float = 1e-3,
    batch_f: Callable[[np.ndarray], np.ndarray] | None = None,
    chunk: int = 256,
) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``batch_f``, if given, maps an array of shape (N, *x.shape) to N values
    and is used instead of ``f`` to evaluate many perturbed points at once.
    """
    if not h > 0:
        raise AutodiffError("finite_difference_gradient: h must be positive")
    base = x.data
    d = base.size
    grad = np.empty(d)
    if batch_f is None:
        flat = base.ravel()
        for i in range(d):
            plus = flat.copy()
            minus = flat.copy()
            plus[i] += h
            minus[i] -= h
            fp = float(f(Tensor(plus.reshape(base.shape))))
            fm = float(f(Tensor(minus.reshape(base.shape))))
            grad[i] = (fp - fm) / (2 * h)
        return Tensor(grad.reshape(base.shape))

    for start in range(0, d, chunk):
        idx = np.arange(start, min(start + chunk, d))
        pts = np.repeat(base.ravel()[None], 2 * len(idx), axis=0)
        pts[np.arange(len(idx)), idx] += h
        pts[len(idx) + np.arange(len(idx)), idx] -= h
        vals = np.asarray(batch_f(pts.reshape((-1,) + base.shape)), dtype=np.float64)
        grad[idx] = (vals[: len(idx)] - vals[len(idx) :]) / (2 * h)
    return Tensor(grad.reshape(base.shape))
