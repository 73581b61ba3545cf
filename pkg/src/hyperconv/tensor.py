"""Dense tensors with tape-style reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
inputs and a backward rule on the output.  :func:`backward` collects the
recorded nodes reachable from a scalar loss into a :class:`Graph`, walks it
in reverse topological order and then releases the saved activations, so a
recording can only be differentiated once.

Broadcasting is deliberately limited to scalar scaling and per-channel
bias; everything else requires matching shapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the floating-point type used for new tensors (f64 or f32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class GraphConsumedError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional float array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype.type is not _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = tuple(_parents)
        self._op = _op
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul_elementwise(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(build_graph(self), self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full(like.shape, x, dtype=like.data.dtype))
    return Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``data`` as the output of an operation.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per parent.  Nothing is recorded when no parent needs a gradient.
    """
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


# -- graph ----------------------------------------------------------------


class Graph:
    """Recorded operations reachable from one output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def edges(self) -> Iterable[tuple[int, int]]:
        index = {id(n): i for i, n in enumerate(self.nodes)}
        for i, node in enumerate(self.nodes):
            for p in node._parents:
                if id(p) in index:
                    yield index[id(p)], i


def build_graph(output: Tensor) -> Graph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return Graph(order)


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf requiring it."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph.consumed:
        raise GraphConsumedError("this graph has already been differentiated")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    for node in graph.nodes:
        if node._consumed:
            raise GraphConsumedError(
                f"node {node._op!r} belongs to an already differentiated recording"
            )
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise RuntimeError(f"bad gradient shape {pg.shape} for {p.shape} in {node._op}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in graph.nodes:
        if not node.is_leaf:
            node._backward = None
            node._consumed = True
    graph.consumed = True


# -- elementwise ------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul_elementwise")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def add_channel_bias(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """x + b broadcast along ``axis`` (b has one entry per channel)."""
    if b.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise ValueError(f"add_channel_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return make_op(
        x.data + b.data.reshape(shape), (x, b), lambda g: (g, g.sum(axis=other)), "bias"
    )


# -- reductions and shape ----------------------------------------------------


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_op(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return make_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def tile0(a: Tensor, reps: int) -> Tensor:
    """Repeat the whole array ``reps`` times along axis 0 (weight sharing)."""
    n0 = a.shape[0]

    def bw(g):
        return (g.reshape((reps, n0) + a.shape[1:]).sum(axis=0),)

    return make_op(np.tile(a.data, (reps,) + (1,) * (a.ndim - 1)), (a,), bw, "tile0")


def repeat_channels(a: Tensor, m: int, axis: int = 1) -> Tensor:
    """Repeat each channel ``m`` times in place: c -> (c, 0), ..., (c, m-1)."""
    shape = a.shape

    def bw(g):
        gs = g.reshape(shape[:axis] + (shape[axis], m) + shape[axis + 1 :])
        return (gs.sum(axis=axis + 1),)

    return make_op(np.repeat(a.data, m, axis=axis), (a,), bw, "repeat_channels")


def group_sum(a: Tensor, m: int, axis: int = 1) -> Tensor:
    """Sum consecutive groups of ``m`` channels; inverse layout of repeat_channels."""
    shape = a.shape
    if shape[axis] % m:
        raise ValueError(f"group_sum: {shape[axis]} channels not divisible by {m}")
    split = shape[:axis] + (shape[axis] // m, m) + shape[axis + 1 :]

    def bw(g):
        return (np.repeat(g, m, axis=axis),)

    return make_op(a.data.reshape(split).sum(axis=axis + 1), (a,), bw, "group_sum")


def subsample(a: Tensor, stride: int) -> Tensor:
    """Keep every ``stride``-th row and column of the last two axes."""
    if stride == 1:
        return a
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., ::stride, ::stride] = g
        return (out,)

    return make_op(a.data[..., ::stride, ::stride].copy(), (a,), bw, "subsample")


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum (``'ij,jk->ik'``) without repeated indices per operand."""
    if "->" not in subscripts:
        raise ValueError("einsum needs an explicit output ('...->...')")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ValueError(f"einsum: {len(in_subs)} subscripts for {len(operands)} operands")
    for s, op in zip(in_subs, operands):
        if len(s) != op.ndim or len(set(s)) != len(s):
            raise ValueError(f"einsum: subscript {s!r} does not fit shape {op.shape}")
    datas = [op.data for op in operands]
    result = np.einsum(subscripts, *datas, optimize=len(operands) > 2)

    def bw(g):
        grads = []
        for i, s in enumerate(in_subs):
            if not operands[i].requires_grad:
                grads.append(None)
                continue
            others = [datas[j] for j in range(len(datas)) if j != i]
            other_subs = [in_subs[j] for j in range(len(datas)) if j != i]
            available = set(out_sub).union(*other_subs) if other_subs else set(out_sub)
            # indices living only in this operand were summed out: broadcast back
            kept = "".join(c for c in s if c in available)
            expr = ",".join([out_sub] + other_subs) + "->" + kept
            gi = np.einsum(expr, g, *others, optimize=len(others) > 1)
            if kept != s:
                shape = [operands[i].shape[k] if c in available else 1 for k, c in enumerate(s)]
                gi = np.broadcast_to(gi.reshape(shape), operands[i].shape).copy()
            grads.append(gi)
        return grads

    return make_op(np.asarray(result), operands, bw, "einsum")


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is dropped)."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return make_op(np.take(a.data, index, axis=axis), (a,), bw, "take")
