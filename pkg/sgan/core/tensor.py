from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPES: dict[str, np.dtype] = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    pass


class GradError(RuntimeError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.kinks: list[bytes] | None = None


_state = _State()


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def trace_kinks() -> Iterator[list[bytes]]:
    """Collect the branch pattern of every piecewise primitive evaluated inside the block."""
    prev = _state.kinks
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = prev


def _record_kink(*patterns: np.ndarray) -> None:
    if _state.kinks is not None:
        for p in patterns:
            _state.kinks.append(np.ascontiguousarray(p).tobytes())


def dtype_of(name: str) -> np.dtype:
    try:
        return DTYPES[name]
    except KeyError as exc:
        raise TensorError(f"unsupported dtype {name!r}; expected one of {sorted(DTYPES)}") from exc


class Tensor:
    """Dense row-major array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: str | np.dtype | None = None, name: str | None = None):
        if isinstance(dtype, str):
            dtype = dtype_of(dtype)
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.array(data, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor data contains NaN or Inf")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> list[Tensor]:
        return backward(self)

    def _coerce(self, other: Any) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor._wrap(np.asarray(other, dtype=self.dtype))

    def __add__(self, other: Any) -> Tensor:
        return apply_primitive("add", [self, self._coerce(other)])

    __radd__ = __add__

    def __mul__(self, other: Any) -> Tensor:
        if not isinstance(other, Tensor) and np.ndim(other) == 0:
            return apply_primitive("scale", [self], factor=float(other))
        return apply_primitive("mul", [self, self._coerce(other)])

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return apply_primitive("scale", [self], factor=-1.0)

    def __sub__(self, other: Any) -> Tensor:
        return self + (-self._coerce(other))

    def __rsub__(self, other: Any) -> Tensor:
        return self._coerce(other) + (-self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return apply_primitive("matmul", [self, other])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass(eq=False)
class Node:
    primitive: Primitive
    inputs: tuple[Tensor, ...]
    ctx: dict[str, Any]
    consumed: bool = False


@dataclass
class Graph:
    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        """Post-order walk from root; nodes come out in topological order."""
        order: list[Tensor] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is None:
                if t.requires_grad:
                    leaves.append(t)
                continue
            stack.append((t, True))
            for inp in reversed(t._node.inputs):
                if id(inp) not in seen:
                    stack.append((inp, False))
        return cls(nodes=order, leaves=leaves)


class Primitive:
    name = ""

    def forward(self, ctx: dict[str, Any], *xs: np.ndarray, **attrs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, ctx: dict[str, Any], g: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str) -> Callable[[type[Primitive]], type[Primitive]]:
    def deco(cls: type[Primitive]) -> type[Primitive]:
        cls.name = name
        PRIMITIVES[name] = cls()
        return cls

    return deco


def _result_dtype(arrays: Sequence[np.ndarray]) -> np.dtype:
    shaped = [a.dtype for a in arrays if a.ndim > 0] or [a.dtype for a in arrays]
    return np.result_type(*shaped)


def apply_primitive(name: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    prim = PRIMITIVES.get(name)
    if prim is None:
        raise TensorError(f"unknown primitive {name!r}")
    arrays = [t.data for t in inputs]
    ctx: dict[str, Any] = {}
    out = np.asarray(prim.forward(ctx, *arrays, **attrs))
    out = out.astype(_result_dtype(arrays), copy=False)
    if not np.all(np.isfinite(out)):
        raise TensorError(f"{name}: produced non-finite values")
    result = Tensor._wrap(out)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = Node(prim, tuple(inputs), ctx)
    return result


def backward(loss: Tensor) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise GradError("loss is not connected to any tensor that requires grad")
    graph = Graph.trace(loss)
    if any(t._node.consumed for t in graph.nodes):
        raise GradError("backward already ran on this graph; recompute the forward pass")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.nodes):
        node = t._node
        g = pending.pop(id(t), None)
        node.consumed = True
        if g is not None:
            in_grads = node.primitive.backward(node.ctx, g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = np.asarray(ig, dtype=inp.dtype).reshape(inp.shape)
                if inp._node is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + ig
                else:
                    pending[id(inp)] = ig
        node.ctx.clear()
    return graph.leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _as_batched(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return x[None], True
    raise ShapeError(f"{name}: expected C×H×W or N×C×H×W input, got {x.shape}")


def _out_extent(size: int, k: int, s: int, p: int, name: str, shape: tuple[int, ...]) -> int:
    span = size + 2 * p - k
    if span < 0:
        raise ShapeError(f"{name}: kernel {k} larger than padded input {shape}")
    return span // s + 1


@register("conv2d")
class Conv2d(Primitive):
    def forward(self, ctx, x, w, b=None, stride: int = 1, pad: int = 0, dilation: int = 1):
        if stride < 1 or pad < 0:
            raise TensorError(f"conv2d: invalid stride={stride} pad={pad}")
        if dilation != 1:
            raise TensorError("conv2d: dilation other than 1 is not supported")
        xb, squeeze = _as_batched(x, "conv2d")
        if w.ndim != 4 or w.shape[1] != xb.shape[1] or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
        k = w.shape[2]
        ho = _out_extent(xb.shape[2], k, stride, pad, "conv2d", x.shape)
        wo = _out_extent(xb.shape[3], k, stride, pad, "conv2d", x.shape)
        xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b[None, :, None, None]
        ctx.update(win=win, w=w, xp_shape=xp.shape, pad=pad, stride=stride, squeeze=squeeze, has_bias=b is not None)
        return out[0] if squeeze else out

    def backward(self, ctx, g):
        gb = g[None] if ctx["squeeze"] else g
        win, w, s, pad = ctx["win"], ctx["w"], ctx["stride"], ctx["pad"]
        k = w.shape[2]
        ho, wo = gb.shape[2], gb.shape[3]
        gw = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(ctx["xp_shape"], dtype=gb.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.einsum("fc,nfhw->nchw", w[:, :, i, j], gb)
                gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += contrib
        gx = gxp[:, :, pad : gxp.shape[2] - pad, pad : gxp.shape[3] - pad] if pad else gxp
        if ctx["squeeze"]:
            gx = gx[0]
        grads = [gx, gw]
        if ctx["has_bias"]:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads


@register("maxpool2d")
class MaxPool2d(Primitive):
    def forward(self, ctx, x, kernel: int = 2, stride: int | None = None, pad: int = 0):
        stride = kernel if stride is None else stride
        if kernel < 1 or stride < 1 or pad < 0 or pad > kernel // 2:
            raise TensorError(f"maxpool2d: invalid kernel={kernel} stride={stride} pad={pad}")
        xb, squeeze = _as_batched(x, "maxpool2d")
        ho = _out_extent(xb.shape[2], kernel, stride, pad, "maxpool2d", x.shape)
        wo = _out_extent(xb.shape[3], kernel, stride, pad, "maxpool2d", x.shape)
        xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else xb
        win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        flat = win.reshape(*win.shape[:4], kernel * kernel)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        _record_kink(idx.astype(np.int16))
        ctx.update(idx=idx, xp_shape=xp.shape, kernel=kernel, stride=stride, pad=pad, squeeze=squeeze)
        return out[0] if squeeze else out

    def backward(self, ctx, g):
        gb = g[None] if ctx["squeeze"] else g
        k, s, pad, idx = ctx["kernel"], ctx["stride"], ctx["pad"], ctx["idx"]
        ho, wo = gb.shape[2], gb.shape[3]
        gxp = np.zeros(ctx["xp_shape"], dtype=gb.dtype)
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gb * hit
        gx = gxp[:, :, pad : gxp.shape[2] - pad, pad : gxp.shape[3] - pad] if pad else gxp
        return [gx[0] if ctx["squeeze"] else gx]


@register("gap")
class GlobalAvgPool(Primitive):
    def forward(self, ctx, x):
        if x.ndim < 2:
            raise ShapeError(f"gap: expected at least 2 spatial axes, got {x.shape}")
        ctx["shape"] = x.shape
        return x.mean(axis=(-2, -1))

    def backward(self, ctx, g):
        h, w = ctx["shape"][-2:]
        return [np.broadcast_to(g[..., None, None] / (h * w), ctx["shape"]).copy()]


@register("matmul")
class MatMul(Primitive):
    def forward(self, ctx, a, b):
        if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
        ctx.update(a=a, b=b)
        return a @ b

    def backward(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        return [g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g]


@register("transpose")
class Transpose(Primitive):
    def forward(self, ctx, x, axes: Sequence[int] | None = None):
        axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
        ctx["inverse"] = tuple(np.argsort(axes))
        return np.transpose(x, axes)

    def backward(self, ctx, g):
        return [np.transpose(g, ctx["inverse"])]


@register("reshape")
class Reshape(Primitive):
    def forward(self, ctx, x, shape: Sequence[int] = ()):
        shape = tuple(shape)
        if int(np.prod(shape)) != x.size or any(s <= 0 for s in shape):
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
        ctx["shape"] = x.shape
        return x.reshape(shape)

    def backward(self, ctx, g):
        return [g.reshape(ctx["shape"])]


def _check_elementwise(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


@register("add")
class Add(Primitive):
    def forward(self, ctx, a, b):
        _check_elementwise("add", a, b)
        ctx.update(sa=a.shape, sb=b.shape)
        return a + b

    def backward(self, ctx, g):
        return [_unbroadcast(g, ctx["sa"]), _unbroadcast(g, ctx["sb"])]


@register("mul")
class Mul(Primitive):
    def forward(self, ctx, a, b):
        _check_elementwise("mul", a, b)
        ctx.update(a=a, b=b)
        return a * b

    def backward(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


@register("scale")
class Scale(Primitive):
    def forward(self, ctx, x, factor: float = 1.0):
        ctx["factor"] = factor
        return x * np.asarray(factor, dtype=x.dtype)

    def backward(self, ctx, g):
        return [g * np.asarray(ctx["factor"], dtype=g.dtype)]


@register("relu")
class Relu(Primitive):
    def forward(self, ctx, x):
        mask = x > 0
        _record_kink(mask)
        ctx["mask"] = mask
        return np.where(mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, ctx, g):
        return [g * ctx["mask"]]


@register("sigmoid")
class Sigmoid(Primitive):
    def forward(self, ctx, x):
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        ctx["out"] = out
        return out

    def backward(self, ctx, g):
        out = ctx["out"]
        return [g * out * (1 - out)]


@register("softmax")
class Softmax(Primitive):
    def forward(self, ctx, x, axis: int = -1):
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        out = z / z.sum(axis=axis, keepdims=True)
        ctx.update(out=out, axis=axis)
        return out

    def backward(self, ctx, g):
        out, axis = ctx["out"], ctx["axis"]
        return [out * (g - (g * out).sum(axis=axis, keepdims=True))]


@register("log")
class Log(Primitive):
    def forward(self, ctx, x):
        if np.any(x <= 0):
            raise TensorError(f"log: non-positive input (min {x.min():.3g}); clamp before taking the log")
        ctx["x"] = x
        return np.log(x)

    def backward(self, ctx, g):
        return [g / ctx["x"]]


@register("clamp")
class Clamp(Primitive):
    def forward(self, ctx, x, low: float | None = None, high: float | None = None):
        keep = np.ones(x.shape, dtype=bool)
        out = x
        if low is not None:
            keep &= x >= low
            out = np.maximum(out, np.asarray(low, dtype=x.dtype))
        if high is not None:
            keep &= x <= high
            out = np.minimum(out, np.asarray(high, dtype=x.dtype))
        _record_kink(keep)
        ctx["keep"] = keep
        return out

    def backward(self, ctx, g):
        return [g * ctx["keep"]]


def _norm_axis(axis: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register("sum")
class Sum(Primitive):
    def forward(self, ctx, x, axis=None):
        axes = _norm_axis(axis, x.ndim)
        ctx.update(shape=x.shape, axes=axes)
        return x.sum(axis=axes)

    def backward(self, ctx, g):
        return [np.broadcast_to(np.expand_dims(g, ctx["axes"]), ctx["shape"]).copy()]


@register("mean")
class Mean(Primitive):
    def forward(self, ctx, x, axis=None):
        axes = _norm_axis(axis, x.ndim)
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        ctx.update(shape=x.shape, axes=axes, count=count)
        return x.mean(axis=axes) if axes else x.copy()

    def backward(self, ctx, g):
        g = np.expand_dims(g, ctx["axes"]) / ctx["count"]
        return [np.broadcast_to(g, ctx["shape"]).copy()]


def same_status(mask: np.ndarray) -> np.ndarray:
    """Pairwise indicator 1(B_i == B_j) over the last axis of a binary mask."""
    mask = np.asarray(mask)
    return (mask[..., :, None] == mask[..., None, :]).astype(np.float64)


@register("row_normalize")
class RowNormalize(Primitive):
    """Clamp at zero, optionally mask by same-status pairs, then divide each row by its sum."""

    def forward(self, ctx, p, mask: np.ndarray | None = None, eps: float = 1e-8):
        if p.ndim < 2 or p.shape[-1] != p.shape[-2]:
            raise ShapeError(f"row_normalize: expected square matrices, got {p.shape}")
        positive = p > 0
        _record_kink(positive)
        a = np.where(positive, p, np.zeros((), dtype=p.dtype))
        s = None
        if mask is not None:
            if mask.shape != p.shape[:-1]:
                raise ShapeError(f"row_normalize: mask {mask.shape} does not match {p.shape}")
            s = same_status(mask).astype(p.dtype)
            a = a * s
        z = a.sum(axis=-1, keepdims=True) + np.asarray(eps, dtype=p.dtype)
        ctx.update(a=a, z=z, s=s, positive=positive)
        return a / z

    def backward(self, ctx, g):
        a, z, s = ctx["a"], ctx["z"], ctx["s"]
        ga = g / z - (g * a).sum(axis=-1, keepdims=True) / (z * z)
        if s is not None:
            ga = ga * s
        return [ga * ctx["positive"]]


# Thin functional wrappers, one per primitive.

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return apply_primitive("conv2d", inputs, stride=stride, pad=pad)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None, pad: int = 0) -> Tensor:
    return apply_primitive("maxpool2d", [x], kernel=kernel, stride=stride, pad=pad)


def gap(x: Tensor) -> Tensor:
    return apply_primitive("gap", [x])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return apply_primitive("transpose", [x], axes=axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [x], shape=tuple(shape))


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(x: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", [x], factor=float(factor))


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [x], axis=axis)


def log(x: Tensor) -> Tensor:
    return apply_primitive("log", [x])


def clamp(x: Tensor, low: float | None = None, high: float | None = None) -> Tensor:
    return apply_primitive("clamp", [x], low=low, high=high)


def tsum(x: Tensor, axis: int | Sequence[int] | None = None) -> Tensor:
    return apply_primitive("sum", [x], axis=axis)


def tmean(x: Tensor, axis: int | Sequence[int] | None = None) -> Tensor:
    return apply_primitive("mean", [x], axis=axis)


def row_normalize(p: Tensor, mask: np.ndarray | None = None, eps: float = 1e-8) -> Tensor:
    return apply_primitive("row_normalize", [p], mask=mask, eps=eps)


def constant(data: Any, like: Tensor | None = None) -> Tensor:
    """Non-trainable tensor, cast to ``like``'s dtype when given."""
    dtype = like.dtype if like is not None else None
    return Tensor(data, dtype=dtype)
