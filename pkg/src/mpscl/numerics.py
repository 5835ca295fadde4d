"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward closure on
the output tensor. ``backward`` sorts the recorded nodes topologically and
visits each exactly once in reverse order, accumulating ``grad`` buffers.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

LOG_EPS = 1e-7
ACOS_EPS = 1e-7

_state = threading.local()
_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when an operation receives tensors of incompatible shape."""

    def __init__(self, node: str, expected, actual):
        self.node = node
        self.expected = expected
        self.actual = actual
        super().__init__(f"{node}: expected shape {expected}, got {actual}")


class GradientCheckError(ArithmeticError):
    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(f"component {index}: {message}")


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward_from(self)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.node_id = next(_ids)
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        # parents are captured with their grad flag as of recording time
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _wants(t: Tensor) -> bool:
    """True if ``t`` lies on the graph currently being differentiated."""
    live = getattr(_state, "live", None)
    return live is not None and t.node_id in live


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not _wants(t):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(node: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(node, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        if _wants(a):
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if _wants(b):
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        if _wants(a):
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if _wants(b):
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: _accum(x, g * out))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: _accum(x, g / x.data))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, "sqrt", (x,), lambda g: _accum(x, g * 0.5 / out))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, "square", (x,), lambda g: _accum(x, 2.0 * g * x.data))


def cos(x: Tensor) -> Tensor:
    return _make(np.cos(x.data), "cos", (x,), lambda g: _accum(x, -g * np.sin(x.data)))


def arccos(x: Tensor) -> Tensor:
    """arccos with the argument clamped to [-1 + 1e-7, 1 - 1e-7]."""
    xc = np.clip(x.data, -1.0 + ACOS_EPS, 1.0 - ACOS_EPS)
    inside = (x.data >= -1.0 + ACOS_EPS) & (x.data <= 1.0 - ACOS_EPS)

    def bw(g):
        _accum(x, np.where(inside, -g / np.sqrt(1.0 - xc * xc), 0.0))

    return _make(np.arccos(xc), "arccos", (x,), bw)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is inside."""
    data = x.data
    out = np.clip(data, lo, hi) if (lo is not None or hi is not None) else data.copy()
    mask = np.ones_like(data, dtype=bool)
    if lo is not None:
        mask &= data >= lo
    if hi is not None:
        mask &= data <= hi
    return _make(out, "clamp", (x,), lambda g: _accum(x, g * mask))


def safe_log(x: Tensor) -> Tensor:
    """Natural log with the argument clamped below at 1e-7."""
    return log(clamp(x, LOG_EPS, None))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, "sigmoid", (x,), lambda g: _accum(x, g * out * (1.0 - out)))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _make(out, "leaky_relu", (x,), lambda g: _accum(x, np.where(pos, g, slope * g)))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        if _wants(a):
            _accum(a, _unbroadcast(np.where(cond, g, 0.0), a.shape))
        if _wants(b):
            _accum(b, _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(np.where(cond, a.data, b.data), "where", (a, b), bw)


# ----------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out, dtype=np.float64), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / max(n, 1))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, "softmax", (x,), bw)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    mx = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)

    def bw(g):
        _accum(x, np.expand_dims(g, axis) * e / s)

    return _make(out, "logsumexp", (x,), bw)


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", (a.shape[-1:] if a.ndim else "?", "x", "k"), b.shape)

    def bw(g):
        if _wants(a):
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if _wants(b):
            if a.ndim == 2 and b.ndim == 2:
                _accum(b, a.data.T @ g)
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, "matmul", (a, b), bw)


# ------------------------------------------------------------------- reshaping

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", tuple(shape), x.shape) from None
    return _make(out, "reshape", (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), "transpose", (x,), lambda g: _accum(x, g.transpose(inv)))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accum(x, full)

    return _make(np.array(out, dtype=np.float64), "getitem", (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != ax):
            raise ShapeError("concat", tuple(ref), t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, bw)


# ---------------------------------------------------------- image operations
# Layout is NHWC throughout; conv weights are (kh, kw, cin, cout).

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = as_strided(x, (n, oh, ow, kh, kw, c), (s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False)
    return view.reshape(n * oh * ow, kh * kw * c), oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("conv2d", "(N, H, W, C)", x.shape)
    kh, kw, cin, cout = weight.shape
    if x.shape[3] != cin:
        raise ShapeError("conv2d", f"(N, H, W, {cin})", x.shape)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError("conv2d", f"spatial >= ({kh}, {kw}) after padding", xp.shape)
    n = x.shape[0]
    cols, oh, ow = _im2col(np.ascontiguousarray(xp), kh, kw, stride)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.reshape(n * oh * ow, cout)
        if _wants(weight):
            _accum(weight, (cols.T @ gm).reshape(weight.shape))
        if bias is not None and _wants(bias):
            _accum(bias, gm.sum(axis=0))
        if _wants(x):
            hp, wp = xp.shape[1], xp.shape[2]
            if stride == 1:
                # transposed convolution: pad g by k-1, correlate with the flipped kernel
                gd = np.zeros((n, hp + kh - 1, wp + kw - 1, cout))
                gd[:, kh - 1:kh - 1 + oh, kw - 1:kw - 1 + ow, :] = g
                wflip = weight.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
                gcols, _, _ = _im2col(gd, kh, kw, 1)
                dxp = (gcols @ wflip).reshape(n, hp, wp, cin)
            else:
                dcols = (gm @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
                dxp = np.zeros(xp.shape)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
            if padding:
                dxp = dxp[:, padding:hp - padding, padding:wp - padding, :]
            _accum(x, dxp)

    return _make(out, "conv2d", parents, bw)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError("max_pool2d", f"H, W divisible by {k}", x.shape)
    blocks = x.data.reshape(n, h // k, k, w // k, k, c)
    out = blocks.max(axis=(2, 4))
    # first maximal element in each window receives the gradient
    flat = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // k, w // k, c, k * k)
    arg = flat.argmax(axis=-1)

    def bw(g):
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, h // k, w // k, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        _accum(x, gx)

    return _make(out, "max_pool2d", (x,), bw)


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=1), k, axis=2)

    def bw(g):
        _accum(x, g.reshape(n, h, k, w, k, c).sum(axis=(2, 4)))

    return _make(out, "upsample_nearest", (x,), bw)


# ---------------------------------------------------------------- graph / tape

def topological_order(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward_from(output: Tensor, nodes: Sequence[Tensor] | None = None) -> None:
    if output.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    nodes = topological_order(output) if nodes is None else nodes
    for t in nodes:
        if t._backward is not None:
            t.grad = None
    output.grad = np.ones_like(output.data)
    _state.live = {t.node_id for t in nodes}
    try:
        for t in reversed(nodes):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)
                # release intermediate buffers once consumed
                t.grad = None if t is not output else t.grad
    finally:
        _state.live = None


class Graph:
    """A traced computation: a function of tensors plus its declared input shapes.

    ``forward`` validates inputs, runs the function and keeps the node list in
    topological order so that ``backward`` can visit each node once.
    """

    def __init__(self, fn: Callable[..., Tensor], signature: Sequence[tuple[int, ...]] | None = None):
        self.fn = fn
        self.signature = None if signature is None else [tuple(s) for s in signature]
        self.nodes: list[Tensor] | None = None
        self.output: Tensor | None = None

    def forward(self, inputs: Sequence[Tensor]) -> Tensor:
        if self.signature is not None:
            if len(inputs) != len(self.signature):
                raise ShapeError("graph.inputs", len(self.signature), len(inputs))
            for i, (t, s) in enumerate(zip(inputs, self.signature)):
                if tuple(t.shape) != s:
                    raise ShapeError(f"graph.input[{i}]", s, t.shape)
        out = self.fn(*inputs)
        self.output = out
        self.nodes = topological_order(out) if out.requires_grad else [out]
        return out

    def backward(self, output: Tensor | None = None) -> None:
        if self.nodes is None:
            raise RuntimeError("backward called before forward")
        output = self.output if output is None else output
        if output is not self.output:
            raise ValueError("output was not produced by this graph's last forward")
        backward_from(output, self.nodes)


def forward(graph: Graph, inputs: Sequence[Tensor]) -> Tensor:
    return graph.forward(inputs)


def backward(graph: Graph, output: Tensor | None = None) -> None:
    graph.backward(output)


# ---------------------------------------------------------- gradient checking

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-6) -> float:
    """Max over components of |analytic - central| / (|analytic| + |central| + 1e-12)."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.reshape(x0.shape)

    numeric = np.empty(x0.size)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).data.item()
            fm = f(Tensor(xm.reshape(x0.shape))).data.item()
            numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    for i in range(a.size):
        if not np.isfinite(a[i]) or not np.isfinite(numeric[i]):
            raise GradientCheckError(i, f"non-finite gradient (analytic={a[i]}, numeric={numeric[i]})")
    rel = np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
