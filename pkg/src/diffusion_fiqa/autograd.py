"""Dense tensors with reverse-mode differentiation on top of numpy.

Every differentiable primitive is a :class:`Function` with a ``forward`` over
plain arrays and a ``backward`` returning one gradient per input. Building an
expression evaluates it eagerly; :func:`forward_eval` can re-run a finished
graph after leaf values change, and :func:`backward` walks it in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def dtype_scope(dtype):
    """Temporarily switch the default floating dtype."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; interior nodes come out of primitive ops and
    remember the function, its parents and the saved context for backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "ctx", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: type[Function] | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx: dict | None = None
        self.name = name

    # shape helpers
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.op.__name__ if self.op else "leaf"
        return f"Tensor(shape={self.shape}, op={tag})"

    def zero_grad(self) -> None:
        self.grad = None

    # operators
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float)):
        # kept wide; _same_dtype narrows it to the partner operand
        return Tensor(value, dtype=np.float64)
    return Tensor(value)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Function:
    """Base for differentiable primitives.

    ``forward(ctx, *arrays, **attrs)`` returns the output array and may stash
    intermediates in ``ctx``; ``backward(ctx, grad)`` returns a tuple with one
    entry per input (``None`` for inputs that need no gradient).
    """

    @staticmethod
    def forward(ctx: dict, *args, **attrs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx: dict = {"attrs": attrs}
        out = cls.forward(ctx, *(t.data for t in tensors), **attrs)
        result = Tensor(out, dtype=out.dtype)
        if _RECORD:
            result.requires_grad = any(t.requires_grad for t in tensors)
            result.op = cls
            result.parents = tensors
            result.ctx = ctx
        return result


_RECORD = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference paths)."""
    global _RECORD
    previous = _RECORD
    _RECORD = False
    try:
        yield
    finally:
        _RECORD = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"operands {a.shape} and {b.shape} do not broadcast") from None


def _same_dtype(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # python scalars wrapped as 0-d tensors must not upcast float32 graphs
    if a.dtype != b.dtype:
        if a.ndim == 0 and b.ndim == 0:
            narrow = min(a.dtype, b.dtype, key=lambda d: d.itemsize)
            a, b = a.astype(narrow), b.astype(narrow)
        elif a.ndim == 0:
            a = a.astype(b.dtype)
        elif b.ndim == 0:
            b = b.astype(a.dtype)
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("add", a, b)
        a, b = _same_dtype(a, b)
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("sub", a, b)
        a, b = _same_dtype(a, b)
        ctx["shapes"] = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("mul", a, b)
        a, b = _same_dtype(a, b)
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("div", a, b)
        a, b = _same_dtype(a, b)
        ctx["a"], ctx["b"] = a, b
        return a / b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(grad / b, a.shape), _unbroadcast(-grad * a / (b * b), b.shape)


class Power(Function):
    @staticmethod
    def forward(ctx, a, exponent):
        ctx["a"] = a
        return a ** exponent

    @staticmethod
    def backward(ctx, grad):
        a = ctx["a"]
        p = ctx["attrs"]["exponent"]
        return (grad * p * a ** (p - 1),)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["out"],)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["a"] = a
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        return (grad / ctx["a"],)


class Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.sqrt(a)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, grad):
        return (grad * 0.5 / ctx["out"],)


# ---------------------------------------------------------------------------
# activations


class ReLU(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["mask"] = a > 0
        return np.where(ctx["mask"], a, 0).astype(a.dtype)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["mask"],)


class SiLU(Function):
    @staticmethod
    def forward(ctx, a):
        s = 1.0 / (1.0 + np.exp(-a))
        s = s.astype(a.dtype)
        ctx["a"], ctx["s"] = a, s
        return a * s

    @staticmethod
    def backward(ctx, grad):
        a, s = ctx["a"], ctx["s"]
        return (grad * (s * (1 + a * (1 - s))),)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, a):
        s = (1.0 / (1.0 + np.exp(-a))).astype(a.dtype)
        ctx["s"] = s
        return s

    @staticmethod
    def backward(ctx, grad):
        s = ctx["s"]
        return (grad * s * (1 - s),)


class LogSoftmax(Function):
    @staticmethod
    def forward(ctx, a, axis):
        shifted = a - a.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, grad):
        axis = ctx["attrs"]["axis"]
        soft = np.exp(ctx["out"])
        return (grad - soft * grad.sum(axis=axis, keepdims=True),)


# ---------------------------------------------------------------------------
# reductions and shape ops


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis, keepdims):
        ctx["shape"] = a.shape
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        shape = ctx["shape"]
        axis, keepdims = ctx["attrs"]["axis"], ctx["attrs"]["keepdims"]
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a, axis, keepdims):
        ctx["shape"] = a.shape
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        ctx["count"] = a.size // max(out.size, 1) if a.size else 1
        return out.astype(a.dtype)

    @staticmethod
    def backward(ctx, grad):
        shape = ctx["shape"]
        axis, keepdims = ctx["attrs"]["axis"], ctx["attrs"]["keepdims"]
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / ctx["count"], shape).copy(),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx["shape"] = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx["shape"]),)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis):
        ref = list(arrays[0].shape)
        for arr in arrays[1:]:
            other = list(arr.shape)
            if len(other) != len(ref) or any(
                i != axis % len(ref) and x != y for i, (x, y) in enumerate(zip(ref, other))
            ):
                raise ShapeError("concat", f"incompatible shapes {tuple(ref)} and {arr.shape}")
        ctx["sizes"] = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        axis = ctx["attrs"]["axis"]
        splits = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.split(grad, splits, axis=axis))


# ---------------------------------------------------------------------------
# linear algebra and convolution


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx["a"], ctx["b"]
        return grad @ b.T, a.T @ grad


def _conv_padding(kernel: int, padding: str) -> int:
    if padding == "same":
        return kernel // 2
    if padding == "valid":
        return 0
    raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")


class Conv2d(Function):
    """NHWC convolution (cross-correlation) with zero padding; weight is (O, k, k, C)."""

    @staticmethod
    def forward(ctx, x, w, stride, padding):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError("conv2d", f"expected 4-d input and weight, got {x.shape} and {w.shape}")
        n, h, wd, c = x.shape
        o, kh, kw, ci = w.shape
        if ci != c:
            raise ShapeError("conv2d", f"input has {c} channels, weight expects {ci}")
        if kh != kw:
            raise ShapeError("conv2d", f"square kernels only, got {kh}x{kw}")
        if stride not in (1, 2):
            raise ContractError(f"conv2d stride must be 1 or 2, got {stride}")
        pad = _conv_padding(kh, padding)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        hp, wp = xp.shape[1], xp.shape[2]
        if hp < kh or wp < kw:
            raise ShapeError("conv2d", f"input {x.shape} smaller than kernel {kh}x{kw}")
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
        out = cols @ w.reshape(o, -1).T
        ctx.update(cols=cols, w=w, xshape=x.shape, pad=pad, hw=(ho, wo), padded=(hp, wp))
        return out.reshape(n, ho, wo, o)

    @staticmethod
    def backward(ctx, grad):
        cols, w = ctx["cols"], ctx["w"]
        n, h, wd, c = ctx["xshape"]
        o, k, _, _ = w.shape
        ho, wo = ctx["hw"]
        hp, wp = ctx["padded"]
        stride, pad = ctx["attrs"]["stride"], ctx["pad"]
        g = grad.reshape(n * ho * wo, o)
        dw = (g.T @ cols).reshape(w.shape)
        dcols = (g @ w.reshape(o, -1)).reshape(n, ho, wo, k, k, c)
        dxp = np.zeros((n, hp, wp, c), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
        return np.ascontiguousarray(dx), dw


class Upsample2x(Function):
    """Nearest-neighbour x2 upsampling of an NHWC tensor."""

    @staticmethod
    def forward(ctx, x):
        if x.ndim != 4:
            raise ShapeError("upsample2x", f"expected NHWC input, got {x.shape}")
        return x.repeat(2, axis=1).repeat(2, axis=2)

    @staticmethod
    def backward(ctx, grad):
        n, h2, w2, c = grad.shape
        return (grad.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)),)


def _group_sum(x3: np.ndarray, groups: int) -> np.ndarray:
    """Sum an (N, HW, C) array over positions and within channel groups -> (N, 1, C)."""
    n, _, c = x3.shape
    per_channel = x3.sum(axis=1, dtype=np.float64)
    per_group = per_channel.reshape(n, groups, c // groups).sum(axis=2, keepdims=True)
    return np.repeat(per_group, c // groups, axis=2).reshape(n, 1, c)


class GroupNorm(Function):
    """Normalise NHWC activations over (H, W, channels-in-group), no affine."""

    @staticmethod
    def forward(ctx, x, groups, eps):
        if x.ndim != 4:
            raise ShapeError("group_norm", f"expected NHWC input, got {x.shape}")
        n, h, w, c = x.shape
        if c % groups:
            raise ShapeError("group_norm", f"{c} channels not divisible into {groups} groups")
        x3 = x.reshape(n, h * w, c)
        m = h * w * (c // groups)
        mu = _group_sum(x3, groups) / m
        var = np.maximum(_group_sum(x3 * x3, groups) / m - mu * mu, 0.0)
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = (x3 - mu.astype(x.dtype)) * inv
        ctx.update(xhat=xhat, inv=inv, m=m)
        return xhat.reshape(x.shape)

    @staticmethod
    def backward(ctx, grad):
        xhat, inv, m = ctx["xhat"], ctx["inv"], ctx["m"]
        groups = ctx["attrs"]["groups"]
        g = grad.reshape(xhat.shape)
        gs = _group_sum(g, groups).astype(g.dtype)
        gx = _group_sum(g * xhat, groups).astype(g.dtype)
        dx = inv / m * (m * g - gs - xhat * gx)
        return (dx.reshape(grad.shape).astype(grad.dtype),)


class MSE(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape:
            raise ShapeError("mse", f"prediction {a.shape} vs target {b.shape}")
        a, b = _same_dtype(a, b)
        diff = a - b
        ctx["diff"] = diff
        return np.asarray(np.mean(diff * diff), dtype=a.dtype)

    @staticmethod
    def backward(ctx, grad):
        diff = ctx["diff"]
        g = grad * 2.0 * diff / diff.size
        return g.astype(diff.dtype), (-g).astype(diff.dtype)


# ---------------------------------------------------------------------------
# functional surface


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def power(a, exponent: float) -> Tensor:
    return Power.apply(a, exponent=float(exponent))


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def sqrt(a) -> Tensor:
    return Sqrt.apply(a)


def relu(a) -> Tensor:
    return ReLU.apply(a)


def silu(a) -> Tensor:
    return SiLU.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def log_softmax(a, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(a, axis=axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def conv2d(x, w, stride: int = 1, padding: str = "same") -> Tensor:
    return Conv2d.apply(x, w, stride=stride, padding=padding)


def upsample2x(x) -> Tensor:
    return Upsample2x.apply(x)


def group_norm(x, groups: int, eps: float = 1e-5) -> Tensor:
    return GroupNorm.apply(x, groups=groups, eps=eps)


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    return GroupNorm.apply(x, groups=as_tensor(x).shape[-1], eps=eps)


def mse(pred, target) -> Tensor:
    return MSE.apply(pred, target)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def forward_eval(root: Tensor) -> np.ndarray:
    """Recompute every interior node from the current leaf values."""
    for node in topological_order(root):
        if node.op is None:
            continue
        ctx = {"attrs": node.ctx["attrs"]}
        out = node.op.forward(ctx, *(p.data for p in node.parents), **ctx["attrs"])
        node.data = out
        node.ctx = ctx
    return root.data


def backward(root: Tensor, grad: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it.

    Returns a mapping from each gradient-requiring leaf to its gradient.
    """
    if grad is None:
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    order = topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.op is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        parent_grads = node.op.backward(node.ctx, g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def numerical_gradient(
    fn: Callable[[], Tensor], leaf: Tensor, eps: float = 1e-5
) -> np.ndarray:
    """Central finite differences of a scalar-valued ``fn`` w.r.t. ``leaf``."""
    flat = leaf.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn().data)
        flat[i] = orig - eps
        minus = float(fn().data)
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return out.reshape(leaf.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(fn: Callable[[], Tensor], leaves: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and finite-difference gradients."""
    leaves = list(leaves)
    for leaf in leaves:
        leaf.zero_grad()
    backward(fn())
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numerical_gradient(fn, leaf, eps)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
