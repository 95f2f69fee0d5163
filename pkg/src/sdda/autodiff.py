"""Small dense-tensor engine with reverse-mode automatic differentiation.

Every differentiable piece of the SDDA pipeline (the EEGNet-style backbone,
cross-entropy, distillation, MK-MMD and confusion losses) is built from the
primitives defined here. Tensors wrap numpy arrays; each primitive records
its parents and a closure mapping the output gradient to parent gradients.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "Graph",
    "GradCheckReport",
    "grad_check",
    "precision",
    "set_precision",
    "get_dtype",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "conv2d",
    "avg_pool2d",
    "elu",
    "batch_norm",
    "BatchNormState",
    "dropout",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "clip_min",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "index",
]

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype: type = np.float32


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


def set_precision(mode: str) -> None:
    global _dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[mode]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    global _dtype
    previous = _dtype
    set_precision(mode)
    try:
        yield
    finally:
        _dtype = previous


class Tensor:
    """An immutable value node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
        """Create the output node of a primitive.

        ``backward`` receives the gradient w.r.t. the output and returns one
        gradient (or None) per parent, in order.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor.from_op(self.data, (), None, "detach")

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key) -> Tensor:
        return index(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative post-order DFS; deep networks would overflow the recursion limit
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operands {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return Tensor.from_op(a.data * a.data.dtype.type(c), (a,), backward, "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor.from_op(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive (apply clip_min first)")

    def backward(g):
        return (g / a.data,)

    return Tensor.from_op(np.log(a.data), (a,), backward, "log")


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where the input is above the floor."""
    keep = a.data > floor

    def backward(g):
        return (g * keep,)

    return Tensor.from_op(np.maximum(a.data, a.data.dtype.type(floor)), (a,), backward, "clip_min")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, alpha * np.expm1(np.minimum(a.data, 0)))
    out = out.astype(a.data.dtype, copy=False)

    def backward(g):
        return (g * np.where(pos, 1.0, out + alpha).astype(g.dtype, copy=False),)

    return Tensor.from_op(out, (a,), backward, "elu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return scale(sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor.from_op(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor.from_op(a.data.transpose(axes), (a,), backward, "transpose")


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; the gradient is scattered back."""
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return Tensor.from_op(np.array(out), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: expected (n,k)@(k,m), got {a.shape}@{b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def conv2d(x: Tensor, w: Tensor, padding: str = "valid", groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation with stride 1.

    ``x`` is (N, C_in, H, W) and ``w`` is (C_out, C_in // groups, kh, kw).
    ``padding`` is "valid" or "same" (extra padding goes on the right/bottom
    for even kernels). ``groups == C_in`` gives a depthwise convolution.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, c_in_g, kh, kw = w.shape
    if c_in % groups or c_out % groups or c_in // groups != c_in_g:
        raise ShapeError(
            f"conv2d: weight {w.shape} expects {c_in_g * groups} input channels "
            f"in {groups} groups, got input {x.shape}"
        )
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pad(kh), _same_pad(kw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than input {(h, wd)}")
    if c_in_g == 1 and groups > 1:
        return _depthwise_conv2d(x, w, xp, (pt, pl), (ho, wo))
    c_out_g = c_out // groups
    # windows: (N, C_in, Ho, Wo, kh, kw), a strided view
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.empty((n, c_out, ho, wo), dtype=np.result_type(x.data, w.data))
    for gi in range(groups):
        ci = slice(gi * c_in_g, (gi + 1) * c_in_g)
        co = slice(gi * c_out_g, (gi + 1) * c_out_g)
        res = np.tensordot(windows[:, ci], w.data[co], axes=([1, 4, 5], [1, 2, 3]))
        out[:, co] = res.transpose(0, 3, 1, 2)

    def backward(g):
        gw = np.empty_like(w.data) if w.requires_grad else None
        gx = np.zeros_like(xp) if x.requires_grad else None
        for gi in range(groups):
            ci = slice(gi * c_in_g, (gi + 1) * c_in_g)
            co = slice(gi * c_out_g, (gi + 1) * c_out_g)
            gg = g[:, co]
            if gw is not None:
                gw[co] = np.tensordot(gg, windows[:, ci], axes=([0, 2, 3], [0, 2, 3]))
            if gx is not None:
                # (N, Ho, Wo, C_in_g, kh, kw)
                gwin = np.tensordot(gg, w.data[co], axes=([1], [0]))
                for i in range(kh):
                    for j in range(kw):
                        gx[:, ci, i : i + ho, j : j + wo] += gwin[..., i, j].transpose(0, 3, 1, 2)
        if gx is not None:
            gx = gx[:, :, pt : pt + h, pl : pl + wd]
        return gx, gw

    return Tensor.from_op(out, (x, w), backward, "conv2d")


def _depthwise_conv2d(x: Tensor, w: Tensor, xp: np.ndarray, offset: tuple[int, int], out_hw: tuple[int, int]) -> Tensor:
    # one input channel per group: accumulate shifted copies, one per kernel tap
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    mult = c_out // c_in
    ho, wo = out_hw
    pt, pl = offset
    wk = w.data.reshape(c_in, mult, kh, kw)
    out = np.zeros((n, c_in, mult, ho, wo), dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, None, i : i + ho, j : j + wo] * wk[None, :, :, i, j, None, None]

    def backward(g):
        g5 = g.reshape(n, c_in, mult, ho, wo)
        gw = gx = None
        if w.requires_grad:
            gw = np.empty_like(wk)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.einsum("ncmhw,nchw->cm", g5, xp[:, :, i : i + ho, j : j + wo])
            gw = gw.reshape(w.shape)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho, j : j + wo] += np.einsum("ncmhw,cm->nchw", g5, wk[:, :, i, j])
            gx = gxp[:, :, pt : pt + h, pl : pl + wd]
        return gx, gw

    return Tensor.from_op(out.reshape(n, c_out, ho, wo), (x, w), backward, "conv2d")


def avg_pool2d(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    """Non-overlapping average pooling (stride = kernel); trailing remainder dropped."""
    kh, kw = kernel
    n, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: kernel {kernel} larger than input {(h, w)}")
    crop = x.data[:, :, : ho * kh, : wo * kw]
    out = crop.reshape(n, c, ho, kh, wo, kw).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, kh, axis=2), kw, axis=3) / (kh * kw)
        gx[:, :, : ho * kh, : wo * kw] = spread
        return (gx,)

    return Tensor.from_op(out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------------------
# normalization / regularization


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> BatchNormState:
        dtype = dtype or _dtype
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization over all axes except axis 1.

    Train mode normalizes with batch statistics and updates ``state`` in
    place (momentum update, unbiased variance); eval mode uses the running
    statistics and leaves ``state`` untouched.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: expected affine params of shape ({c},), got {gamma.shape}, {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    count = x.data.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        unbiased = var * (count / max(count - 1, 1))
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = (xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)).astype(x.data.dtype, copy=False)

    def backward(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (
                inv_std.reshape(bshape)
                / count
                * (
                    count * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx.astype(x.data.dtype, copy=False), g_gamma, g_beta

    return Tensor.from_op(out, (x, gamma, beta), backward, "batch_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit seeded generator")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)

    def backward(g):
        return (g * mask,)

    return Tensor.from_op(x.data * mask, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# named-leaf graphs and gradient checking


class Graph:
    """A scalar- or tensor-valued function of named leaves.

    ``build`` receives one Tensor keyword argument per leaf name and returns
    the root Tensor. ``forward`` binds arrays to the leaves and evaluates;
    ``backward`` then returns the gradient of the (scalar) root w.r.t. every
    trainable leaf, zeros for leaves the root does not depend on.
    """

    def __init__(self, build: Callable[..., Tensor], leaves: Sequence[str], trainable: Sequence[str] | None = None):
        self.build = build
        self.leaves = tuple(leaves)
        self.trainable = tuple(leaves if trainable is None else trainable)
        unknown = set(self.trainable) - set(self.leaves)
        if unknown:
            raise ValueError(f"trainable leaves {sorted(unknown)} are not declared leaves")
        self._bound: dict[str, Tensor] | None = None
        self._root: Tensor | None = None

    def forward(self, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
        missing = [name for name in self.leaves if name not in bindings]
        if missing:
            raise ValueError(f"unbound leaves: {missing}")
        self._bound = {
            name: Tensor(bindings[name], requires_grad=name in self.trainable, name=name) for name in self.leaves
        }
        root = self.build(**self._bound)
        if not isinstance(root, Tensor):
            raise TypeError("graph builder must return a Tensor")
        self._root = root
        return root.data

    def backward(self) -> dict[str, np.ndarray]:
        if self._root is None or self._bound is None:
            raise RuntimeError("backward called before forward")
        for t in self._bound.values():
            t.grad = None
        self._root.backward()
        grads = {}
        for name in self.trainable:
            leaf = self._bound[name]
            grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        self._root = None
        return grads


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    step: float
    failed: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failed

    def __str__(self) -> str:
        lines = [f"grad_check {'PASS' if self.passed else 'FAIL'} (step={self.step:g}, tol={self.tol:g})"]
        for name, err in self.errors.items():
            flag = "FAIL" if name in self.failed else "ok"
            lines.append(f"  {name:<24s} {err:.3e} {flag}")
        return "\n".join(lines)


# Below this gradient magnitude the error is measured against the floor
# instead, so leaves whose true gradient is (structurally) zero are compared
# in absolute terms rather than amplifying finite-difference noise.
GRAD_SCALE_FLOOR = 1e-3


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale_ = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    return diff / max(scale_, GRAD_SCALE_FLOOR)


def grad_check(
    graph: Graph | Callable[..., Tensor],
    bindings: Mapping[str, np.ndarray],
    step: float = 1e-6,
    tol: float = 1e-5,
    wrt: Sequence[str] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences in 64-bit.

    The error for a leaf is max|analytic - numeric| over the checked
    coordinates, divided by the largest gradient magnitude seen for that
    leaf (or by ``GRAD_SCALE_FLOOR`` when all of them are smaller).
    ``max_coords`` limits the number of seeded random coordinates perturbed
    per leaf.
    """
    if not np.isfinite(step) or step <= 0 or step < np.finfo(np.float64).tiny:
        raise ValueError(f"degenerate finite-difference step {step!r}")
    with precision("float64"):
        if not isinstance(graph, Graph):
            names = list(bindings)
            graph = Graph(graph, names, trainable=wrt if wrt is not None else names)
        base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
        out = graph.forward(base)
        if np.size(out) != 1:
            raise ValueError(f"grad_check needs a scalar graph, root has shape {np.shape(out)}")
        analytic = graph.backward()
        rng = np.random.default_rng(seed)
        errors: dict[str, float] = {}
        failed: list[str] = []
        for name in wrt if wrt is not None else graph.trainable:
            value = base[name]
            flat_idx = np.arange(value.size)
            if max_coords is not None and value.size > max_coords:
                flat_idx = np.sort(rng.choice(value.size, size=max_coords, replace=False))
            numeric = np.empty(len(flat_idx))
            for k, idx in enumerate(flat_idx):
                pos = np.unravel_index(idx, value.shape)
                orig = value[pos]
                value[pos] = orig + step
                f_plus = float(graph.forward(base))
                value[pos] = orig - step
                f_minus = float(graph.forward(base))
                value[pos] = orig
                numeric[k] = (f_plus - f_minus) / (2 * step)
            err = _relative_error(analytic[name].reshape(-1)[flat_idx], numeric)
            errors[name] = err
            if not err <= tol:
                failed.append(name)
    return GradCheckReport(errors=errors, tol=tol, step=step, failed=failed)
