"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the operators the segmentation networks and the CRF recurrence need are
provided.  Every forward result is checked for NaN/Inf.  Graph nodes carry a
global creation counter; backward visits nodes in strictly decreasing counter
order, which is the exact reverse of forward execution.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFinite, NotScalar, OddSpatialDim, ShapeMismatch, TapeConsumed

__all__ = [
    "Tensor",
    "Function",
    "as_tensor",
    "backward",
    "grad",
    "conv2d",
    "transposed_conv2d",
    "maxpool2x2",
    "upsample2x2",
    "tanh",
    "softmax",
    "softmax_channels",
    "exp",
    "log",
    "matmul",
]

MAX_ORDER = 4
_creation = itertools.count()


class Tensor:
    """A float64 array that can take part in a gradient tape."""

    def __init__(self, data, requires_grad: bool = False, _ctx: Optional["Function"] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_ORDER:
            raise ShapeMismatch(f"tensor order {arr.ndim} exceeds {MAX_ORDER}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx
        self._seq = next(_creation)

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
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return Mul.apply(self, -1.0)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self, floor: Optional[float] = None) -> "Tensor":
        return Log.apply(self, floor=floor)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{op} produced non-finite values")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Function:
    """One recorded operator: forward on arrays, backward on the output gradient."""

    def __init__(self, *parents: Tensor):
        self.parents = parents
        self.consumed = False

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray, needs: Sequence[bool]) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    def release(self) -> None:
        for key in list(vars(self)):
            if key not in ("parents", "consumed"):
                delattr(self, key)
        self.consumed = True

    @classmethod
    def apply(cls, *parents, **kwargs) -> Tensor:
        parents = tuple(as_tensor(p) for p in parents)
        fn = cls(*parents)
        out = fn.forward(*(p.data for p in parents), **kwargs)
        _check_finite(out, cls.__name__)
        needs_grad = any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=needs_grad, _ctx=fn if needs_grad else None)


# ---------------------------------------------------------------------------
# elementwise and structural operators


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g, needs):
        return [_unbroadcast(g, s) if n else None for s, n in zip(self.shapes, needs)]


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g, needs):
        ga = _unbroadcast(g, self.shapes[0]) if needs[0] else None
        gb = _unbroadcast(-g, self.shapes[1]) if needs[1] else None
        return ga, gb


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g, needs):
        ga = _unbroadcast(g * self.b, self.a.shape) if needs[0] else None
        gb = _unbroadcast(g * self.a, self.b.shape) if needs[1] else None
        return ga, gb


class MatMul(Function):
    def forward(self, a, b):
        if a.shape[-1] != b.shape[-2]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        if b.ndim == 2 and a.ndim > 2:
            # one GEMM over the stacked rows instead of a per-batch loop
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
        return a @ b

    def backward(self, g, needs):
        ga = gb = None
        if needs[0]:
            if self.b.ndim == 2 and g.ndim > 2:
                ga = (g.reshape(-1, g.shape[-1]) @ self.b.T).reshape(self.a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(self.b, -1, -2), self.a.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(self.a, -1, -2) @ g, self.b.shape)
        return ga, gb


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, g, needs):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, g, needs):
        return (g.reshape(self.in_shape),)


class GetItem(Function):
    def forward(self, a, index):
        self.in_shape = a.shape
        self.index = index
        return np.array(a[index])

    def backward(self, g, needs):
        out = np.zeros(self.in_shape)
        np.add.at(out, self.index, g)
        return (out,)


class Exp(Function):
    def forward(self, a):
        # overflow is reported as NonFinite by apply()
        with np.errstate(over="ignore"):
            self.y = np.exp(a)
        return self.y

    def backward(self, g, needs):
        return (g * self.y,)


class Log(Function):
    """Natural log, optionally of ``max(x, floor)``; zero gradient where the floor binds."""

    def forward(self, a, floor=None):
        if floor is not None:
            self.mask = a > floor
            a = np.where(self.mask, a, floor)
        else:
            self.mask = None
        self.x = a
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    def backward(self, g, needs):
        gx = g / self.x
        if self.mask is not None:
            gx = np.where(self.mask, gx, 0.0)
        return (gx,)


class Tanh(Function):
    def forward(self, a):
        self.y = np.tanh(a)
        return self.y

    def backward(self, g, needs):
        return (g * (1.0 - self.y * self.y),)


class Softmax(Function):
    def forward(self, a, axis):
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=axis, keepdims=True)
        self.axis = axis
        return self.y

    def backward(self, g, needs):
        y = self.y
        return (y * (g - np.sum(g * y, axis=self.axis, keepdims=True)),)


# ---------------------------------------------------------------------------
# convolutional operators


def _same_pad(k: int) -> tuple:
    # even kernels take the extra row/column on the bottom/right
    total = k - 1
    return total // 2, total - total // 2


class Conv2d(Function):
    def forward(self, x, k, b, padding="same"):
        if x.ndim != 4 or k.ndim != 4:
            raise ShapeMismatch("conv2d expects 4-d input and kernel")
        if x.shape[1] != k.shape[1]:
            raise ShapeMismatch(f"conv2d channels: input {x.shape[1]} vs kernel {k.shape[1]}")
        if b.shape != (k.shape[0],):
            raise ShapeMismatch(f"conv2d bias shape {b.shape} for {k.shape[0]} outputs")
        kh, kw = k.shape[2:]
        if padding == "same":
            (t, bo), (le, r) = _same_pad(kh), _same_pad(kw)
        elif padding == "valid":
            t = bo = le = r = 0
        else:
            raise ValueError(f"unknown padding {padding!r}")
        H, W = x.shape[2:]
        if kh > H + t + bo or kw > W + le + r:
            raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {H}x{W}")
        xp = np.pad(x, ((0, 0), (0, 0), (t, bo), (le, r))) if (t or bo or le or r) else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
        out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,Cout
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        self.win, self.k = win, k
        self.pads = (t, bo, le, r)
        self.xp_shape = xp.shape
        return np.ascontiguousarray(out)

    def backward(self, g, needs):
        gx = gk = gb = None
        kh, kw = self.k.shape[2:]
        if needs[0]:
            cols = np.tensordot(g, self.k, axes=([1], [0]))  # B,Ho,Wo,C,kh,kw
            cols = cols.transpose(0, 3, 1, 2, 4, 5)
            Ho, Wo = g.shape[2:]
            gxp = np.zeros(self.xp_shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + Ho, j : j + Wo] += cols[..., i, j]
            t, bo, le, r = self.pads
            gx = gxp[:, :, t : self.xp_shape[2] - bo, le : self.xp_shape[3] - r]
        if needs[1]:
            gk = np.tensordot(g, self.win, axes=([0, 2, 3], [0, 2, 3]))
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb


class TransposedConv2d(Function):
    def forward(self, x, k, b, stride=1):
        if stride < 1:
            raise ShapeMismatch(f"stride must be >= 1, got {stride}")
        if x.ndim != 4 or k.ndim != 4:
            raise ShapeMismatch("transposed_conv2d expects 4-d input and kernel")
        if x.shape[1] != k.shape[0]:
            raise ShapeMismatch(f"transposed_conv2d channels: input {x.shape[1]} vs kernel {k.shape[0]}")
        if b.shape != (k.shape[1],):
            raise ShapeMismatch(f"transposed_conv2d bias shape {b.shape} for {k.shape[1]} outputs")
        B, _, H, W = x.shape
        cout, kh, kw = k.shape[1:]
        s = stride
        Ho, Wo = (H - 1) * s + kh, (W - 1) * s + kw
        cols = np.tensordot(x, k, axes=([1], [0]))  # B,H,W,Cout,kh,kw
        out = np.zeros((B, cout, Ho, Wo))
        for i in range(H):
            for j in range(W):
                out[:, :, i * s : i * s + kh, j * s : j * s + kw] += cols[:, i, j]
        out += b[None, :, None, None]
        self.x, self.k, self.stride = x, k, s
        return out

    def backward(self, g, needs):
        gx = gk = gb = None
        kh, kw = self.k.shape[2:]
        H, W = self.x.shape[2:]
        s = self.stride
        win = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :H, :W]
        if needs[0]:
            gx = np.tensordot(win, self.k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if needs[1]:
            gk = np.tensordot(self.x, win, axes=([0, 2, 3], [0, 2, 3]))
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb


class MaxPool2x2(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise ShapeMismatch("maxpool2x2 expects a 4-d input")
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise OddSpatialDim(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
        blocks = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(B, C, H // 2, W // 2, 4)
        # argmax returns the first maximum, i.e. row-major tie-breaking inside the block
        self.idx = np.argmax(blocks, axis=-1)[..., None]
        self.in_shape = x.shape
        return np.take_along_axis(blocks, self.idx, axis=-1)[..., 0]

    def backward(self, g, needs):
        B, C, H, W = self.in_shape
        blocks = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(blocks, self.idx, g[..., None], axis=-1)
        gx = blocks.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(B, C, H, W),)


class Upsample2x2(Function):
    def forward(self, x):
        return x.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, g, needs):
        *lead, H, W = g.shape
        return (g.reshape(*lead, H // 2, 2, W // 2, 2).sum(axis=(-3, -1)),)


# ---------------------------------------------------------------------------
# functional API


def conv2d(x, kernel, bias=None, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` [B,Cin,H,W] with ``kernel`` [Cout,Cin,kh,kw]."""
    kernel = as_tensor(kernel)
    if bias is None:
        bias = np.zeros(kernel.shape[0])
    return Conv2d.apply(x, kernel, bias, padding=padding)


def transposed_conv2d(x, kernel, bias=None, stride: int = 1) -> Tensor:
    """Overlap-add of ``kernel`` [Cin,Cout,kh,kw] copies weighted by ``x``.

    Output spatial size is ``(H-1)*stride + kh`` by ``(W-1)*stride + kw``.
    """
    kernel = as_tensor(kernel)
    if bias is None:
        bias = np.zeros(kernel.shape[1])
    return TransposedConv2d.apply(x, kernel, bias, stride=stride)


def maxpool2x2(x) -> Tensor:
    return MaxPool2x2.apply(x)


def upsample2x2(x) -> Tensor:
    return Upsample2x2.apply(x)


def tanh(x) -> Tensor:
    return Tanh.apply(x)


def exp(x) -> Tensor:
    return Exp.apply(x)


def log(x, floor: Optional[float] = None) -> Tensor:
    return Log.apply(x, floor=floor)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def softmax(x, axis: int) -> Tensor:
    return Softmax.apply(x, axis=axis)


def softmax_channels(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] < 2:
        raise ShapeMismatch(f"softmax_channels expects [B,C>=2,H,W], got {x.shape}")
    return Softmax.apply(x, axis=1)


# ---------------------------------------------------------------------------
# reverse pass


def _tape(root: Tensor) -> list:
    """Graph nodes reachable from ``root`` in reverse execution order."""
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._ctx is None or id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(p for p in t._ctx.parents if p.requires_grad)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def _run(root: Tensor, targets: Optional[Sequence[Tensor]], retain_graph: bool) -> dict:
    if root.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    tape = _tape(root)
    relevant = None
    if targets is not None:
        relevant = {id(t) for t in targets}
        for node in reversed(tape):
            if any(id(p) in relevant for p in node._ctx.parents):
                relevant.add(id(node))

    leaf_grads: dict = {}
    pending = {id(root): np.ones(root.shape)}
    if root._ctx is None:
        leaf_grads[id(root)] = (root, pending.pop(id(root)))
    for node in tape:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        fn = node._ctx
        if fn.consumed:
            raise TapeConsumed("graph already consumed by a previous backward pass")
        needs = [p.requires_grad and (relevant is None or id(p) in relevant) for p in fn.parents]
        if not any(needs):
            continue
        for p, pg, need in zip(fn.parents, fn.backward(g, needs), needs):
            if not need or pg is None:
                continue
            if p._ctx is None:
                if id(p) in leaf_grads:
                    prev = leaf_grads[id(p)][1]
                    leaf_grads[id(p)] = (p, prev + pg)
                else:
                    leaf_grads[id(p)] = (p, pg)
            elif id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg
    if not retain_graph:
        for node in tape:
            node._ctx.release()
    return leaf_grads


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    for leaf, g in _run(loss, None, retain_graph).values():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad(loss: Tensor, wrt: Iterable[Tensor], retain_graph: bool = False) -> list:
    """Return gradients of ``loss`` for ``wrt`` without touching any ``.grad``."""
    wrt = list(wrt)
    found = _run(loss, wrt, retain_graph)
    return [found[id(t)][1] if id(t) in found else np.zeros(t.shape) for t in wrt]
