"""Dense NCHW tensors with reverse-mode differentiation over a fixed op set.

Only the operations the toy U-Net and its training loss need are provided.
Every op works in the dtype of its inputs (float32 in normal use, float64 when a
gradient check wants a high-precision shadow evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class Tensor:
    """An array plus the bookkeeping needed to backpropagate into it."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad: np.ndarray | None = None) -> list["Tensor"]:
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient.

        Returns the nodes in the order they were visited (reverse topological),
        each exactly once.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        visited = []
        for node in reversed(order):
            g = grads.pop(id(node), None)
            visited.append(node)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return visited


def _topological(root: Tensor) -> list[Tensor]:
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


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------- ops


def _columns(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Unfold same-padded k x k patches into a (C*k*k, N*Ho*Wo) matrix."""
    n, c = x.shape[:2]
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo), ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """'Same'-padded 2-D cross-correlation; output is ceil(H/stride) x ceil(W/stride)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    pad = (k - 1) // 2
    cols, ho, wo = _columns(x.data, k, stride)
    wmat = kernel.data.reshape(o, c * k * k)
    out = (wmat @ cols + bias.data[:, None]).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        dk = (gmat @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        db = gmat.sum(axis=1) if bias.requires_grad else None
        dx = None
        if x.requires_grad and stride == 1:
            # input gradient of a same-padded correlation is a same-padded correlation
            # of the output gradient with the spatially flipped, transposed kernel
            flipped = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gcols, _, _ = _columns(g, k, 1)
            dx = (flipped.reshape(c, o * k * k) @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        elif x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, k, k, n, ho, wo)
            dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.data.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, i, j].transpose(1, 0, 2, 3)
                    )
            dx = dxp[:, :, pad:pad + h, pad:pad + w]
        return dx, dk, db

    return _result(np.ascontiguousarray(out), "conv2d", (x, kernel, bias), backward)


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.data.dtype.type(0.25),)

    return _result(out, "avg_pool2", (x,), backward)


def upsample_nearest(x: Tensor) -> Tensor:
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, "upsample_nearest", (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation with ``a`` first, as in the U-Net skip join."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects two NCHW tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: N/H/W mismatch between {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _result(out, "concat_channels", (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (N, F) @ weight (F, G) + bias (G)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot map {x.shape} through weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return (
            g @ weight.data.T if x.requires_grad else None,
            x.data.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _result(out, "linear", (x, weight, bias), backward)


def silu(x: Tensor) -> Tensor:
    one, half = x.data.dtype.type(1), x.data.dtype.type(0.5)
    sig = half + half * np.tanh(half * x.data)  # logistic sigmoid without exp overflow
    out = x.data * sig

    def backward(g):
        return (g * (sig * (one + x.data * (one - sig))),)

    return _result(out, "silu", (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _result(a.data + b.data, "add", (a, b), backward)


def add_channelwise(x: Tensor, v: Tensor) -> Tensor:
    """x (N, C, H, W) + v (N, C) broadcast over the spatial extent."""
    if v.data.ndim != 2 or v.shape != x.shape[:2]:
        raise ShapeError(f"add_channelwise: cannot add {v.shape} to {x.shape}")

    def backward(g):
        return g, g.sum(axis=(2, 3))

    return _result(x.data + v.data[:, :, None, None], "add_channelwise", (x, v), backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.data.dtype)

    def backward(g):
        d = (2.0 / count) * g * diff
        return d.astype(diff.dtype), (-d).astype(diff.dtype)

    return _result(out, "mse_loss", (pred, target), backward)


# --------------------------------------------------------------------------- MACs


@dataclass(frozen=True)
class Conv2dDesc:
    n: int
    cin: int
    cout: int
    k: int
    h_out: int
    w_out: int


@dataclass(frozen=True)
class LinearDesc:
    n: int
    f: int
    g: int


@dataclass(frozen=True)
class FreeDesc:
    """Pooling, upsampling, activations, adds and concatenation: no multiply-accumulates."""

    kind: str
    shape: tuple[int, ...] = ()


OpDesc = Conv2dDesc | LinearDesc | FreeDesc


def macs_of(desc: OpDesc) -> int:
    """Multiply-accumulate count of one op, computed from shapes alone."""
    match desc:
        case Conv2dDesc(n, cin, cout, k, h_out, w_out):
            return n * cin * cout * k * k * h_out * w_out
        case LinearDesc(n, f, g):
            return n * f * g
        case FreeDesc():
            return 0
    raise TypeError(f"unknown op descriptor {desc!r}")
