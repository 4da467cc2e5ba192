"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the handful of operations needed by the two U-Nets and the training
losses are provided. Every op is a plain function that computes its result
with numpy and records a closure mapping the upstream gradient to one
gradient per parent.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Adam",
    "as_tensor",
    "conv2d",
    "upsample_nearest",
    "silu",
    "concat_channels",
    "split_channels",
    "mse_mean",
    "square_mean",
    "linear",
    "pad_replicate",
    "crop",
    "reshape",
    "astype",
]


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it.

    Float32 is the default precision. Float64 data is kept as float64, which
    the loss terms and the gradient-check oracles rely on.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # only explicit float64 numpy data stays float64; Python scalars become float32
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype == np.float64:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ---------------------------------------------------------
    def detach(self) -> "Tensor":
        """Same values, cut from the graph. Nothing flows back through it."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1 or self.data.ndim != 0:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other))

    def __radd__(self, other):
        return _add(as_tensor(other), self)

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    def __rmul__(self, other):
        return _mul(as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return _mul(self, Tensor(np.asarray(1.0 / np.asarray(other, dtype=np.float64), dtype=self.dtype)))

    def __neg__(self):
        return _op(-self.data, (self,), lambda g: (-g,))

    def sum(self) -> "Tensor":
        shape = self.shape
        return _op(np.asarray(self.data.sum(dtype=np.float64), dtype=self.dtype),
                   (self,), lambda g: (np.broadcast_to(g, shape),))

    def mean(self) -> "Tensor":
        n = self.data.size
        shape = self.shape
        return _op(np.asarray(self.data.mean(dtype=np.float64), dtype=self.dtype),
                   (self,), lambda g: (np.broadcast_to(g / n, shape),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _op(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _op(a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _op(ad * bd, (a, b), backward)


# ---------------------------------------------------------------------------
# convolution

def _conv_out_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of an NCHW input with an OIHW kernel (im2col + matmul)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match kernel {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1, dilation >= 1, padding >= 0")
    ho = _conv_out_size(h, kh, stride, padding, dilation)
    wo = _conv_out_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape} and kernel {weight.shape}")

    dtype = np.result_type(x.dtype, weight.dtype)
    xp = x.data.astype(dtype, copy=False)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # cols[c, i, j, n, y, x] = xp[n, c, y*stride + i*dilation, x*stride + j*dilation]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            cols[:, i, j] = xt[:, :, y0:y0 + hs:stride, x0:x0 + ws:stride]
    cols2d = cols.reshape(c * kh * kw, n * ho * wo)
    w2d = weight.data.astype(dtype, copy=False).reshape(o, -1)
    out = (w2d @ cols2d).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias.data.astype(dtype, copy=False)[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        g2d = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2d @ cols2d.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2d.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2d.T @ g2d).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    y0, x0 = i * dilation, j * dilation
                    gxp[:, :, y0:y0 + hs:stride, x0:x0 + ws:stride] += gcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _op(out, parents, backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest expects NCHW, got {x.shape}")
    if factor == 1:
        return _op(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _op(out, (x,), backward)


def silu(x: Tensor) -> Tensor:
    d = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))  # overflow-free logistic
    out = d * sig

    def backward(g):
        return (g * (sig * (1.0 + d * (1.0 - sig))),)

    return _op(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError(f"concat_channels expects NCHW tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels needs equal N, H, W: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    dtype = np.result_type(a.dtype, b.dtype)
    out = np.concatenate([a.data.astype(dtype, copy=False), b.data.astype(dtype, copy=False)], axis=1)
    return _op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def split_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _op(x.data[:, start:stop].copy(), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def astype(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    if np.dtype(dtype) == src:
        return x
    return _op(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


def pad_replicate(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Edge padding on the two spatial axes of an NCHW tensor."""
    if min(top, bottom, left, right) < 0:
        raise ValueError("padding amounts must be non-negative")
    _, _, h, w = x.shape
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)), mode="edge")

    def backward(g):
        g = g.copy()
        if top:
            g[:, :, top] += g[:, :, :top].sum(axis=2)
        if bottom:
            g[:, :, top + h - 1] += g[:, :, top + h:].sum(axis=2)
        g = g[:, :, top:top + h]
        if left:
            g[:, :, :, left] += g[:, :, :, :left].sum(axis=3)
        if right:
            g[:, :, :, left + w - 1] += g[:, :, :, left + w:].sum(axis=3)
        return (g[:, :, :, left:left + w],)

    return _op(out, (x,), backward)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, top:top + height, left:left + width] = g
        return (full,)

    return _op(x.data[:, :, top:top + height, left:left + width].copy(), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias for x of shape (N, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _op(out, parents, backward)


# ---------------------------------------------------------------------------
# losses (accumulated in float64)

def mse_mean(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse_mean shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size
    out = np.asarray(np.mean(diff * diff))

    def backward(g):
        ga = 2.0 * g * diff / n
        return ga, -ga

    return _op(out, (a, b), backward)


def square_mean(x: Tensor) -> Tensor:
    """Mean of squares, the norm used by the filtered loss terms."""
    d = x.data.astype(np.float64)
    n = d.size
    return _op(np.asarray(np.mean(d * d)), (x,), lambda g: (2.0 * g * d / n,))


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction. Moments are float32 like the parameters."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not all(0.0 < b < 1.0 for b in betas):
            raise ValueError("moment decay rates must lie in (0, 1)")
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)
            p.grad = None


def parameters_of(*groups: Mapping[str, Tensor]) -> Iterable[Tensor]:
    for group in groups:
        yield from group.values()
