"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float32 (or float64, for verification) ndarray and
records the operations applied to it; calling ``backward()`` on a scalar
result walks the recorded graph in reverse topological order and
accumulates gradients into every tensor created with
``requires_grad=True``.

The op menu is fixed: elementwise arithmetic, activations, reductions,
reshaping, matmul, 2-d convolution (im2col + BLAS), 2x average pooling,
2x nearest upsampling, group/batch normalization and log-softmax. This is
exactly what the noise-prediction U-Net and the segmentation head need;
there is no general graph compiler.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

# per-thread so read-only inference can run beside a training loop
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, EMA, eval)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense n-d float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- backward ------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar tensor through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() is only defined for scalar tensors")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free interior gradients early; leaves keep theirs
                node.grad = None if node is not self else node.grad
                node._backward = None
                node._parents = ()

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias a buffer shared with another node's gradient
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the dimensions that were broadcast in forward."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", np.float32))
    b = _lift(b, a.dtype)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def pow_const(a: Tensor, p) -> Tensor:
    p = float(p)

    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * (0.5 / out_data))

    return _make(out_data, (a,), backward)


# -- activations ----------------------------------------------------------


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # stable branchless form: e = exp(-|x|), then pick 1/(1+e) or its mirror
    e = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + e)
    return np.where(x >= 0, pos, 1.0 - pos)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_raw(a.data)

    def backward(g):
        _accumulate(a, g * s * (1.0 - s))

    return _make(s, (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid_raw(a.data)

    def backward(g):
        _accumulate(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _make(a.data * s, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


# -- reductions ----------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
        g = g.reshape(kshape)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        _accumulate(a, _expand_reduced(g, a.shape, axis, keepdims).astype(a.dtype, copy=False))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    inv = 1.0 / float(count)

    def backward(g):
        _accumulate(a, _expand_reduced(g * inv, a.shape, axis, keepdims).astype(a.dtype, copy=False))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# -- shape manipulation ---------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def take_slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accumulate(a, full)

    return _make(a.data[sl].copy(), (a,), backward)


# -- matmul ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.ndim < 2:
        raise ValueError(f"matmul expects equal-rank operands >= 2-d, got {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims must match, got {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.swapaxes(-1, -2))
        _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward)


# -- convolution and resampling -------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unfold [B,C,H,W] into contiguous [B, C*kh*kw, Ho*Wo] patch columns.

    Padding is virtual: out-of-range taps write zero strips instead of
    materializing a padded copy of the input.
    """
    B, C, H, W = x.shape
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return x.reshape(B, C, H * W), H, W
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    col = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)

    def _span(offset: int, n_in: int, n_out: int):
        # output rows i whose source row i*stride + offset - padding is in range
        i0 = max(0, -(-(padding - offset) // stride))
        i1 = min(n_out, -(-(n_in + padding - offset) // stride))
        return i0, i1

    for u in range(kh):
        i0, i1 = _span(u, H, Ho)
        for v in range(kw):
            j0, j1 = _span(v, W, Wo)
            dst = col[:, :, u, v]
            if i0 > 0:
                dst[:, :, :i0] = 0.0
            if i1 < Ho:
                dst[:, :, i1:] = 0.0
            if j0 > 0:
                dst[:, :, i0:i1, :j0] = 0.0
            if j1 < Wo:
                dst[:, :, i0:i1, j1:] = 0.0
            dst[:, :, i0:i1, j0:j1] = x[
                :, :,
                i0 * stride + u - padding:(i1 - 1) * stride + u - padding + 1:stride,
                j0 * stride + v - padding:(j1 - 1) * stride + v - padding + 1:stride,
            ]
    return col.reshape(B, C * kh * kw, Ho * Wo), Ho, Wo


def _conv2d_raw(x: np.ndarray, w: np.ndarray, b, stride: int, padding: int) -> np.ndarray:
    B = x.shape[0]
    Cout, _, kh, kw = w.shape
    col, Ho, Wo = _im2col(x, kh, kw, stride, padding)
    out = np.matmul(w.reshape(Cout, -1), col)  # [B, Cout, Ho*Wo]
    if b is not None:
        out += b[:, None]
    return out.reshape(B, Cout, Ho, Wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw] filters."""
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin != Cin_w:
        raise ValueError(f"conv2d channel mismatch: input {Cin}, weight {Cin_w}")
    col, Ho_f, Wo_f = _im2col(x.data, kh, kw, stride, padding)
    out_data = np.matmul(w.data.reshape(Cout, -1), col)
    if b is not None:
        out_data += b.data[:, None]
    out_data = out_data.reshape(B, Cout, Ho_f, Wo_f)
    parents = (x, w) if b is None else (x, w, b)
    # retain the unfolded input for the weight gradient; frozen weights skip it
    saved_col = col if (grad_enabled() and w.requires_grad) else None

    def backward(g):
        Ho, Wo = g.shape[2], g.shape[3]
        g2 = g.reshape(B, Cout, Ho * Wo)
        if w.requires_grad:
            col_b = saved_col
            if col_b is None:
                col_b, _, _ = _im2col(x.data, kh, kw, stride, padding)
            # [B,K,N] @ [B,N,Cout] runs measurably faster than the mirrored form
            dw = np.matmul(col_b, g2.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, np.ascontiguousarray(dw.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            # gradient w.r.t. input: dilate g to the stride-1 domain, then
            # full cross-correlation with the flipped, channel-swapped kernel
            Dh = H + 2 * padding - kh + 1
            Dw = W + 2 * padding - kw + 1
            if stride == 1:
                gd = g
            else:
                gd = np.zeros((B, Cout, Dh, Dw), dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dxp = _conv2d_raw(gd, wf, None, 1, max(kh, kw) - 1)
            _accumulate(x, dxp[:, :, padding:padding + H, padding:padding + W])

    return _make(out_data, parents, backward)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; H and W must be even."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2d needs even spatial dims, got {H}x{W}")
    out_data = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        _accumulate(x, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=g.dtype))

    return _make(out_data, (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        _accumulate(x, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


# -- normalization --------------------------------------------------------


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize [B,C,H,W] per (sample, channel group), then affine per channel."""
    B, C, H, W = x.shape
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(B, C, H, W)
    out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(B, groups, -1)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xhat_g).mean(axis=2, keepdims=True)
            dx = inv * (dxhat - m1 - xhat_g * m2)
            _accumulate(x, dx.reshape(B, C, H, W))

    return _make(out_data, (x, gamma, beta), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B,H,W) with running statistics.

    Running buffers are updated in place during training (biased variance);
    eval mode normalizes with the stored statistics.
    """
    B, C, H, W = x.shape
    eps = np.asarray(eps, dtype=x.dtype)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = inv[None, :, None, None] * (dxhat - m1 - xhat * m2)
            else:
                dx = inv[None, :, None, None] * dxhat
            _accumulate(x, dx)

    return _make(out_data, (x, gamma, beta), backward)


# -- softmax ----------------------------------------------------------------


def log_softmax(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    p = np.exp(out_data)

    def backward(g):
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    return exp(log_softmax(x, axis))
