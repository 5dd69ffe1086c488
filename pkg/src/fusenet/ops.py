"""Differentiable operators used by the backbones and the fusion head.

Convolution and pooling share an im2col layout built from
``numpy.lib.stride_tricks.sliding_window_view``; their backward passes
scatter window gradients back with one strided slice-add per kernel tap,
which keeps the reduction order fixed.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, ShapeError
from .rng import Rng
from .tensor import Function, Tensor


# ---------------------------------------------------------------- elementwise


class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, a, factor):
        self.factor = factor
        return a * a.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class BiasAdd(Function):
    """Add a per-channel bias along axis 1 (the only broadcast supported)."""

    def forward(self, x, b):
        if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias of shape {b.shape} does not match input {x.shape}")
        self.axes = (0,) + tuple(range(2, x.ndim))
        return x + b.reshape((1, -1) + (1,) * (x.ndim - 2))

    def backward(self, grad):
        return grad, grad.sum(axis=self.axes)


class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad):
        return (np.full(self.shape, grad / np.prod(self.shape), dtype=grad.dtype),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Sigmoid(Function):
    def forward(self, z):
        e = np.exp(-np.abs(z))
        self.out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


# ---------------------------------------------------------------- linear algebra


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Linear(Function):
    """``x @ weight.T + bias`` with weight stored as (out_features, in_features)."""

    def forward(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear layer expects input width {w.shape[1]}, got {x.shape}")
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, grad):
        return grad @ self.w, grad.T @ self.x, grad.sum(axis=0)


# ---------------------------------------------------------------- convolution


def _out_size(size, kernel, stride, padding, what):
    span = size + 2 * padding - kernel
    if span < 0 or stride < 1:
        raise ShapeError(
            f"{what}: kernel {kernel} with stride {stride}, padding {padding} "
            f"does not fit input size {size}"
        )
    return span // stride + 1


def _windows(xp, kh, kw, stride, ho, wo):
    """(B, C, Ho, Wo, kh, kw) view of the padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _scatter_windows(gwin, padded_shape, kh, kw, stride, padding, h, w):
    """Adjoint of ``_windows``: fold (B, C, Ho, Wo, kh, kw) gradients back to the input."""
    ho, wo = gwin.shape[2], gwin.shape[3]
    dxp = np.zeros(padded_shape, dtype=gwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += gwin[
                :, :, :, :, i, j
            ]
    return dxp[:, :, padding : padding + h, padding : padding + w]


class Conv2d(Function):
    def forward(self, x, w, b, stride=1, padding=0, groups=1):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
        bsz, cin, h, wd = x.shape
        cout, cg, kh, kw = w.shape
        g = groups
        if g < 1 or cin % g or cout % g:
            raise ConfigurationError(
                f"conv2d channels (in={cin}, out={cout}) are not divisible by groups={g}"
            )
        if cg != cin // g:
            raise ShapeError(f"conv2d weight {w.shape} expects {cg * g} input channels, got {cin}")
        if b is not None and b.shape != (cout,):
            raise ShapeError(f"conv2d bias {b.shape} does not match {cout} output channels")
        ho = _out_size(h, kh, stride, padding, "conv2d")
        wo = _out_size(wd, kw, stride, padding, "conv2d")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        win = _windows(xp, kh, kw, stride, ho, wo).reshape(bsz, g, cg, ho, wo, kh, kw)
        cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(g, bsz * ho * wo, cg * kh * kw)
        og = cout // g
        wmat = w.reshape(g, og, cg * kh * kw).transpose(0, 2, 1)
        out = np.matmul(cols, wmat)
        out = out.reshape(g, bsz, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(bsz, cout, ho, wo)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)
        self.ctx = (x.shape, xp.shape, w.shape, cols, wmat, stride, padding, g, b is not None)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        xshape, pshape, wshape, cols, wmat, stride, padding, g, has_bias = self.ctx
        bsz, cin, h, wd = xshape
        cout, cg, kh, kw = wshape
        og = cout // g
        ho, wo = grad.shape[2], grad.shape[3]
        go = grad.reshape(bsz, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, bsz * ho * wo, og)
        gw = np.matmul(cols.transpose(0, 2, 1), go).transpose(0, 2, 1).reshape(wshape)
        gb = grad.sum(axis=(0, 2, 3)) if has_bias else None
        if not self.needs_input_grad[0]:
            return None, gw, gb
        gcols = np.matmul(go, wmat.transpose(0, 2, 1))
        gwin = gcols.reshape(g, bsz, ho, wo, cg, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6)
        gwin = gwin.reshape(bsz, cin, ho, wo, kh, kw)
        gx = _scatter_windows(gwin, pshape, kh, kw, stride, padding, h, wd)
        return gx, gw, gb


class _Conv2dNoBias(Conv2d):
    def forward(self, x, w, **kw):
        return super().forward(x, w, None, **kw)

    def backward(self, grad):
        gx, gw, _ = super().backward(grad)
        return gx, gw


# ---------------------------------------------------------------- pooling


class MaxPool2d(Function):
    def forward(self, x, kernel, stride, padding):
        bsz, c, h, w = x.shape
        ho = _out_size(h, kernel, stride, padding, "max pool")
        wo = _out_size(w, kernel, stride, padding, "max pool")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf) if padding else x
        rows, cols = (ho - 1) * stride + 1, (wo - 1) * stride + 1
        best = xp[:, :, 0:rows:stride, 0:cols:stride].copy()
        idx = np.zeros(best.shape, dtype=np.int64)
        # taps in row-major order; strict ">" keeps the first maximum
        for t in range(1, kernel * kernel):
            i, j = divmod(t, kernel)
            tap = xp[:, :, i : i + rows : stride, j : j + cols : stride]
            better = tap > best
            np.copyto(best, tap, where=better)
            idx[better] = t
        self.idx = idx
        self.ctx = (x.shape, xp.shape, kernel, stride, padding)
        return best

    def backward(self, grad):
        (bsz, c, h, w), pshape, k, stride, padding = self.ctx
        ho, wo = grad.shape[2], grad.shape[3]
        hp, wp = pshape[2], pshape[3]
        di, dj = np.divmod(self.idx, k)
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + di
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + dj
        plane = np.arange(bsz * c).reshape(bsz, c, 1, 1) * (hp * wp)
        flat = (plane + rows * wp + cols).reshape(-1)
        dxp = np.bincount(flat, weights=grad.reshape(-1), minlength=bsz * c * hp * wp)
        dxp = dxp.astype(grad.dtype).reshape(pshape)
        return (dxp[:, :, padding : padding + h, padding : padding + w],)


class AvgPool2d(Function):
    """Window mean; zero padding counts toward the divisor."""

    def forward(self, x, kernel, stride, padding):
        bsz, c, h, w = x.shape
        ho = _out_size(h, kernel, stride, padding, "avg pool")
        wo = _out_size(w, kernel, stride, padding, "avg pool")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        win = _windows(xp, kernel, kernel, stride, ho, wo)
        self.ctx = (x.shape, xp.shape, kernel, stride, padding)
        return win.mean(axis=(-2, -1), dtype=x.dtype)

    def backward(self, grad):
        (bsz, c, h, w), pshape, k, stride, padding = self.ctx
        share = grad / grad.dtype.type(k * k)
        gwin = np.broadcast_to(share[..., None, None], grad.shape + (k, k))
        return (_scatter_windows(gwin, pshape, k, k, stride, padding, h, w),)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True, dtype=x.dtype)

    def backward(self, grad):
        h, w = self.shape[2], self.shape[3]
        return (np.broadcast_to(grad / grad.dtype.type(h * w), self.shape).copy(),)


# ---------------------------------------------------------------- structure


class Concat(Function):
    def forward(self, *arrays, axis=0):
        ref = arrays[0]
        axis = axis % ref.ndim
        for i, a in enumerate(arrays):
            if a.ndim != ref.ndim or any(
                a.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
            ):
                raise ShapeError(
                    f"concat along axis {axis}: tensor {i} has shape {a.shape}, "
                    f"incompatible with tensor 0 of shape {ref.shape}"
                )
        self.axis = axis
        self.offsets = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.offsets, axis=self.axis))


class Slice(Function):
    def forward(self, x, start, stop, axis):
        self.ctx = (x.shape, start, stop, axis)
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        return x[tuple(index)].copy()

    def backward(self, grad):
        shape, start, stop, axis = self.ctx
        out = np.zeros(shape, dtype=grad.dtype)
        index = [slice(None)] * len(shape)
        index[axis] = slice(start, stop)
        out[tuple(index)] = grad
        return (out,)


def _shuffle(x, groups):
    b, c, h, w = x.shape
    return x.reshape(b, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(b, c, h, w)


class ChannelShuffle(Function):
    def forward(self, x, groups):
        c = x.shape[1]
        if groups < 1 or c % groups:
            raise ConfigurationError(f"channel_shuffle: {c} channels not divisible by groups={groups}")
        self.groups = groups
        return _shuffle(x, groups)

    def backward(self, grad):
        return (_shuffle(grad, grad.shape[1] // self.groups),)


class LogSoftmax(Function):
    def forward(self, x):
        if x.ndim != 2:
            raise ShapeError(f"log_softmax expects a (B, C) tensor, got {x.shape}")
        shifted = x - x.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.out = out
        return out

    def backward(self, grad):
        return (grad - np.exp(self.out) * grad.sum(axis=1, keepdims=True),)


class NLLLoss(Function):
    def forward(self, log_probs, labels):
        self.ctx = (log_probs.shape, labels)
        picked = log_probs[np.arange(len(labels)), labels]
        return np.asarray(-picked.mean(), dtype=log_probs.dtype)

    def backward(self, grad):
        shape, labels = self.ctx
        out = np.zeros(shape, dtype=grad.dtype)
        out[np.arange(len(labels)), labels] = -grad / shape[0]
        return (out,)


class SigmoidBCE(Function):
    """Mean of max(z, 0) - z*y + log(1 + exp(-|z|))."""

    def forward(self, z, y):
        self.z, self.y = z, y
        return np.asarray(
            np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))), dtype=z.dtype
        )

    def backward(self, grad):
        e = np.exp(-np.abs(self.z))
        sig = np.where(self.z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (grad * (sig - self.y) / self.z.size,)


# ---------------------------------------------------------------- public API


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    return BiasAdd.apply(x, bias)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors Tensor.sum
    return Sum.apply(a)


def mean(a: Tensor) -> Tensor:
    return Mean.apply(a)


def reshape(a: Tensor, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


def sigmoid(z: Tensor) -> Tensor:
    return Sigmoid.apply(z)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def log_softmax(x: Tensor) -> Tensor:
    return LogSoftmax.apply(x)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-d cross-correlation (no kernel flip) with optional channel groups.

    Output size per spatial axis is ``(size + 2*padding - k) // stride + 1``.
    """
    if bias is None:
        return _Conv2dNoBias.apply(x, weight, stride=stride, padding=padding, groups=groups)
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding, groups=groups)


def pool2d(x: Tensor, kind: str, kernel: int = 2, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Windowed ``max`` / ``avg`` pooling, or ``global_avg`` (B, C, 1, 1)."""
    if kind == "global_avg":
        return GlobalAvgPool.apply(x)
    stride = kernel if stride is None else stride
    if kind == "max":
        return MaxPool2d.apply(x, kernel=kernel, stride=stride, padding=padding)
    if kind == "avg":
        return AvgPool2d.apply(x, kernel=kernel, stride=stride, padding=padding)
    raise ConfigurationError(f"unknown pool kind {kind!r}")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 0:
        raise ShapeError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    """Inverse of :func:`concat` given the sizes of its inputs."""
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(Slice.apply(x, start=start, stop=start + n, axis=axis % x.ndim))
        start += n
    return out


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Interleave channel groups: view channels as (groups, C/groups), transpose, flatten."""
    return ChannelShuffle.apply(x, groups=groups)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[Rng] = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an Rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype)
    return _DropoutOp.apply(x, mask=mask, keep_scale=1.0 / (1.0 - p))


class _DropoutOp(Function):
    def forward(self, x, mask, keep_scale):
        self.mask = mask * x.dtype.type(keep_scale)
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


def nll_loss(log_probs: Tensor, labels) -> Tensor:
    """Batch mean of ``-log_probs[i, labels[i]]``."""
    labels = np.asarray(labels)
    if log_probs.ndim != 2 or labels.shape != (log_probs.shape[0],):
        raise ShapeError(f"nll_loss: {labels.shape[0] if labels.ndim else 0} labels for log_probs {log_probs.shape}")
    c = log_probs.shape[1]
    for i, y in enumerate(labels.tolist()):
        if not (isinstance(y, (int, np.integer)) and 0 <= y < c):
            raise DataError(f"sample {i}: label {y!r} outside [0, {c})")
    return NLLLoss.apply(log_probs, labels=labels.astype(np.int64))


def binary_sigmoid_nll(z: Tensor, labels) -> Tensor:
    """Mean negative Bernoulli log-likelihood of logits ``z`` (stable form)."""
    y = np.asarray(labels)
    if y.shape != z.shape:
        raise ShapeError(f"binary_sigmoid_nll: labels {y.shape} do not match logits {z.shape}")
    bad = np.flatnonzero((y != 0) & (y != 1))
    if bad.size:
        raise DataError(f"sample {int(bad[0])}: label {y.flat[bad[0]]!r} is not 0 or 1")
    return SigmoidBCE.apply(z, y=y.astype(z.dtype))
