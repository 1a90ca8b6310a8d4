"""Image operations on ``B x C x H x W`` tensors: convolution, batch norm, pooling, upsampling."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import Tensor, record

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _im2col(x_nhwc: np.ndarray, k: int) -> np.ndarray:
    """``(B*H*W) x (k*k*C)`` patch matrix of a channels-last array, stride 1, same padding.

    Columns are ordered (kernel row, kernel column, channel).
    """
    B, H, W, C = x_nhwc.shape
    if k == 1:
        return x_nhwc.reshape(-1, C)
    p = k // 2
    xp = np.pad(x_nhwc, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.concatenate([xp[:, i:i + H, j:j + W, :] for i in range(k) for j in range(k)], axis=-1)
    return cols.reshape(B * H * W, k * k * C)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 "same" convolution with an odd square kernel (3x3 or 1x1).

    ``weight`` is ``F x C x k x k``; padding is ``k // 2`` so the spatial size
    is preserved.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    F, Ck, k, k2 = weight.shape
    if Ck != C:
        raise ValueError(f"channel mismatch: input has {C}, kernel expects {Ck}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be odd and square, got {k}x{k2}")
    if bias is not None and bias.shape != (F,):
        raise ValueError(f"bias must have shape ({F},), got {bias.shape}")
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(F, k * k * C)
    cols = _im2col(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, H, W, F).transpose(0, 3, 1, 2))

    def _backward(g):
        g_nhwc = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = g_nhwc.reshape(-1, F)
        gw = (g2.T @ cols).reshape(F, k, k, C).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype) if bias is not None else None
        # input gradient of a stride-1 same convolution: correlate with the
        # spatially flipped kernel, input/output channels swapped
        wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(C, k * k * F)
        gx = (_im2col(g_nhwc, k) @ wflip.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, _backward)


@dataclass
class RunningStats:
    """Per-channel running mean/variance updated in train mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                training: bool = True, eps: float = BN_EPS) -> Tensor:
    """Batch normalization over the batch and spatial axes of each channel."""
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"gamma/beta must have shape ({C},)")
    dtype = x.dtype
    g_ = gamma.data.reshape(1, C, 1, 1)
    b_ = beta.data.reshape(1, C, 1, 1)

    if training:
        n = B * H * W
        if n <= 1:
            raise ValueError("batchnorm needs more than one value per channel in train mode")
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        centered = x.data - mu.reshape(1, C, 1, 1)
        var = np.mean(np.square(centered, dtype=np.float64), axis=(0, 2, 3))
        m = running.momentum
        running.mean[...] = (1 - m) * running.mean + m * mu
        running.var[...] = (1 - m) * running.var + m * var * n / (n - 1)
        invstd = (1.0 / np.sqrt(var + eps)).astype(dtype).reshape(1, C, 1, 1)
        xhat = (centered * invstd).astype(dtype)
        out = xhat * g_ + b_

        def _backward(g):
            dxhat = g * g_
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
            gx = (invstd / n) * (n * dxhat - s1 - xhat * s2)
            ggamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
            gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64)
            return gx.astype(dtype), ggamma.astype(dtype), gbeta.astype(dtype)
    else:
        invstd = (1.0 / np.sqrt(running.var.astype(np.float64) + eps)).astype(dtype).reshape(1, C, 1, 1)
        xhat = (x.data - running.mean.astype(dtype).reshape(1, C, 1, 1)) * invstd
        out = xhat * g_ + b_

        def _backward(g):
            gx = g * g_ * invstd
            ggamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
            gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64)
            return gx.astype(dtype), ggamma.astype(dtype), gbeta.astype(dtype)

    return record(out.astype(dtype), (x, gamma, beta), _backward)


def avgpool2d(x: Tensor, window: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % window or W % window:
        raise ValueError(f"spatial size {H}x{W} not divisible by pooling window {window}")
    r = x.data.reshape(B, C, H // window, window, W // window, window)
    out = r.mean(axis=(3, 5), dtype=np.float64).astype(x.dtype)
    scale = 1.0 / (window * window)

    def _backward(g):
        gx = np.repeat(np.repeat(g * scale, window, axis=2), window, axis=3)
        return (gx.astype(x.dtype),)

    return record(out, (x,), _backward)


@lru_cache(maxsize=64)
def interpolation_matrix(size: int, factor: int) -> np.ndarray:
    """Linear interpolation weights (``factor*size x size``), align-corners=False."""
    out_size = size * factor
    A = np.zeros((out_size, size))
    for o in range(out_size):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        w1 = src - i0
        A[o, i0] += 1.0 - w1
        A[o, i1] += w1
    A.setflags(write=False)
    return A


def bilinear_upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    if not isinstance(factor, int) or factor < 2:
        raise ValueError("upsampling factor must be an integer >= 2")
    B, C, H, W = x.shape
    Ah = interpolation_matrix(H, factor).astype(x.dtype)
    Aw = interpolation_matrix(W, factor).astype(x.dtype)
    # rows then columns: out = Ah @ x @ Aw^T
    out = np.matmul(np.matmul(Ah, x.data), Aw.T)

    def _backward(g):
        return (np.matmul(np.matmul(Ah.T, g), Aw),)

    return record(np.ascontiguousarray(out), (x,), _backward)


def global_avgpool2d(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping ``B x C x 1 x 1``."""
    return x.mean(axis=(2, 3), keepdims=True)
