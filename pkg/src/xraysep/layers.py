"""Forward and backward passes for the layer ops used by the networks.

All image tensors are laid out as ``[batch, channels, height, width]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_result

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # padded [B, C, Hp, Wp] -> [B*Ho*Wo, k*k*C], columns ordered (ki, kj, c)
    b, c, hp, wp = xp.shape
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xn = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((b, ho, wo, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xn[:, i:i + stride * (ho - 1) + 1:stride,
                                        j:j + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(b * ho * wo, k * k * c)


def _kernel_matrix(kernels: np.ndarray) -> np.ndarray:
    # [Cout, Cin, k, k] -> [Cout, k*k*Cin], matching the _im2col column order
    return kernels.transpose(0, 2, 3, 1).reshape(kernels.shape[0], -1)


def _correlate(x: np.ndarray, kernels: np.ndarray, stride: int, padding: int):
    """Plain array cross-correlation; returns output [B,Cout,Ho,Wo] and the im2col matrix."""
    b = x.shape[0]
    cout, cin, k, _ = kernels.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    cols = _im2col(xp, k, stride)
    out = cols @ _kernel_matrix(kernels).T
    return out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation with zero padding."""
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input [B,C,H,W] and kernels [Cout,Cin,k,k]")
    b, cin, h, w = x.shape
    cout, kcin, k, k2 = kernels.shape
    if kcin != cin:
        raise ValueError(f"input has {cin} channels but kernels expect {kcin}")
    if k != k2:
        raise ValueError("only square kernels are supported")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    span_h, span_w = h + 2 * padding - k, w + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(f"conv2d output size is not an integer for input {h}x{w}, k={k}, "
                         f"stride={stride}, padding={padding}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    out, cols = _correlate(x.data, kernels.data, stride, padding)
    out = np.ascontiguousarray(out + bias.data.reshape(1, cout, 1, 1))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        g_bias = gmat.sum(axis=0)
        g_kernels = (gmat.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        g_x = None
        if x.requires_grad:
            if stride == 1 and padding <= k - 1:
                # input gradient is a full correlation with the flipped, transposed kernels
                flipped = np.ascontiguousarray(kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx, _ = _correlate(g, flipped, 1, k - 1 - padding)
                g_x = np.ascontiguousarray(gx)
            else:
                g_x = _col2im(gmat @ _kernel_matrix(kernels.data), x.shape, k, stride, padding, ho, wo)
        return g_x, g_kernels, g_bias

    return make_result(out, (x, kernels, bias), backward, "conv2d")


def _col2im(gcols, shape, k, stride, padding, ho, wo):
    b, cin, h, w = shape
    gcols = gcols.reshape(b, ho, wo, k, k, cin)
    gxp = np.zeros((b, cin, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                gcols[:, :, :, i, j, :].transpose(0, 3, 1, 2))
    return gxp[:, :, padding:padding + h, padding:padding + w]


@dataclass
class BNState:
    """Running per-channel statistics of a batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BNState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, train: bool = True) -> Tensor:
    """Per-channel batch normalization.

    In train mode the batch statistics normalize the input and the running
    statistics are updated (unbiased variance, like most frameworks). In eval
    mode the running statistics are used and nothing is updated.
    """
    if x.shape[0] == 0:
        raise ValueError("batch_norm needs a non-empty batch")
    c = x.shape[1]
    shape = (1, c, 1, 1)
    eps = state.eps
    if train:
        m = x.size // c
        if m < 2:
            raise ValueError("train-mode batch_norm needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var * m / (m - 1)).astype(
            state.running_var.dtype)
    else:
        m = x.size // c
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        g_gamma = (g * xhat).sum(axis=(0, 2, 3))
        g_beta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if train:
            g_x = (inv_std.reshape(shape) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            g_x = gxhat * inv_std.reshape(shape)
        return g_x, g_gamma, g_beta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * mask,), "relu")


def clamp01(x: Tensor) -> Tensor:
    """Clamped-linear output nonlinearity onto [0, 1]."""
    mask = (x.data > 0) & (x.data < 1)
    out = np.clip(x.data, 0, 1)
    return make_result(out, (x,), lambda g: (g * mask,), "clamp01")


def avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_result(out, (x,), backward, "avg_pool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by two."""
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample2")


def _sample_axes(t: Tensor, per_sample: bool) -> tuple[int, ...] | None:
    return tuple(range(1, t.data.ndim)) if per_sample else None


def frobenius_norm(t: Tensor, per_sample: bool = False) -> Tensor:
    """sqrt of the sum of squares, over the whole tensor or per leading index.

    The gradient at an all-zero argument is defined as zero.
    """
    axes = _sample_axes(t, per_sample)
    norm = np.sqrt((t.data * t.data).sum(axis=axes, keepdims=True))

    def backward(g):
        safe = np.where(norm > 0, norm, 1)
        scale = np.where(norm > 0, np.reshape(g, norm.shape) / safe, 0)
        return (t.data * scale,)

    out = norm.reshape(t.shape[0]) if per_sample else norm.reshape(())
    return make_result(out, (t,), backward, "frobenius_norm")


def sum_squares(t: Tensor, per_sample: bool = False) -> Tensor:
    """Squared Frobenius norm."""
    axes = _sample_axes(t, per_sample)
    out = (t.data * t.data).sum(axis=axes)

    def backward(g):
        g = np.reshape(g, (-1,) + (1,) * (t.data.ndim - 1)) if per_sample else g
        return (2 * t.data * g,)

    return make_result(np.asarray(out, dtype=t.dtype), (t,), backward, "sum_squares")


def pearson(a: Tensor, b: Tensor, per_sample: bool = False) -> Tensor:
    """Pearson correlation of the vectorized tensors.

    If either argument is constant the correlation is undefined; 0 is
    returned with a zero gradient and a warning is logged.
    """
    if a.shape != b.shape:
        raise ValueError(f"pearson needs equal shapes, got {a.shape} and {b.shape}")
    axes = _sample_axes(a, per_sample)
    ac = a.data - a.data.mean(axis=axes, keepdims=True)
    bc = b.data - b.data.mean(axis=axes, keepdims=True)
    saa = (ac * ac).sum(axis=axes, keepdims=True)
    sbb = (bc * bc).sum(axis=axes, keepdims=True)
    sab = (ac * bc).sum(axis=axes, keepdims=True)
    ok = (saa > 0) & (sbb > 0)
    if not np.all(ok):
        logger.warning("pearson: constant argument, correlation set to 0")
    denom = np.where(ok, np.sqrt(np.where(ok, saa * sbb, 1)), 1)
    r = np.where(ok, sab / denom, 0)

    def backward(g):
        g = np.reshape(g, r.shape)
        safe_aa = np.where(ok, saa, 1)
        safe_bb = np.where(ok, sbb, 1)
        ga = np.where(ok, g * (bc / denom - r * ac / safe_aa), 0)
        gb = np.where(ok, g * (ac / denom - r * bc / safe_bb), 0)
        return ga, gb

    out = r.reshape(a.shape[0]) if per_sample else r.reshape(())
    return make_result(out.astype(a.dtype, copy=False), (a, b), backward, "pearson")
