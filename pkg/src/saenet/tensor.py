"""Dense numerical kernels.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 or float64.
Activations are laid out NCHW and convolution weights OIHW.  Every kernel
here is a pure function of its arguments; the only in-place writes are the
running statistics handed to :func:`batchnorm2d`, which the caller owns.

Most kernels come as a forward function plus a ``*_backward`` companion that
takes the upstream gradient and whatever the forward cached.  The autograd
layer wires these together; nothing in this module knows about tapes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DegenerateBatchError, DimensionError

FLOAT_DTYPES = (np.float32, np.float64)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Return ``data`` as a contiguous float array of the requested dtype."""
    dtype = np.dtype(dtype)
    if dtype.type not in FLOAT_DTYPES:
        raise TypeError(f"tensors must be float32 or float64, got {dtype}")
    return np.ascontiguousarray(data, dtype=dtype)


def _require_rank(x: np.ndarray, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{what}: expected rank {rank}, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw, self.stride, self.groups) < 1:
            raise ConfigurationError(f"non-positive size in {self}")
        if self.padding < 0:
            raise ConfigurationError(f"negative padding in {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(
                f"kernel {self.kernel} with padding {self.padding} does not fit a {h}x{w} input"
            )
        return ho, wo


def _check_conv_operands(x, weight, bias, spec: ConvSpec):
    _require_rank(x, 4, "conv2d input")
    _require_rank(weight, 4, "conv2d weight")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"conv2d: input channel axis (1) has size {x.shape[1]}, expected {spec.in_channels}"
        )
    if weight.shape != spec.weight_shape:
        for axis, (got, want) in enumerate(zip(weight.shape, spec.weight_shape)):
            if got != want:
                raise DimensionError(
                    f"conv2d: weight axis {axis} has size {got}, expected {want} "
                    f"(weight shape {weight.shape} vs {spec.weight_shape})"
                )
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({spec.out_channels},)")


def _im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    """Lower a padded input to per-group patch matrices of shape (G, N*Ho*Wo, Cg*kh*kw)."""
    n, c, h, w = x.shape
    kh, kw = spec.kernel
    s, p, g = spec.stride, spec.padding, spec.groups
    ho, wo = spec.output_hw(h, w)
    if kh == kw == 1 and p == 0:
        xs = x[:, :, ::s, ::s] if s > 1 else x
        cols = xs.reshape(n, g, c // g, ho, wo).transpose(1, 0, 3, 4, 2)
        return cols.reshape(g, n * ho * wo, c // g), ho, wo
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    win = win.reshape(n, g, c // g, ho, wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6)
    return win.reshape(g, n * ho * wo, (c // g) * kh * kw), ho, wo


def conv2d(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray], spec: ConvSpec) -> np.ndarray:
    """Grouped 2-D cross-correlation with zero padding."""
    return conv2d_forward(x, weight, bias, spec)[0]


def conv2d_forward(x, weight, bias, spec: ConvSpec):
    """Like :func:`conv2d` but also returns the patch matrix needed by the backward pass."""
    _check_conv_operands(x, weight, bias, spec)
    n = x.shape[0]
    g, o = spec.groups, spec.out_channels
    cols, ho, wo = _im2col(x, spec)
    wmat = weight.reshape(g, o // g, -1).transpose(0, 2, 1)
    out = np.matmul(cols, wmat)  # (G, N*Ho*Wo, O/G)
    out = out.reshape(g, n, ho, wo, o // g).transpose(1, 0, 4, 2, 3).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out), cols


def conv2d_backward(grad_out, x_shape, weight, cols, spec: ConvSpec, need_input=True, need_weight=True):
    """Return ``(grad_input, grad_weight, grad_bias)``; skipped entries are None."""
    n, c, h, w = x_shape
    g, o = spec.groups, spec.out_channels
    kh, kw = spec.kernel
    s, p = spec.stride, spec.padding
    ho, wo = grad_out.shape[2:]
    d = grad_out.reshape(n, g, o // g, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, o // g)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = None
    if need_weight:
        grad_w = np.matmul(cols.transpose(0, 2, 1), d).transpose(0, 2, 1).reshape(weight.shape)
    grad_x = None
    if need_input:
        wmat = weight.reshape(g, o // g, -1)
        dcols = np.matmul(d, wmat).reshape(g, n, ho, wo, c // g, kh, kw)
        dcols = dcols.transpose(1, 0, 4, 2, 3, 5, 6)  # N, G, Cg, Ho, Wo, kh, kw
        dxp = np.zeros((n, g, c // g, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[..., i, j]
        grad_x = dxp.reshape(n, c, h + 2 * p, w + 2 * p)[:, :, p:p + h, p:p + w]
        grad_x = np.ascontiguousarray(grad_x)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# dense algebra
# --------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require_rank(a, 2, "matmul left operand")
    _require_rank(b, 2, "matmul right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    return a @ b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")
    return a + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    _require_rank(x, 2, "log_softmax_rows")
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    _require_rank(x, 2, "softmax_rows")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# pooling and channel ops
# --------------------------------------------------------------------------

def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _require_rank(x, 4, "global_avg_pool")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out: np.ndarray, x_shape) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to((grad_out / (h * w))[:, :, None, None], x_shape).copy()


def max_pool2d_forward(x: np.ndarray, kernel: int = 3, stride: int = 2, padding: int = 1):
    """Max pooling with -inf padding.  Returns the output and flat argmax indices."""
    _require_rank(x, 4, "max_pool2d")
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"max_pool2d window {kernel} does not fit a {h}x{w} input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    # Flat index into the padded plane, used to route gradients back.
    ki, kj = np.divmod(arg, kernel)
    rows = np.arange(ho)[:, None] * stride + ki
    cols = np.arange(wo)[None, :] * stride + kj
    flat = rows * (w + 2 * padding) + cols
    return np.ascontiguousarray(out), flat


def max_pool2d_backward(grad_out, flat, x_shape, padding: int = 1):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((n * c, hp * wp), dtype=grad_out.dtype)
    idx = flat.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), idx.shape[1])
    np.add.at(dxp, (rows, idx.ravel()), grad_out.reshape(n * c, -1).ravel())
    return dxp.reshape(n, c, hp, wp)[:, :, padding:padding + h, padding:padding + w].copy()


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate along axis 1; all other axes must agree."""
    if not parts:
        raise DimensionError("concat_channels: no parts given")
    ref = parts[0].shape
    for k, p in enumerate(parts):
        if p.ndim != len(ref) or p.ndim < 2:
            raise DimensionError(f"concat_channels: part {k} has shape {p.shape}, expected rank {len(ref)} >= 2")
        for axis in range(p.ndim):
            if axis != 1 and p.shape[axis] != ref[axis]:
                raise DimensionError(
                    f"concat_channels: part {k} axis {axis} has size {p.shape[axis]}, expected {ref[axis]}"
                )
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=1)


def channel_scale(x: np.ndarray, gates: np.ndarray) -> np.ndarray:
    _require_rank(x, 4, "channel_scale input")
    _require_rank(gates, 2, "channel_scale gates")
    if gates.shape != x.shape[:2]:
        raise DimensionError(f"channel_scale: gates {gates.shape} do not match input channels {x.shape[:2]}")
    return x * gates[:, :, None, None]


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, training: bool,
                        eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel batch norm over (N, H, W).

    In training mode the batch statistics normalize the input and are blended
    into ``running_mean``/``running_var`` in place as
    ``running = (1 - momentum) * running + momentum * batch``.  The biased
    batch variance is stored, so with ``momentum=1`` eval mode reproduces the
    training output on the same batch.

    Returns ``(out, cache)``.
    """
    _require_rank(x, 4, "batchnorm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise DegenerateBatchError(f"batchnorm2d: N*H*W = {m} < 2 in train mode")
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean.reshape(1, c, 1, 1)
        var = np.einsum("nchw,nchw->c", centered, centered) / m
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean, var = running_mean, running_var
        centered = x - mean.reshape(1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(1, c, 1, 1)
    out = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
    return out.astype(x.dtype, copy=False), (xhat.astype(x.dtype, copy=False), inv_std.astype(x.dtype), training)


def batchnorm2d(x, gamma, beta, running_mean=None, running_var=None, training=True,
                eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> np.ndarray:
    return batchnorm2d_forward(x, gamma, beta, running_mean, running_var, training, eps, momentum)[0]


def batchnorm2d_backward(grad_out, gamma, cache):
    """Full derivative, including the path through the batch statistics in train mode."""
    xhat, inv_std, training = cache
    c = gamma.shape[0]
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma.reshape(1, c, 1, 1)
    if not training:
        return dxhat * inv_std.reshape(1, c, 1, 1), grad_gamma, grad_beta
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    sum_d = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
    sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
    grad_x = (inv_std.reshape(1, c, 1, 1) / m) * (m * dxhat - sum_d - xhat * sum_dx)
    return grad_x, grad_gamma, grad_beta
