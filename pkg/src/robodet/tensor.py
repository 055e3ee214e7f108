"""Dense NCHW tensor kernel: im2col convolution, leaky ReLU and batch
normalization, each with an analytic backward pass.

All operations are pure functions over numpy arrays, except ``batch_norm``
in train mode which updates the running statistics held by its parameter
object.  Arrays follow the caller's dtype; the network runs in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """An operand's shape does not match the layer parameters."""


@dataclass
class ConvParams:
    """Same-padded cross-correlation; weights laid out (out_ch, in_ch, k, k)."""

    kernel: int
    stride: int
    in_ch: int
    out_ch: int
    weights: np.ndarray
    bias: np.ndarray

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @classmethod
    def zeros(cls, kernel, stride, in_ch, out_ch, dtype=np.float32):
        w = np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype)
        b = np.zeros(out_ch, dtype=dtype)
        return cls(kernel, stride, in_ch, out_ch, w, b)


@dataclass
class BatchNormParams:
    """Per-channel affine normalization with running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def identity(cls, channels, dtype=np.float32):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            mean=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _check_conv_input(x: np.ndarray, params: ConvParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 NCHW input, got rank {x.ndim}")
    n, c, h, w = x.shape
    if c != params.in_ch:
        raise ShapeError(f"input channels {c} do not match conv in_ch {params.in_ch}")
    if h % params.stride or w % params.stride:
        raise ShapeError(
            f"spatial dims {h}x{w} not divisible by stride {params.stride}"
        )


def im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Lower NCHW input to a patch matrix of shape (n, c*k*k, out_h*out_w)."""
    n, c, h, w = x.shape
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kernel, kernel, out_h, out_w), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = x[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ]
    return cols.reshape(n, c * kernel * kernel, out_h * out_w)


def col2im(
    cols: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kernel: int,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Scatter-add a patch matrix back to NCHW; the adjoint of im2col."""
    n, c, h, w = x_shape
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    cols = cols.reshape(n, c, kernel, kernel, out_h, out_w)
    x = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            x[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ] += cols[:, :, i, j]
    if padding:
        x = x[:, :, padding : padding + h, padding : padding + w]
    return x


def conv2d_forward(x: np.ndarray, params: ConvParams, sparse_w=None) -> np.ndarray:
    """Cross-correlate x with the conv weights via one im2col matrix product.

    ``sparse_w`` optionally supplies a scipy CSR view of the flattened weight
    matrix; when given, the matrix product runs through it instead of the
    dense weights (used by the pruned inference path).
    """
    _check_conv_input(x, params)
    n = x.shape[0]
    out_h = x.shape[2] // params.stride
    out_w = x.shape[3] // params.stride
    cols = im2col(x, params.kernel, params.stride, params.padding)
    if sparse_w is not None:
        out = np.stack([sparse_w.dot(cols[b]) for b in range(n)])
    else:
        w2 = params.weights.reshape(params.out_ch, -1)
        out = np.matmul(w2, cols)
    out += params.bias[:, None]
    return out.reshape(n, params.out_ch, out_h, out_w)


def conv2d_backward(
    x: np.ndarray, params: ConvParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv2d_forward(x)) w.r.t. x, weights, bias."""
    _check_conv_input(x, params)
    n = x.shape[0]
    out_h = x.shape[2] // params.stride
    out_w = x.shape[3] // params.stride
    if grad_out.shape != (n, params.out_ch, out_h, out_w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output "
            f"{(n, params.out_ch, out_h, out_w)}"
        )
    cols = im2col(x, params.kernel, params.stride, params.padding)
    g = grad_out.reshape(n, params.out_ch, -1)
    grad_bias = g.sum(axis=(0, 2))
    grad_w2 = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_weights = grad_w2.reshape(params.weights.shape)
    w2 = params.weights.reshape(params.out_ch, -1)
    grad_cols = np.matmul(w2.T, g)
    grad_input = col2im(
        grad_cols, x.shape, params.kernel, params.stride, params.padding
    )
    return grad_input, grad_weights, grad_bias


def leaky_relu(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x >= 0, x, x * np.asarray(slope, dtype=x.dtype))


def leaky_relu_backward(
    x: np.ndarray, grad_out: np.ndarray, slope: float = 0.1
) -> np.ndarray:
    return grad_out * np.where(x >= 0, np.asarray(1, grad_out.dtype), slope)


def _check_bn_input(x: np.ndarray, params: BatchNormParams) -> None:
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ShapeError(
            f"batch norm expects NCHW input with {params.channels} channels, "
            f"got shape {tuple(x.shape)}"
        )


def batch_norm(x: np.ndarray, params: BatchNormParams, mode: str = "infer") -> np.ndarray:
    """Normalize per channel; train mode uses batch stats and updates the
    running estimates in place, infer mode uses the stored running stats."""
    _check_bn_input(x, params)
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = params.momentum
        params.mean += (m * (mu - params.mean)).astype(params.mean.dtype)
        params.var += (m * (var - params.var)).astype(params.var.dtype)
    elif mode == "infer":
        mu, var = params.mean, params.var
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    ivar = 1.0 / np.sqrt(var + params.eps)
    scale = (params.gamma * ivar)[:, None, None]
    shift = (params.beta - params.gamma * mu * ivar)[:, None, None]
    return x * scale + shift


def batch_norm_backward(
    x: np.ndarray, params: BatchNormParams, grad_out: np.ndarray, mode: str = "train"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, gamma, beta.  Train mode differentiates through
    the batch statistics; infer mode treats the running stats as constants."""
    _check_bn_input(x, params)
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mu, var = params.mean, params.var
    ivar = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mu[:, None, None]) * ivar[:, None, None]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gscale = (params.gamma * ivar)[:, None, None]
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        grad_x = (gscale / count) * (
            count * grad_out
            - grad_beta[:, None, None]
            - xhat * grad_gamma[:, None, None]
        )
    else:
        grad_x = grad_out * gscale
    return grad_x, grad_gamma, grad_beta


def fold_batch_norm(conv: ConvParams, bn: BatchNormParams) -> ConvParams:
    """Fuse inference-mode batch norm into the preceding convolution.

    The returned conv satisfies forward(x) == batch_norm(conv(x), infer) for
    every x, up to float rounding.
    """
    if bn.channels != conv.out_ch:
        raise ShapeError(
            f"batch norm channels {bn.channels} do not match conv out_ch {conv.out_ch}"
        )
    scale = bn.gamma / np.sqrt(bn.var + bn.eps)
    weights = (conv.weights * scale[:, None, None, None]).astype(conv.weights.dtype)
    bias = (bn.beta + (conv.bias - bn.mean) * scale).astype(conv.bias.dtype)
    return ConvParams(conv.kernel, conv.stride, conv.in_ch, conv.out_ch, weights, bias)
