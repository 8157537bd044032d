"""Dense tensor kernels with hand-written backward passes.

Spatial tensors are channels-major: ``(C, H, W)`` or batched ``(N, C, H, W)``.
Descriptor batches for normalization are ``(n, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


def conv_output_size(size: int, kernel_size: int, stride: int) -> int:
    """Valid-convolution output extent: ``floor((size - k) / stride) + 1``."""
    if kernel_size < 1 or stride < 1:
        raise ShapeError(f"kernel_size and stride must be >= 1, got k={kernel_size}, s={stride}")
    if size < kernel_size:
        raise ShapeError(f"input extent {size} is smaller than kernel {kernel_size}")
    return (size - kernel_size) // stride + 1


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W) input, got dims {x.shape}")


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H', W', k, k) view, no copy
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None) -> None:
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeError(f"weights must be (C',C,k,k), got dims {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weights expect {weights.shape[1]} "
            f"(input dims {x.shape}, weight dims {weights.shape})"
        )
    k = weights.shape[2]
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"input spatial dims {x.shape[2:]} smaller than kernel {k}x{k}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias must be ({weights.shape[0]},), got dims {bias.shape}")


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None, stride: int = 1) -> np.ndarray:
    """Valid (unpadded) 2-D cross-correlation.

    ``x`` is ``(C,H,W)`` or ``(N,C,H,W)``; ``weights`` is ``(C',C,k,k)``.
    The output keeps the batching of the input.
    """
    xb, squeeze = _as_batch(x)
    _check_conv(xb, weights, bias)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    k = weights.shape[2]
    win = _windows(xb, k, stride)
    out = np.tensordot(win, weights, axes=([1, 4, 5], [1, 2, 3]))  # (N, H', W', C')
    if bias is not None:
        out = out + bias
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if squeeze else out


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d(x, weights, b, stride))``.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    xb, squeeze = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    _check_conv(xb, weights, None)
    k = weights.shape[2]
    ho = conv_output_size(xb.shape[2], k, stride)
    wo = conv_output_size(xb.shape[3], k, stride)
    expected = (xb.shape[0], weights.shape[0], ho, wo)
    if gb.shape != expected:
        raise ShapeError(f"grad_out dims {gb.shape} do not match forward output dims {expected}")

    win = _windows(xb, k, stride)
    grad_w = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))  # (C', C, k, k)
    grad_b = gb.sum(axis=(0, 2, 3))
    grad_x = np.zeros_like(xb)
    # scatter each kernel tap back onto the strided input lattice
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(gb, weights[:, :, i, j], axes=([1], [0]))  # (N, H', W', C)
            grad_x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib.transpose(
                0, 3, 1, 2
            )
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return grad_out * (x > 0)


def pow_elem(x: np.ndarray, exponent: float) -> np.ndarray:
    """Elementwise ``x ** exponent``; negative bases need an integer exponent."""
    x = np.asarray(x)
    if float(exponent) != int(exponent) and np.any(x < 0):
        raise ValueError(f"negative base with fractional exponent {exponent}")
    return np.power(x, exponent)


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    """Replicate every pixel ``factor`` times along both trailing spatial axes."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


@dataclass
class BatchNormState:
    """Affine parameters and running statistics for per-dimension batch norm."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, dtype=np.float64) -> BatchNormState:
        return cls(
            gamma=np.ones(dim, dtype=dtype),
            beta=np.zeros(dim, dtype=dtype),
            running_mean=np.zeros(dim, dtype=dtype),
            running_var=np.ones(dim, dtype=dtype),
        )

    def copy(self) -> BatchNormState:
        return BatchNormState(
            self.gamma.copy(),
            self.beta.copy(),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.momentum,
            self.eps,
        )


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def batch_norm(
    x: np.ndarray, state: BatchNormState, mode: str = "train"
) -> tuple[np.ndarray, BatchNormCache]:
    """Normalize an ``(n, D)`` batch per dimension, then apply the affine map.

    In ``"train"`` mode batch statistics are used and the running statistics
    in ``state`` are updated in place; ``"infer"`` uses the running statistics.
    """
    if x.ndim != 2 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batch_norm expects (n, {state.gamma.shape[0]}), got dims {x.shape}")
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ValueError(f"batch_norm in train mode needs at least 2 samples, got {n}")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var * (n / (n - 1))
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x - mean) * inv_std
    y = state.gamma * x_hat + state.beta
    return y, BatchNormCache(x_hat, inv_std, state.gamma.copy(), mode == "train")


def batch_norm_backward(
    grad_y: np.ndarray, cache: BatchNormCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    grad_gamma = (grad_y * cache.x_hat).sum(axis=0)
    grad_beta = grad_y.sum(axis=0)
    g_hat = grad_y * cache.gamma
    if not cache.train:
        return g_hat * cache.inv_std, grad_gamma, grad_beta
    n = grad_y.shape[0]
    grad_x = (cache.inv_std / n) * (
        n * g_hat - g_hat.sum(axis=0) - cache.x_hat * (g_hat * cache.x_hat).sum(axis=0)
    )
    return grad_x, grad_gamma, grad_beta


def logsumexp(values, axis: int | None = None) -> np.ndarray | float:
    """``log(sum(exp(values)))`` with max-shift for stability."""
    u = np.asarray(values, dtype=np.result_type(np.asarray(values).dtype, np.float32))
    if u.size == 0:
        raise ValueError("logsumexp of an empty input")
    if axis is None:
        top = u.max()
        return float(top + np.log(np.exp(u - top).sum()))
    top = u.max(axis=axis, keepdims=True)
    out = top + np.log(np.exp(u - top).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = values - values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)
