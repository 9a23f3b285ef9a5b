"""Differentiable kernels with explicit forward and backward passes.

Every kernel works on a leading batch axis ``B`` and never mixes information across it, so a batch of ``T * N``
(time step, sample) slices can be pushed through in one call while gradients stay attributable to single samples.
Forward functions return ``(output, cache)``; backward functions take the upstream gradient and that cache.
Parameter gradients are summed over the batch axis unless ``per_example=True``, in which case the batch axis is kept.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from ._exceptions import ContractViolationError, StructuralError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

NORM_EPS = 1e-5


class PoolMethod(enum.Enum):
    MAX = 'max'
    AVG = 'avg'
    TEP = 'tep'


# ------------------------------------------------------ Convolution ---------------------------------------------------
@dataclass(frozen=True, slots=True)
class ConvCache:
    cols: NDArray[Any]
    input_shape: tuple[int, ...]
    kernel: NDArray[Any]
    stride: int
    padding: int
    out_hw: tuple[int, int]


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    """Spatial output size of a convolution or pooling window sweep."""
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_forward(
    x: NDArray[Any],
    kernel: NDArray[Any],
    bias: NDArray[Any],
    stride: int = 1,
    padding: int = 0,
) -> tuple[NDArray[Any], ConvCache]:
    """Cross-correlate a batch of feature maps with `kernel` and add `bias`.

    Parameters
    ----------
    x : NDArray
        Input of shape ``(B, C_in, H, W)``.
    kernel : NDArray
        Weights of shape ``(C_out, C_in, kH, kW)``; not flipped.
    bias : NDArray
        Bias of shape ``(C_out,)``.
    stride : int, optional
        Step between window positions.
    padding : int, optional
        Zero padding added on every spatial border.

    Returns
    -------
    tuple[NDArray, ConvCache]
        Output of shape ``(B, C_out, H_out, W_out)`` with ``H_out = (H + 2 * padding - kH) // stride + 1``, and the
        cache consumed by `conv2d_backward`.

    Raises
    ------
    StructuralError
        If the channel counts disagree or the kernel does not fit the padded input.
    """
    n_batch, c_in, height, width = x.shape
    c_out, k_in, k_h, k_w = kernel.shape
    if k_in != c_in:
        msg = f'Kernel expects {k_in} input channels, feature map has {c_in}'
        raise StructuralError(msg)
    if bias.shape != (c_out,):
        msg = f'Bias of shape {bias.shape} does not match {c_out} output channels'
        raise StructuralError(msg)
    out_h = conv_output_size(height, k_h, stride, padding)
    out_w = conv_output_size(width, k_w, stride, padding)
    if out_h < 1 or out_w < 1:
        msg = f'Kernel {k_h}x{k_w} does not fit input {height}x{width} with padding {padding}'
        raise StructuralError(msg)

    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    windows = sliding_window_view(padded, (k_h, k_w), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    # (B, C, Ho, Wo, kH, kW) -> (B, Ho*Wo, C*kH*kW)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n_batch, out_h * out_w, -1)
    out = cols @ kernel.reshape(c_out, -1).T
    out = out.transpose(0, 2, 1).reshape(n_batch, c_out, out_h, out_w) + bias[None, :, None, None]
    return out, ConvCache(cols, x.shape, kernel, stride, padding, (out_h, out_w))


def conv2d_backward(
    grad_out: NDArray[Any],
    cache: ConvCache,
    *,
    per_example: bool = False,
    need_input_grad: bool = True,
) -> tuple[NDArray[Any] | None, NDArray[Any], NDArray[Any]]:
    """Exact gradients of `conv2d_forward` with respect to its input, kernel and bias.

    Returns ``(grad_x, grad_kernel, grad_bias)``; `grad_x` is ``None`` when `need_input_grad` is false.
    """
    n_batch, c_in, height, width = cache.input_shape
    c_out, _, k_h, k_w = cache.kernel.shape
    out_h, out_w = cache.out_hw
    stride, padding = cache.stride, cache.padding

    g = grad_out.reshape(n_batch, c_out, out_h * out_w)
    if per_example:
        grad_kernel = (g @ cache.cols).reshape(n_batch, *cache.kernel.shape)
        grad_bias = g.sum(axis=2)
    else:
        grad_kernel = np.tensordot(g, cache.cols, axes=([0, 2], [0, 1])).reshape(cache.kernel.shape)
        grad_bias = g.sum(axis=(0, 2))

    if not need_input_grad:
        return None, grad_kernel, grad_bias

    dcols = (g.transpose(0, 2, 1) @ cache.kernel.reshape(c_out, -1)).reshape(n_batch, out_h, out_w, c_in, k_h, k_w)
    dpadded = np.zeros((n_batch, c_in, height + 2 * padding, width + 2 * padding), dtype=grad_out.dtype)
    for i in range(k_h):
        for j in range(k_w):
            rows = slice(i, i + stride * out_h, stride)
            cols = slice(j, j + stride * out_w, stride)
            dpadded[:, :, rows, cols] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = dpadded[:, :, padding : padding + height, padding : padding + width] if padding else dpadded
    return grad_x, grad_kernel, grad_bias


# ----------------------------------------------------- Normalization --------------------------------------------------
@dataclass(frozen=True, slots=True)
class NormCache:
    normalized: NDArray[Any]
    inv_std: NDArray[Any]
    input_shape: tuple[int, ...]
    groups: int
    scale: NDArray[Any] | None


def _normalize(grouped: NDArray[Any], eps: float) -> tuple[NDArray[Any], NDArray[Any]]:
    mean = grouped.mean(axis=-1, keepdims=True)
    centered = grouped - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std


def _normalize_backward(grad: NDArray[Any], normalized: NDArray[Any], inv_std: NDArray[Any]) -> NDArray[Any]:
    mean_grad = grad.mean(axis=-1, keepdims=True)
    mean_proj = (grad * normalized).mean(axis=-1, keepdims=True)
    return inv_std * (grad - mean_grad - normalized * mean_proj)


def group_norm_forward(
    x: NDArray[Any],
    scale: NDArray[Any],
    shift: NDArray[Any],
    groups: int,
    eps: float = NORM_EPS,
) -> tuple[NDArray[Any], NormCache]:
    """Normalize each (sample, channel group) over its channels and spatial positions, then apply a per-channel affine.

    Raises
    ------
    StructuralError
        If the channel count is not divisible by `groups`.
    """
    n_batch, channels = x.shape[:2]
    if groups < 1 or channels % groups:
        msg = f'{channels} channels cannot be split into {groups} groups'
        raise StructuralError(msg)
    normalized, inv_std = _normalize(x.reshape(n_batch, groups, -1), eps)
    expand = (None, slice(None), *([None] * (x.ndim - 2)))
    out = normalized.reshape(x.shape) * scale[expand] + shift[expand]
    return out, NormCache(normalized, inv_std, x.shape, groups, scale)


def group_norm_backward(
    grad_out: NDArray[Any],
    cache: NormCache,
    *,
    per_example: bool = False,
) -> tuple[NDArray[Any], NDArray[Any], NDArray[Any]]:
    """Exact gradients of `group_norm_forward`: ``(grad_x, grad_scale, grad_shift)``."""
    if cache.scale is None:
        msg = 'Cache was produced by instance_norm_forward'
        raise StructuralError(msg)
    n_batch = grad_out.shape[0]
    spatial = tuple(range(2, grad_out.ndim))
    normalized = cache.normalized.reshape(cache.input_shape)
    grad_scale = (grad_out * normalized).sum(axis=spatial)
    grad_shift = grad_out.sum(axis=spatial)
    if not per_example:
        grad_scale, grad_shift = grad_scale.sum(axis=0), grad_shift.sum(axis=0)

    expand = (None, slice(None), *([None] * (grad_out.ndim - 2)))
    grad_norm = (grad_out * cache.scale[expand]).reshape(n_batch, cache.groups, -1)
    grad_x = _normalize_backward(grad_norm, cache.normalized, cache.inv_std).reshape(cache.input_shape)
    return grad_x, grad_scale, grad_shift


def instance_norm_forward(x: NDArray[Any], eps: float = NORM_EPS) -> tuple[NDArray[Any], NormCache]:
    """Normalize every (sample, channel) map over its spatial positions; no learnable affine."""
    n_batch, channels = x.shape[:2]
    normalized, inv_std = _normalize(x.reshape(n_batch, channels, -1), eps)
    return normalized.reshape(x.shape), NormCache(normalized, inv_std, x.shape, channels, None)


def instance_norm_backward(grad_out: NDArray[Any], cache: NormCache) -> NDArray[Any]:
    n_batch, channels = cache.input_shape[:2]
    grad = grad_out.reshape(n_batch, channels, -1)
    return _normalize_backward(grad, cache.normalized, cache.inv_std).reshape(cache.input_shape)


# -------------------------------------------------------- Pooling -----------------------------------------------------
@dataclass(frozen=True, slots=True)
class PoolCache:
    input_shape: tuple[int, ...]
    kernel: int
    stride: int
    out_hw: tuple[int, int]
    argmax: NDArray[Any] | None = None


def _pool_windows(x: NDArray[Any], kernel: int, stride: int) -> tuple[NDArray[Any], tuple[int, int]]:
    height, width = x.shape[-2:]
    if kernel < 1 or stride < 1:
        msg = f'Pooling kernel and stride must be positive, got kernel={kernel}, stride={stride}'
        raise StructuralError(msg)
    if kernel > height or kernel > width:
        msg = f'Pooling kernel {kernel} exceeds spatial size {height}x{width}'
        raise StructuralError(msg)
    out_hw = (conv_output_size(height, kernel, stride), conv_output_size(width, kernel, stride))
    windows = sliding_window_view(x, (kernel, kernel), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    return windows[..., : out_hw[0], : out_hw[1], :, :], out_hw


def _scatter_windows(
    per_offset: Any,
    input_shape: tuple[int, ...],
    kernel: int,
    stride: int,
    out_hw: tuple[int, int],
    dtype: Any,
) -> NDArray[Any]:
    grad_x = np.zeros(input_shape, dtype=dtype)
    out_h, out_w = out_hw
    for i in range(kernel):
        for j in range(kernel):
            grad_x[..., i : i + stride * out_h : stride, j : j + stride * out_w : stride] += per_offset(i, j)
    return grad_x


def pool_max_forward(x: NDArray[Any], kernel: int, stride: int = 2) -> tuple[NDArray[Any], PoolCache]:
    """Window maximum over the last two axes; no padding, output size ``(H - K) // stride + 1``.

    Raises
    ------
    StructuralError
        If `kernel` exceeds either spatial dimension.
    """
    windows, out_hw = _pool_windows(x, kernel, stride)
    flat = windows.reshape(*windows.shape[:-2], kernel * kernel)
    # argmax returns the first maximum in row-major order, which fixes the tie-break
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, PoolCache(x.shape, kernel, stride, out_hw, argmax)


def pool_max_backward(grad_out: NDArray[Any], cache: PoolCache) -> NDArray[Any]:
    if cache.argmax is None:
        msg = 'Max pooling backward needs a cache recorded by pool_max_forward'
        raise StructuralError(msg)
    argmax, kernel = cache.argmax, cache.kernel
    return _scatter_windows(
        lambda i, j: np.where(argmax == i * kernel + j, grad_out, 0.0),
        cache.input_shape,
        kernel,
        cache.stride,
        cache.out_hw,
        grad_out.dtype,
    )


def pool_avg_forward(x: NDArray[Any], kernel: int, stride: int = 2) -> tuple[NDArray[Any], PoolCache]:
    """Window mean over the last two axes; same geometry and errors as `pool_max_forward`."""
    windows, out_hw = _pool_windows(x, kernel, stride)
    return windows.mean(axis=(-2, -1)), PoolCache(x.shape, kernel, stride, out_hw)


def pool_avg_backward(grad_out: NDArray[Any], cache: PoolCache) -> NDArray[Any]:
    share = grad_out / (cache.kernel * cache.kernel)
    return _scatter_windows(
        lambda i, j: share, cache.input_shape, cache.kernel, cache.stride, cache.out_hw, share.dtype
    )


def global_avg_pool_forward(x: NDArray[Any]) -> tuple[NDArray[Any], tuple[int, ...]]:
    """Average every channel over its spatial positions: ``(B, C, H, W) -> (B, C)``."""
    return x.mean(axis=(-2, -1)), x.shape


def global_avg_pool_backward(grad_out: NDArray[Any], input_shape: tuple[int, ...]) -> NDArray[Any]:
    height, width = input_shape[-2:]
    return np.broadcast_to(grad_out[..., None, None] / (height * width), input_shape).copy()


# ------------------------------------------------ Temporal enhanced pooling -------------------------------------------
@dataclass(frozen=True, slots=True)
class TepCache:
    spikes: NDArray[Any]
    weight: NDArray[Any]
    norm: NormCache
    pool: PoolCache


def tep_forward(
    spikes: NDArray[Any],
    kernel: int,
    stride: int = 2,
    *,
    check_binary: bool = __debug__,
) -> tuple[NDArray[Any], TepCache]:
    """Temporal enhanced pooling of a whole spike train.

    With ``F`` the per-neuron fire rate over the time axis and ``F_hat`` its instance normalization, every time step
    is average-pooled after being reweighted: ``X[t] = AvgPool(O[t] * (F_hat + 1))``.

    Parameters
    ----------
    spikes : NDArray
        Spike maps of shape ``(T, B, C, H, W)``.
    kernel : int
        Pooling window size.
    stride : int, optional
        Pooling stride.
    check_binary : bool, optional
        Verify that `spikes` only holds zeros and ones (on by default in debug builds).

    Returns
    -------
    tuple[NDArray, TepCache]
        Pooled maps of shape ``(T, B, C, H_out, W_out)`` and the cache consumed by `tep_backward`.

    Raises
    ------
    StructuralError
        If the time axis is empty or the window does not fit.
    ContractViolationError
        If `check_binary` is set and `spikes` holds values other than 0 and 1.
    """
    if spikes.ndim != 5 or spikes.shape[0] == 0:
        msg = f'TEP expects a non-empty (T, B, C, H, W) spike train, got shape {spikes.shape}'
        raise StructuralError(msg)
    if check_binary and not np.all((spikes == 0) | (spikes == 1)):
        msg = 'TEP input must be binary spikes'
        raise ContractViolationError(msg)
    time_steps = spikes.shape[0]
    fire_rate = spikes.sum(axis=0) / time_steps
    fire_norm, norm_cache = instance_norm_forward(fire_rate)
    weight = fire_norm + 1.0
    weighted = spikes * weight[None]
    pooled, pool_cache = pool_avg_forward(weighted.reshape(-1, *weighted.shape[2:]), kernel, stride)
    out = pooled.reshape(time_steps, *spikes.shape[1:3], *pooled.shape[-2:])
    return out, TepCache(spikes, weight, norm_cache, pool_cache)


def tep_backward(grad_out: NDArray[Any], cache: TepCache) -> NDArray[Any]:
    """Gradient with respect to every ``O[t]``, through both the direct path and the fire-rate path."""
    spikes = cache.spikes
    time_steps = spikes.shape[0]
    grad_weighted = pool_avg_backward(grad_out.reshape(-1, *grad_out.shape[2:]), cache.pool).reshape(spikes.shape)
    grad_direct = grad_weighted * cache.weight[None]
    grad_fire_norm = (grad_weighted * spikes).sum(axis=0)
    grad_fire_rate = instance_norm_backward(grad_fire_norm, cache.norm)
    return grad_direct + grad_fire_rate[None] / time_steps


# --------------------------------------------------------- Dense ------------------------------------------------------
def dense_forward(
    x: NDArray[Any],
    weight: NDArray[Any],
    bias: NDArray[Any],
) -> tuple[NDArray[Any], NDArray[Any]]:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``(B, D_in)`` and ``weight`` of shape ``(D_out, D_in)``."""
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        msg = f'Dense layer {weight.shape[1]} -> {weight.shape[0]} cannot take input of width {x.shape[-1]}'
        raise StructuralError(msg)
    return x @ weight.T + bias, x


def dense_backward(
    grad_out: NDArray[Any],
    x: NDArray[Any],
    weight: NDArray[Any],
    *,
    per_example: bool = False,
) -> tuple[NDArray[Any], NDArray[Any], NDArray[Any]]:
    """Exact gradients of `dense_forward`: ``(grad_x, grad_weight, grad_bias)``."""
    grad_x = grad_out @ weight
    if per_example:
        return grad_x, grad_out[:, :, None] * x[:, None, :], grad_out
    return grad_x, grad_out.T @ x, grad_out.sum(axis=0)


# ------------------------------------------------------ Output loss ---------------------------------------------------
def output_loss(final_potentials: ArrayLike, time_steps: int, label: ArrayLike) -> tuple[Any, NDArray[Any]]:
    """Softmax cross-entropy on the time-averaged output potentials.

    Parameters
    ----------
    final_potentials : ArrayLike
        Accumulated output potentials, shape ``(classes,)`` for one sample or ``(N, classes)`` for several.
    time_steps : int
        Length of the time window; logits are ``final_potentials / time_steps``.
    label : ArrayLike
        Class index (or one index per sample).

    Returns
    -------
    tuple[float | NDArray, NDArray]
        Per-sample loss and the gradient of that loss with respect to the logits,
        ``softmax(logits) - onehot(label)``.

    Raises
    ------
    StructuralError
        If a label lies outside ``[0, classes)``.
    """
    potentials = np.asarray(final_potentials)
    single = potentials.ndim == 1
    logits = np.atleast_2d(potentials) / time_steps
    labels = np.atleast_1d(np.asarray(label))
    n_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],) or np.any((labels < 0) | (labels >= n_classes)):
        msg = f'Labels {labels.tolist()} out of range for {n_classes} classes'
        raise StructuralError(msg)

    log_probs = special.log_softmax(logits, axis=-1)
    rows = np.arange(logits.shape[0])
    loss = -log_probs[rows, labels]
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    if single:
        return loss[0], grad[0]
    return loss, grad
