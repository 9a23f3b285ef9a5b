from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from ._exceptions import ContractViolationError, NumericError, StructuralError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import ArrayLike, NDArray

logger = logging.getLogger(__name__)

CLIP_TOLERANCE = 1e-6


@dataclass(frozen=True, slots=True)
class DpConfig:
    """Gradient perturbation settings.

    Parameters
    ----------
    clip_bound : float
        Per-sample l2 bound ``R``; ``math.inf`` disables clipping.
    noise_scale : float
        Noise multiplier ``sigma``; the noise standard deviation is ``sigma * R``.
    batch_size : int
        Batch size ``B`` (the expected batch size under Poisson sampling); the optimizer receives ``u / B``.
    poisson_sampling : bool, optional
        Batches have variable size, so a batch may hold more than `batch_size` samples.
    """

    clip_bound: float
    noise_scale: float
    batch_size: int
    poisson_sampling: bool = False

    def __post_init__(self) -> None:
        if not self.clip_bound > 0:
            msg = f'clip_bound must be positive, got {self.clip_bound!r}'
            raise StructuralError(msg)
        if not self.noise_scale >= 0 or math.isinf(self.noise_scale):
            msg = f'noise_scale must be finite and non-negative, got {self.noise_scale!r}'
            raise StructuralError(msg)
        if self.batch_size < 1:
            msg = f'batch_size must be at least 1, got {self.batch_size!r}'
            raise StructuralError(msg)
        if self.noise_scale > 0 and math.isinf(self.clip_bound):
            msg = 'Noise requires a finite clip_bound'
            raise StructuralError(msg)


@dataclass(frozen=True, slots=True)
class AdamWConfig:
    lr: float = 0.005
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if not self.lr > 0 or not self.eps > 0 or self.weight_decay < 0:
            msg = f'Invalid AdamW hyper-parameters: {self!r}'
            raise StructuralError(msg)
        if not all(0.0 <= beta < 1.0 for beta in self.betas):
            msg = f'AdamW betas must lie in [0, 1), got {self.betas!r}'
            raise StructuralError(msg)


@dataclass(slots=True)
class OptimizerState:
    """First and second moment estimates of AdamW plus its step counter."""

    exp_avg: NDArray[Any]
    exp_avg_sq: NDArray[Any]
    config: AdamWConfig = field(default_factory=AdamWConfig)
    step: int = 0

    @classmethod
    def zeros(cls, size: int, config: AdamWConfig | None = None, dtype: Any = np.float32) -> OptimizerState:
        return cls(np.zeros(size, dtype=dtype), np.zeros(size, dtype=dtype), config or AdamWConfig())


def _l2_norms(rows: NDArray[Any]) -> NDArray[np.float64]:
    wide = rows.astype(np.float64, copy=False)
    return np.sqrt(np.square(wide).sum(axis=-1))


def clip_gradients(gradients: ArrayLike, clip_bound: float) -> NDArray[Any]:
    """Clip every row of a ``(N, P)`` matrix to l2 norm at most `clip_bound`.

    Each row is divided by ``max(1, ||g|| / R)``. Rows whose rounded result would still exceed the bound are shrunk
    by one ulp at a time, so the output norm never exceeds ``R`` and clipping a clipped row is the identity.

    Raises
    ------
    StructuralError
        If `clip_bound` is not positive.
    NumericError
        If any gradient entry is non-finite.
    """
    rows = np.asarray(gradients)
    if not clip_bound > 0:
        msg = f'clip_bound must be positive, got {clip_bound!r}'
        raise StructuralError(msg)
    if not np.all(np.isfinite(rows)):
        raise NumericError('per-sample gradient')
    if math.isinf(clip_bound):
        return rows.copy()

    norms = _l2_norms(rows)
    over = norms > clip_bound
    clipped = rows.copy()
    for index in np.flatnonzero(over):
        factor = clip_bound / norms[index]
        row = (rows[index] * factor).astype(rows.dtype)
        while _l2_norms(row) > clip_bound:
            factor = np.nextafter(factor, 0.0)
            row = (rows[index] * factor).astype(rows.dtype)
        clipped[index] = row
    return clipped


def clip_gradient(gradient: ArrayLike, clip_bound: float) -> NDArray[Any]:
    """Clip one flat per-sample gradient to l2 norm at most `clip_bound`, preserving its direction."""
    return clip_gradients(np.asarray(gradient)[None], clip_bound)[0]


def aggregate_and_noise(
    clipped: Sequence[ArrayLike] | NDArray[Any],
    config: DpConfig,
    rng: np.random.Generator,
    size: int | None = None,
) -> NDArray[np.float64]:
    """Sum clipped per-sample gradients and add one fresh draw of ``N(0, (sigma * R)^2 I)``.

    Parameters
    ----------
    clipped : Sequence[ArrayLike] | NDArray
        Clipped gradients, one row per sample; the batch may be empty under Poisson sampling.
    config : DpConfig
        Clip bound, noise multiplier and batch size.
    rng : np.random.Generator
        Source of the Gaussian noise.
    size : int | None, optional
        Parameter count; required when `clipped` is empty.

    Returns
    -------
    NDArray[np.float64]
        The noisy sum ``u``.

    Raises
    ------
    ContractViolationError
        If a row exceeds the clip bound by more than the tolerance, or a fixed-size batch holds more than
        ``config.batch_size`` rows.
    """
    rows = np.asarray(clipped, dtype=np.float64)
    if rows.size == 0:
        if size is None:
            msg = 'size is required to aggregate an empty batch'
            raise StructuralError(msg)
        rows = np.zeros((0, size), dtype=np.float64)
    if rows.ndim != 2:
        msg = f'Expected one gradient row per sample, got array of shape {rows.shape}'
        raise StructuralError(msg)
    if not config.poisson_sampling and rows.shape[0] > config.batch_size:
        msg = f'Batch of {rows.shape[0]} samples exceeds batch_size {config.batch_size}'
        raise ContractViolationError(msg)
    norms = _l2_norms(rows)
    if np.any(norms > config.clip_bound + CLIP_TOLERANCE):
        msg = f'Unclipped gradient with norm {norms.max():.6g} > clip bound {config.clip_bound:g}'
        raise ContractViolationError(msg)

    total = rows.sum(axis=0)
    if config.noise_scale > 0:
        total += config.noise_scale * config.clip_bound * rng.standard_normal(total.shape[0])
    return total


def adamw_update(
    params: NDArray[Any],
    noisy_sum: NDArray[Any],
    config: DpConfig,
    state: OptimizerState,
) -> NDArray[Any]:
    """Apply one AdamW step with gradient estimate ``noisy_sum / batch_size``.

    Weight decay is decoupled: parameters are first scaled by ``1 - lr * weight_decay``. `state` is updated in
    place and its step counter incremented.

    Returns
    -------
    NDArray
        Updated flat parameter vector, in the dtype of `params`.

    Raises
    ------
    StructuralError
        If the vector lengths of `params`, `noisy_sum` and `state` disagree.
    """
    if not (params.shape == noisy_sum.shape == state.exp_avg.shape == state.exp_avg_sq.shape):
        msg = (
            f'Length mismatch: params {params.shape}, update {noisy_sum.shape}, moments {state.exp_avg.shape}'
        )
        raise StructuralError(msg)
    opt = state.config
    beta1, beta2 = opt.betas
    grad = (noisy_sum / config.batch_size).astype(state.exp_avg.dtype)

    state.step += 1
    state.exp_avg = beta1 * state.exp_avg + (1.0 - beta1) * grad
    state.exp_avg_sq = beta2 * state.exp_avg_sq + (1.0 - beta2) * grad * grad
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step

    decayed = params * (1.0 - opt.lr * opt.weight_decay)
    step = opt.lr * (state.exp_avg / bias1) / (np.sqrt(state.exp_avg_sq / bias2) + opt.eps)
    logger.debug('AdamW step %d: mean |update| %.3e', state.step, float(np.abs(step).mean()) if step.size else 0.0)
    return (decayed - step).astype(params.dtype)
