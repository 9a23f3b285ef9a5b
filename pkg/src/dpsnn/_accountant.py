"""Renyi differential privacy accounting for DP-SGD.

Each optimizer step is a (Poisson-)subsampled Gaussian mechanism. Its RDP curve over a fixed grid of orders is
computed once; composing ``k`` steps multiplies that curve by ``k``, and the classic conversion
``epsilon = min_alpha rdp(alpha) + log(1 / delta) / (alpha - 1)`` turns the ledger into an (epsilon, delta) statement.
All divergence arithmetic happens in log space with 64-bit floats.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy import special

from ._exceptions import CalibrationError, NumericError, StructuralError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

logger = logging.getLogger(__name__)

DEFAULT_ORDERS: tuple[float, ...] = tuple(
    [1.0 + 0.25 * i for i in range(1, 37)] + [float(order) for order in range(11, 64)]
)
SIGMA_BRACKET = (0.3, 50.0)
CALIBRATION_REL_TOL = 0.005


def _check_order_sigma(alpha: float, sigma: float) -> None:
    if not alpha > 1:
        msg = f'RDP order must be > 1, got {alpha!r}'
        raise StructuralError(msg)
    if not sigma > 0:
        msg = f'Noise multiplier must be positive, got {sigma!r}'
        raise StructuralError(msg)


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        msg = f'delta must lie in (0, 1), got {delta!r}'
        raise StructuralError(msg)


def rdp_gaussian(alpha: float, sigma: float) -> float:
    """RDP of the Gaussian mechanism with sensitivity 1 and noise multiplier `sigma`: ``alpha / (2 sigma^2)``.

    Raises
    ------
    StructuralError
        If ``alpha <= 1`` or ``sigma <= 0``.
    """
    _check_order_sigma(alpha, sigma)
    if math.isinf(sigma):
        return 0.0
    return alpha / (2.0 * sigma * sigma)


def _log_a_int(alpha: int, sigma: float, q: float) -> float:
    # binomial expansion of E_{mu0}[(mu / mu0)^alpha] for the mixture mu = (1 - q) mu0 + q mu1
    k = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        special.gammaln(alpha + 1.0)
        - special.gammaln(k + 1.0)
        - special.gammaln(alpha - k + 1.0)
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + (k * k - k) / (2.0 * sigma * sigma)
    )
    return float(special.logsumexp(log_terms))


def _rdp_int(alpha: int, sigma: float, q: float) -> float:
    log_a = _log_a_int(alpha, sigma, q)
    if not math.isfinite(log_a):
        raise NumericError(f'log-moment of the sampled Gaussian at order {alpha}')
    return max(log_a, 0.0) / (alpha - 1)


def rdp_subsampled_gaussian(alpha: float, sigma: float, q: float) -> float:
    """Upper bound on the RDP of the Poisson-subsampled Gaussian mechanism at order `alpha`.

    Integer orders use the exact binomial-expansion formula. A fractional order takes the larger of the two
    neighbouring integer orders (only the ceiling when the floor is 1). ``q = 1`` reduces to `rdp_gaussian` and
    ``q = 0`` yields 0.

    Parameters
    ----------
    alpha : float
        RDP order, ``alpha > 1``.
    sigma : float
        Noise multiplier, ``sigma > 0``.
    q : float
        Sampling rate in ``[0, 1]``.

    Raises
    ------
    StructuralError
        On domain violations.
    NumericError
        If the log-space accumulation overflows.
    """
    _check_order_sigma(alpha, sigma)
    if not 0.0 <= q <= 1.0:
        msg = f'Sampling rate must lie in [0, 1], got {q!r}'
        raise StructuralError(msg)
    if q == 0.0 or math.isinf(sigma):
        return 0.0
    if q == 1.0:
        return rdp_gaussian(alpha, sigma)
    if float(alpha).is_integer():
        return _rdp_int(int(alpha), sigma, q)
    lower, upper = math.floor(alpha), math.ceil(alpha)
    bound = _rdp_int(upper, sigma, q)
    if lower >= 2:
        bound = max(bound, _rdp_int(lower, sigma, q))
    return bound


def rdp_curve(sigma: float, q: float, orders: Sequence[float] = DEFAULT_ORDERS) -> NDArray[np.float64]:
    """Per-step RDP of the subsampled Gaussian at every order of `orders`."""
    return np.array([rdp_subsampled_gaussian(alpha, sigma, q) for alpha in orders], dtype=np.float64)


def _convert(orders: NDArray[np.float64], rdp: NDArray[np.float64], delta: float) -> tuple[float, float]:
    if orders.size == 0:
        msg = 'Cannot convert an empty order grid'
        raise StructuralError(msg)
    if not 0.0 < delta < 1.0:
        msg = f'delta must lie in (0, 1), got {delta!r}'
        raise StructuralError(msg)
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(eps))
    return float(eps[best]), float(orders[best])


@dataclass(frozen=True)
class PrivacyLedger:
    """Accumulated RDP of a run of identical subsampled Gaussian steps.

    The per-step curve is fixed by `noise_scale` and `sampling_rate`; the accumulated curve is
    ``steps * per_step``, so composing ``k`` single steps equals composing ``k`` steps at once exactly.

    Parameters
    ----------
    noise_scale : float
        Noise multiplier ``sigma``.
    sampling_rate : float
        Sampling rate ``q = B / N``.
    orders : tuple[float, ...], optional
        Sorted RDP orders, all ``> 1``.
    steps : int, optional
        Number of composed steps.
    """

    noise_scale: float
    sampling_rate: float
    orders: tuple[float, ...] = DEFAULT_ORDERS
    steps: int = 0
    per_step: NDArray[np.float64] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        orders = np.asarray(self.orders, dtype=np.float64)
        if orders.size == 0 or np.any(orders <= 1.0) or np.any(np.diff(orders) <= 0):
            msg = 'RDP orders must be non-empty, strictly greater than 1 and sorted ascending'
            raise StructuralError(msg)
        if self.steps < 0:
            msg = f'steps must be non-negative, got {self.steps}'
            raise StructuralError(msg)
        object.__setattr__(self, 'orders', tuple(float(order) for order in self.orders))
        if self.noise_scale == 0:
            per_step = np.full(orders.size, np.inf)
        else:
            per_step = rdp_curve(self.noise_scale, self.sampling_rate, self.orders)
        object.__setattr__(self, 'per_step', per_step)

    @property
    def rdp_eps(self) -> NDArray[np.float64]:
        """Accumulated RDP at every order."""
        if self.steps == 0:
            return np.zeros(len(self.orders), dtype=np.float64)
        return self.steps * self.per_step

    def compose(self, steps: int = 1) -> PrivacyLedger:
        """Ledger after `steps` further optimizer steps."""
        return replace(self, steps=self.steps + steps)

    def to_eps_delta(self, delta: float) -> tuple[float, float]:
        """See `to_eps_delta`."""
        return to_eps_delta(self, delta)


def compose_step(ledger: PrivacyLedger) -> PrivacyLedger:
    """Add one subsampled Gaussian step to `ledger`; RDP composes additively."""
    return ledger.compose(1)


def to_eps_delta(ledger: PrivacyLedger, delta: float) -> tuple[float, float]:
    """Convert the ledger to (epsilon, delta)-DP.

    Returns
    -------
    tuple[float, float]
        The smallest ``rdp(alpha) + log(1 / delta) / (alpha - 1)`` over the order grid and the minimizing order.
        A ledger without steps has released nothing and reports ``(0.0, nan)``.

    Raises
    ------
    StructuralError
        If `delta` is outside ``(0, 1)``.
    """
    _check_delta(delta)
    orders = np.asarray(ledger.orders, dtype=np.float64)
    if ledger.steps == 0:
        return 0.0, math.nan
    epsilon, best_alpha = _convert(orders, ledger.rdp_eps, delta)
    if best_alpha in (orders[0], orders[-1]) and math.isfinite(epsilon):
        logger.warning('Optimal RDP order %g lies on the edge of the order grid; epsilon may be loose', best_alpha)
    return epsilon, best_alpha


def epsilon_for(
    sigma: float,
    q: float,
    steps: int,
    delta: float,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> tuple[float, float]:
    """Epsilon and best order after `steps` subsampled Gaussian steps."""
    return to_eps_delta(PrivacyLedger(sigma, q, tuple(orders), steps), delta)


def calibrate_sigma(
    target_epsilon: float,
    delta: float,
    q: float,
    total_steps: int,
    *,
    orders: Sequence[float] = DEFAULT_ORDERS,
    bracket: tuple[float, float] = SIGMA_BRACKET,
    rel_tol: float = CALIBRATION_REL_TOL,
) -> float:
    """Smallest-noise sigma whose epsilon after `total_steps` lands in ``[(1 - rel_tol) * target, target]``.

    Bisection over `bracket`; epsilon is continuous and non-increasing in sigma.

    Raises
    ------
    StructuralError
        If `target_epsilon` or `total_steps` is not positive, or `delta` is outside ``(0, 1)``.
    CalibrationError
        If the target cannot be met inside `bracket`.
    """
    if not target_epsilon > 0 or total_steps < 1:
        msg = f'Need target_epsilon > 0 and total_steps >= 1, got {target_epsilon!r}, {total_steps!r}'
        raise StructuralError(msg)
    _check_delta(delta)
    order_grid = np.asarray(orders, dtype=np.float64)
    log_inv_delta = math.log(1.0 / delta)

    def _eps(sigma: float) -> float:
        curve = total_steps * rdp_curve(sigma, q, orders)
        return float(np.min(curve + log_inv_delta / (order_grid - 1.0)))

    low, high = bracket
    eps_low, eps_high = _eps(low), _eps(high)
    floor = (1.0 - rel_tol) * target_epsilon
    if eps_high > target_epsilon or eps_low < floor:
        raise CalibrationError(target_epsilon, bracket, (eps_low, eps_high))
    if eps_low <= target_epsilon:
        return low

    for _ in range(200):
        mid = 0.5 * (low + high)
        eps_mid = _eps(mid)
        if eps_mid > target_epsilon:
            low = mid
        else:
            high, eps_high = mid, eps_mid
        if eps_high >= floor:
            break
    logger.info('Calibrated sigma %.6f: epsilon %.4f for target %.4f', high, eps_high, target_epsilon)
    return high


def ledger_state(ledger: PrivacyLedger) -> dict[str, Any]:
    """Plain-data view of a ledger for logging and persistence."""
    return {
        'noise_scale': ledger.noise_scale,
        'sampling_rate': ledger.sampling_rate,
        'steps': ledger.steps,
        'orders': list(ledger.orders),
        'rdp_eps': ledger.rdp_eps.tolist(),
    }
