from collections.abc import Callable
from typing import Any

import numpy as np
import pytest

FD_STEP = 1e-3


def numeric_gradient(func: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = func(x)
        flat[i] = saved - h
        minus = func(x)
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: Any, numeric: Any) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)), 1e-12)
    return float(np.abs(a - n).max(initial=0.0)) / scale


class GradientChecker:
    """Compare an analytic backward pass against central differences of ``sum(forward(x) * weights)``."""

    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng

    def weights_like(self, out: np.ndarray) -> np.ndarray:
        return self.rng.standard_normal(out.shape)

    numeric = staticmethod(numeric_gradient)
    relative = staticmethod(relative_error)

    def error(
        self,
        forward: Callable[[np.ndarray], np.ndarray],
        x: np.ndarray,
        analytic: Callable[[np.ndarray], np.ndarray],
    ) -> float:
        """`analytic` receives the upstream gradient (the random weights) and returns the gradient for `x`."""
        weights = self.weights_like(forward(x))
        numeric = numeric_gradient(lambda v: float(np.sum(forward(v) * weights)), x)
        return relative_error(analytic(weights), numeric)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def gradient_checker(rng: np.random.Generator) -> GradientChecker:
    return GradientChecker(rng)
