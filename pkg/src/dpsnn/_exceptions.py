from __future__ import annotations

from typing import Any


class DpsnnError(Exception):
    """Base class from which all `dpsnn` `Exception` objects inherit."""


class StructuralError(DpsnnError, ValueError):
    """Shapes, dimensions, or parameter domains do not fit together."""


class NumericError(DpsnnError, ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""

    def __init__(self, what: str, /, *, layer: str | None = None, timestep: int | None = None) -> None:
        """Initialize `NumericError`.

        Parameters
        ----------
        what : str
            Description of the quantity that became non-finite.
        layer : str | None, optional
            Name of the layer in which the value was produced, if known.
        timestep : int | None, optional
            One-based time step at which the value was produced, if known.
        """
        msg = f'Non-finite values in {what}'
        if layer is not None:
            msg += f'\n   Layer: {layer}'
        if timestep is not None:
            msg += f'\nTimestep: {timestep}'
        self.layer = layer
        self.timestep = timestep
        super().__init__(msg)


class ContractViolationError(DpsnnError, AssertionError):
    """An input violates a documented precondition of a privacy-relevant operation."""


class CalibrationError(DpsnnError):
    """No noise scale inside the search bracket meets the requested privacy budget."""

    def __init__(self, target_epsilon: float, bracket: tuple[float, float], reached: tuple[float, float]) -> None:
        """Initialize `CalibrationError`.

        Parameters
        ----------
        target_epsilon : float
            The requested epsilon.
        bracket : tuple[float, float]
            Lower and upper noise scale searched.
        reached : tuple[float, float]
            Epsilon obtained at the lower and upper end of `bracket`, respectively.
        """
        msg = f'Cannot calibrate noise scale for target epsilon {target_epsilon:g}\n'
        msg += f'   Sigma bracket: [{bracket[0]:g}, {bracket[1]:g}]\n'
        msg += f'  Epsilon at ends: {reached[0]:g} (low sigma), {reached[1]:g} (high sigma)'
        super().__init__(msg)


class IdxFormatError(StructuralError):
    """An IDX file is malformed; the message names the offending field."""

    def __init__(self, path: Any, field: str, detail: str) -> None:
        """Initialize `IdxFormatError`.

        Parameters
        ----------
        path : Any
            File being parsed.
        field : str
            Header or payload field that failed validation (e.g. ``'magic'``, ``'count'``).
        detail : str
            Human-readable description of the problem.
        """
        self.field = field
        super().__init__(f'{path}: {field}: {detail}')


class CheckpointFormatError(StructuralError):
    """A checkpoint file cannot be loaded (bad magic, unsupported version, or ordering-hash mismatch)."""


class PrivacyBudgetExceeded(DpsnnError):
    """The next optimizer step would push epsilon past the configured target."""

    def __init__(self, epsilon: float, target: float) -> None:
        """Initialize `PrivacyBudgetExceeded`.

        Parameters
        ----------
        epsilon : float
            Epsilon that the pending step would reach.
        target : float
            Configured privacy budget.
        """
        self.epsilon = epsilon
        self.target = target
        super().__init__(f'Step would reach epsilon {epsilon:.4f} > target {target:.4f}')
