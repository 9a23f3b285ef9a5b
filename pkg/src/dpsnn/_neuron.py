from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from ._exceptions import NumericError, StructuralError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

SURROGATE_HALF_WIDTH = 0.5


class NeuronKind(enum.Enum):
    """Spiking neuron model used by every convolution block of a network."""

    LIF = 'lif'
    IF = 'if'


@dataclass(frozen=True, slots=True)
class NeuronParams:
    """Leak rate, firing threshold and model kind shared by the neurons of a network.

    Parameters
    ----------
    leak_rate : float
        Decay factor applied to the membrane potential between steps. Ignored for `NeuronKind.IF`.
    threshold : float
        Potential at or above which a neuron fires.
    kind : NeuronKind
        Neuron model.
    """

    leak_rate: float = 0.5
    threshold: float = 0.5
    kind: NeuronKind = NeuronKind.LIF

    def __post_init__(self) -> None:
        if not 0.0 <= self.leak_rate <= 1.0:
            msg = f'leak_rate must lie in [0, 1], got {self.leak_rate!r}'
            raise StructuralError(msg)
        if not self.threshold > 0.0:
            msg = f'threshold must be positive, got {self.threshold!r}'
            raise StructuralError(msg)

    @property
    def decay(self) -> float:
        """Factor multiplying the surviving potential of the previous step."""
        return self.leak_rate if self.kind is NeuronKind.LIF else 1.0

    @property
    def input_gain(self) -> float:
        """Factor multiplying the input current."""
        return 1.0 - self.leak_rate if self.kind is NeuronKind.LIF else 1.0


@dataclass(frozen=True, slots=True)
class MembraneState:
    """Membrane potentials and the spikes emitted on the previous step.

    The two arrays always share one shape; `last_spike` holds only zeros and ones in the dtype of `potential`.
    """

    potential: NDArray[np.floating[Any]]
    last_spike: NDArray[np.floating[Any]]

    @classmethod
    def zeros(cls, shape: tuple[int, ...], dtype: Any = np.float32) -> MembraneState:
        """Resting state: no potential, no spikes."""
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.potential.shape


def _check_step_inputs(state: MembraneState, current: NDArray[Any]) -> None:
    if state.potential.shape != current.shape or state.last_spike.shape != current.shape:
        msg = f'Membrane state of shape {state.potential.shape} cannot integrate current of shape {current.shape}'
        raise StructuralError(msg)
    if not np.all(np.isfinite(current)):
        raise NumericError('input current')


def _advance(
    state: MembraneState,
    current: NDArray[Any],
    params: NeuronParams,
) -> tuple[MembraneState, NDArray[Any]]:
    # hard reset: whatever fired on the previous step starts again from zero
    potential = params.decay * state.potential * (1.0 - state.last_spike) + params.input_gain * current
    spikes = (potential >= params.threshold).astype(potential.dtype)
    return MembraneState(potential, spikes), spikes


def lif_step(
    state: MembraneState,
    input_current: ArrayLike,
    params: NeuronParams,
) -> tuple[MembraneState, NDArray[Any]]:
    """Advance leaky integrate-and-fire neurons by one time step.

    Computes ``V' = leak * V * (1 - o) + (1 - leak) * I`` and fires wherever ``V' >= threshold``.

    Parameters
    ----------
    state : MembraneState
        Potentials and spikes of the previous step.
    input_current : ArrayLike
        Input current with the shape of `state`.
    params : NeuronParams
        Neuron parameters; `params.kind` must be `NeuronKind.LIF`.

    Returns
    -------
    tuple[MembraneState, NDArray]
        The new state and the spikes it emitted (the same array as ``state.last_spike``).

    Raises
    ------
    StructuralError
        If shapes disagree or `params` does not describe a LIF neuron.
    NumericError
        If `input_current` contains non-finite values.
    """
    if params.kind is not NeuronKind.LIF:
        msg = f'lif_step requires a LIF neuron, got {params.kind.value!r}'
        raise StructuralError(msg)
    current = np.asarray(input_current, dtype=state.potential.dtype)
    _check_step_inputs(state, current)
    return _advance(state, current, params)


def if_step(
    state: MembraneState,
    input_current: ArrayLike,
    params: NeuronParams,
) -> tuple[MembraneState, NDArray[Any]]:
    """Advance integrate-and-fire neurons by one time step: ``V' = V * (1 - o) + I``.

    Raises the same errors as `lif_step`; `params.kind` must be `NeuronKind.IF`.
    """
    if params.kind is not NeuronKind.IF:
        msg = f'if_step requires an IF neuron, got {params.kind.value!r}'
        raise StructuralError(msg)
    current = np.asarray(input_current, dtype=state.potential.dtype)
    _check_step_inputs(state, current)
    return _advance(state, current, params)


def neuron_step(
    state: MembraneState,
    input_current: ArrayLike,
    params: NeuronParams,
) -> tuple[MembraneState, NDArray[Any]]:
    """Dispatch to `lif_step` or `if_step` according to `params.kind`."""
    if params.kind is NeuronKind.LIF:
        return lif_step(state, input_current, params)
    return if_step(state, input_current, params)


def surrogate_grad(potential: ArrayLike, params: NeuronParams) -> Any:
    """Triangular stand-in for the derivative of the firing function.

    Returns ``1 - 2 * |V - threshold|`` inside the open window ``|V - threshold| < 1/2`` and zero elsewhere,
    including on the window boundary itself. Scalars map to NumPy scalars, arrays to arrays of the same dtype.
    """
    v = np.asarray(potential)
    distance = np.abs(v - params.threshold)
    inside = distance < SURROGATE_HALF_WIDTH
    return np.where(inside, 1.0 - 2.0 * distance, 0.0).astype(distance.dtype)[()]
