"""Forward simulation over the full time window and backpropagation through time.

The forward pass is layer-major: each layer consumes the whole ``(T, N, ...)`` output of the layer below before the
next layer runs. This is what temporal enhanced pooling needs (its weights depend on all ``T`` spike maps) and it is
equivalent to the time-major order for every other layer, since no layer feeds information back down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, TypeAlias, TypeVar

import numpy as np

from ._exceptions import NumericError, StructuralError
from ._layers import (
    ConvCache,
    NormCache,
    PoolCache,
    PoolMethod,
    TepCache,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    group_norm_backward,
    group_norm_forward,
    output_loss,
    pool_avg_backward,
    pool_avg_forward,
    pool_max_backward,
    pool_max_forward,
    tep_backward,
    tep_forward,
)
from ._network import ConvBlock, Dense, GlobalPool, NetworkSpec, ParameterSet, Pool, parameter_layout
from ._neuron import MembraneState, NeuronParams, neuron_step, surrogate_grad

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray


@dataclass(frozen=True, slots=True)
class SpikingRecord:
    """Caches of one spiking layer; spikes are kept one bit each and unpacked by `spikes`."""

    conv: ConvCache
    norm: NormCache
    potentials: NDArray[Any]
    packed_spikes: NDArray[np.uint8]

    @classmethod
    def from_spikes(
        cls, conv: ConvCache, norm: NormCache, potentials: NDArray[Any], spikes: NDArray[Any]
    ) -> SpikingRecord:
        return cls(conv, norm, potentials, np.packbits(spikes.astype(bool), axis=None))

    @property
    def spikes(self) -> NDArray[Any]:
        """Spike train in the dtype and shape of `potentials`."""
        bits = np.unpackbits(self.packed_spikes, count=self.potentials.size)
        return bits.reshape(self.potentials.shape).astype(self.potentials.dtype)


@dataclass(frozen=True, slots=True)
class PoolRecord:
    method: PoolMethod
    cache: PoolCache | TepCache


@dataclass(frozen=True, slots=True)
class GlobalPoolRecord:
    input_shape: tuple[int, ...]


@dataclass(frozen=True, slots=True)
class OutputRecord:
    inputs: NDArray[Any]
    input_shape: tuple[int, ...]


LayerRecord: TypeAlias = SpikingRecord | PoolRecord | GlobalPoolRecord | OutputRecord
_R = TypeVar('_R', SpikingRecord, PoolRecord, GlobalPoolRecord, OutputRecord)


@dataclass(slots=True)
class Tape:
    """Everything the backward pass needs from one forward pass over ``N`` samples.

    Arrays are stored time-major with shape ``(T, N, ...)``: one record per layer, each covering all ``T`` steps.
    """

    spec: NetworkSpec
    params: ParameterSet
    batch_size: int
    records: list[LayerRecord] = field(default_factory=list)

    def fire_rates(self) -> dict[str, float]:
        """Mean spike rate of every spiking layer, keyed ``'<index>.spikes'``."""
        return {
            f'{index}.spikes': float(record.spikes.mean())
            for index, record in enumerate(self.records)
            if isinstance(record, SpikingRecord)
        }


def _layer_name(index: int, layer: Any) -> str:
    return f'{index}:{type(layer).__name__}'


def _record_as(record: LayerRecord, kind: type[_R], index: int) -> _R:
    if not isinstance(record, kind):
        msg = f'Tape record {index} is a {type(record).__name__}, its layer needs a {kind.__name__}'
        raise StructuralError(msg)
    return record


def _spiking_forward(
    currents: NDArray[Any],
    neuron: NeuronParams,
    layer_name: str,
) -> tuple[NDArray[Any], NDArray[Any]]:
    # all potentials and spikes start from zero at the beginning of each window
    state = MembraneState.zeros(currents.shape[1:], dtype=currents.dtype)
    potentials = np.empty_like(currents)
    spikes = np.empty_like(currents)
    for t in range(currents.shape[0]):
        try:
            state, spikes[t] = neuron_step(state, currents[t], neuron)
        except NumericError as e:
            raise NumericError('membrane input current', layer=layer_name, timestep=t + 1) from e
        potentials[t] = state.potential
    return potentials, spikes


def membrane_backward(
    grad_spikes: NDArray[Any],
    potentials: NDArray[Any],
    spikes: NDArray[Any],
    neuron: NeuronParams,
    grad_potentials: NDArray[Any] | None = None,
) -> NDArray[Any]:
    """Backpropagate through the membrane recursion of one spiking layer.

    For every step, running from ``T`` down to 1, the gradient on ``V[t]`` collects the spatial path (the gradient on
    ``o[t]`` times the surrogate derivative) and the temporal path (the gradient on ``V[t + 1]`` times
    ``decay * (1 - o[t])``). The reset indicator itself is treated as a constant.

    Parameters
    ----------
    grad_spikes : NDArray
        Gradient with respect to the emitted spikes, shape ``(T, ...)``.
    potentials, spikes : NDArray
        Recorded potentials and spikes, shape ``(T, ...)``.
    neuron : NeuronParams
        Neuron model of the layer.
    grad_potentials : NDArray | None, optional
        Additional gradient arriving directly on the potentials.

    Returns
    -------
    NDArray
        Gradient with respect to the input current of every step.
    """
    grad_current = np.empty_like(grad_spikes)
    carry = np.zeros_like(grad_spikes[0])
    for t in range(grad_spikes.shape[0] - 1, -1, -1):
        grad_v = grad_spikes[t] * surrogate_grad(potentials[t], neuron) + carry
        if grad_potentials is not None:
            grad_v = grad_v + grad_potentials[t]
        grad_current[t] = neuron.input_gain * grad_v
        if t > 0:
            carry = neuron.decay * (1.0 - spikes[t - 1]) * grad_v
    return grad_current


def forward_batch(
    currents: ArrayLike,
    spec: NetworkSpec,
    params: ParameterSet,
) -> tuple[NDArray[Any], Tape]:
    """Simulate `spec` on a batch of encoded samples.

    Parameters
    ----------
    currents : ArrayLike
        Encoded input of shape ``(T, N, C, H, W)``.
    spec : NetworkSpec
        Network to simulate.
    params : ParameterSet
        Parameters laid out for `spec`.

    Returns
    -------
    tuple[NDArray, Tape]
        Accumulated output potentials ``V[T]`` of shape ``(N, classes)`` and the recorded tape.

    Raises
    ------
    StructuralError
        If the input does not match ``(spec.time_steps, N, *spec.input_shape)``.
    NumericError
        If a layer produces non-finite values; the error names the layer and time step.
    """
    x = np.asarray(currents, dtype=params.dtype)
    time_steps = spec.time_steps
    if x.ndim != 5 or x.shape[0] != time_steps or x.shape[2:] != tuple(spec.input_shape):
        msg = f'Expected input of shape ({time_steps}, N, {", ".join(map(str, spec.input_shape))}), got {x.shape}'
        raise StructuralError(msg)
    n_samples = x.shape[1]
    tape = Tape(spec, params, n_samples)

    for index, layer in enumerate(spec.layers):
        name = _layer_name(index, layer)
        if isinstance(layer, ConvBlock):
            flat = x.reshape(time_steps * n_samples, *x.shape[2:])
            z, conv_cache = conv2d_forward(
                flat, params[f'{index}.conv.kernel'], params[f'{index}.conv.bias'], layer.stride, layer.padding
            )
            current, norm_cache = group_norm_forward(
                z, params[f'{index}.gn.scale'], params[f'{index}.gn.shift'], layer.groups
            )
            current = current.reshape(time_steps, n_samples, *current.shape[1:])
            potentials, x = _spiking_forward(current, spec.neuron, name)
            tape.records.append(SpikingRecord.from_spikes(conv_cache, norm_cache, potentials, x))
        elif isinstance(layer, Pool):
            cache: PoolCache | TepCache
            if layer.method is PoolMethod.TEP:
                x, cache = tep_forward(x, layer.kernel, layer.stride)
            else:
                pool = pool_max_forward if layer.method is PoolMethod.MAX else pool_avg_forward
                pooled, cache = pool(x.reshape(-1, *x.shape[2:]), layer.kernel, layer.stride)
                x = pooled.reshape(time_steps, n_samples, *pooled.shape[1:])
            tape.records.append(PoolRecord(layer.method, cache))
        elif isinstance(layer, GlobalPool):
            pooled, input_shape = global_avg_pool_forward(x.reshape(-1, *x.shape[2:]))
            x = pooled.reshape(time_steps, n_samples, -1)
            tape.records.append(GlobalPoolRecord(input_shape))
        else:
            inputs = x.reshape(time_steps * n_samples, -1)
            y, inputs = dense_forward(inputs, params[f'{index}.dense.weight'], params[f'{index}.dense.bias'])
            # the output layer never fires: it accumulates potential over the whole window
            x = y.reshape(time_steps, n_samples, -1).sum(axis=0)
            if not np.all(np.isfinite(x)):
                raise NumericError('output potentials', layer=name, timestep=time_steps)
            tape.records.append(OutputRecord(inputs, (time_steps, n_samples, *spec.layer_inputs()[index])))
    return x, tape


def forward_sample(
    currents: ArrayLike,
    spec: NetworkSpec,
    params: ParameterSet,
) -> tuple[NDArray[Any], Tape]:
    """Simulate one encoded sample of shape ``(T, C, H, W)``; returns ``V[T]`` of shape ``(classes,)`` and the tape."""
    x = np.asarray(currents)
    final, tape = forward_batch(x[:, None], spec, params)
    return final[0], tape


def backward_batch(
    tape: Tape,
    grad_logits: ArrayLike,
    params: ParameterSet | None = None,
) -> NDArray[Any]:
    """Per-sample gradients of the loss with respect to every parameter.

    Parameters
    ----------
    tape : Tape
        Tape recorded by `forward_batch`.
    grad_logits : ArrayLike
        Loss gradient with respect to the logits ``V[T] / T``, shape ``(N, classes)``.
    params : ParameterSet | None, optional
        Parameters the caller believes the tape was recorded with; must be the tape's own parameter set.

    Returns
    -------
    NDArray
        Matrix of shape ``(N, P)``; row ``k`` is the flat gradient of sample ``k`` in canonical parameter order.

    Raises
    ------
    StructuralError
        If `params` is not the parameter set of `tape`, or `grad_logits` has the wrong shape.
    """
    spec, time_steps, n_samples = tape.spec, tape.spec.time_steps, tape.batch_size
    if params is not None and params is not tape.params:
        msg = 'Tape was recorded with a different parameter set'
        raise StructuralError(msg)
    grad = np.asarray(grad_logits, dtype=tape.params.dtype)
    if grad.shape != (n_samples, spec.num_classes):
        msg = f'grad_logits must have shape ({n_samples}, {spec.num_classes}), got {grad.shape}'
        raise StructuralError(msg)
    if len(tape.records) != len(spec.layers):
        msg = 'Tape does not cover every layer of its network'
        raise StructuralError(msg)

    grads: dict[str, NDArray[Any]] = {}

    def _sum_over_time(per_slice: NDArray[Any]) -> NDArray[Any]:
        return per_slice.reshape(time_steps, n_samples, *per_slice.shape[1:]).sum(axis=0)

    upstream: NDArray[Any] = grad
    for index in range(len(spec.layers) - 1, -1, -1):
        layer, record = spec.layers[index], tape.records[index]
        if isinstance(layer, Dense):
            output = _record_as(record, OutputRecord, index)
            # V[T] is the sum of every step's output, so each step receives the same gradient
            per_step = np.broadcast_to(upstream / time_steps, (time_steps, *upstream.shape))
            grad_x, grad_w, grad_b = dense_backward(
                per_step.reshape(time_steps * n_samples, -1),
                output.inputs,
                tape.params[f'{index}.dense.weight'],
                per_example=True,
            )
            grads[f'{index}.dense.weight'] = _sum_over_time(grad_w)
            grads[f'{index}.dense.bias'] = _sum_over_time(grad_b)
            upstream = grad_x.reshape(output.input_shape)
        elif isinstance(layer, GlobalPool):
            global_pool = _record_as(record, GlobalPoolRecord, index)
            flat = global_avg_pool_backward(upstream.reshape(time_steps * n_samples, -1), global_pool.input_shape)
            upstream = flat.reshape(time_steps, n_samples, *flat.shape[1:])
        elif isinstance(layer, Pool):
            pool = _record_as(record, PoolRecord, index)
            if isinstance(pool.cache, TepCache):
                upstream = tep_backward(upstream, pool.cache)
            else:
                pool_backward = pool_max_backward if pool.method is PoolMethod.MAX else pool_avg_backward
                flat = pool_backward(upstream.reshape(-1, *upstream.shape[2:]), pool.cache)
                upstream = flat.reshape(time_steps, n_samples, *flat.shape[1:])
        else:
            spiking = _record_as(record, SpikingRecord, index)
            grad_current = membrane_backward(upstream, spiking.potentials, spiking.spikes, spec.neuron)
            grad_z, grad_scale, grad_shift = group_norm_backward(
                grad_current.reshape(-1, *grad_current.shape[2:]), spiking.norm, per_example=True
            )
            grad_x, grad_kernel, grad_bias = conv2d_backward(
                grad_z, spiking.conv, per_example=True, need_input_grad=index > 0
            )
            grads[f'{index}.conv.kernel'] = _sum_over_time(grad_kernel)
            grads[f'{index}.conv.bias'] = _sum_over_time(grad_bias)
            grads[f'{index}.gn.scale'] = _sum_over_time(grad_scale)
            grads[f'{index}.gn.shift'] = _sum_over_time(grad_shift)
            if grad_x is not None:
                upstream = grad_x.reshape(time_steps, n_samples, *grad_x.shape[1:])

    flat_grads = np.concatenate([grads[name].reshape(n_samples, -1) for name, _ in tape.params.layout], axis=1)
    if flat_grads.shape[1] != tape.params.size:
        msg = f'Gradient length {flat_grads.shape[1]} does not match {tape.params.size} parameters'
        raise StructuralError(msg)
    return flat_grads


def backward_sample(tape: Tape, grad_logits: ArrayLike, params: ParameterSet | None = None) -> NDArray[Any]:
    """Flat gradient of a single-sample tape; `grad_logits` has shape ``(classes,)``."""
    return backward_batch(tape, np.asarray(grad_logits)[None], params)[0]


@dataclass(frozen=True, slots=True)
class SampleGradients:
    """Per-sample results of one forward/backward pass over a chunk of samples."""

    gradients: NDArray[Any]
    losses: NDArray[Any]
    logits: NDArray[Any]
    fire_rates: dict[str, float]


def per_sample_gradients(
    currents: ArrayLike,
    labels: ArrayLike,
    spec: NetworkSpec,
    params: ParameterSet,
) -> SampleGradients:
    """Forward, loss and backward for every sample in a ``(T, N, ...)`` chunk, without any cross-sample reduction."""
    final, tape = forward_batch(currents, spec, params)
    losses, grad_logits = output_loss(final, spec.time_steps, np.asarray(labels))
    if not np.all(np.isfinite(losses)):
        raise NumericError('loss', layer=_layer_name(len(spec.layers) - 1, spec.layers[-1]))
    gradients = backward_batch(tape, grad_logits)
    return SampleGradients(gradients, np.asarray(losses), final / spec.time_steps, tape.fire_rates())


def parameter_count(spec: NetworkSpec) -> int:
    return sum(math.prod(shape) for _, shape in parameter_layout(spec))
