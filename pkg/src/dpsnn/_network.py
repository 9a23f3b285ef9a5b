from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, TypeAlias

import numpy as np

from ._exceptions import StructuralError
from ._layers import PoolMethod, conv_output_size
from ._neuron import NeuronKind, NeuronParams

if TYPE_CHECKING:
    from collections.abc import Iterator

    from numpy.typing import NDArray


@dataclass(frozen=True, slots=True)
class ConvBlock:
    """Convolution, group normalization and a layer of spiking neurons.

    Parameters
    ----------
    out_channels : int
        Number of output channels; must be divisible by `groups`.
    kernel_size : int
        Square kernel size.
    padding : int, optional
        Zero padding on every border.
    stride : int, optional
        Convolution stride.
    groups : int, optional
        Group normalization groups.
    """

    out_channels: int
    kernel_size: int
    padding: int = 0
    stride: int = 1
    groups: int = 16

    def __post_init__(self) -> None:
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            msg = f'Invalid convolution geometry: {self!r}'
            raise StructuralError(msg)
        if self.groups < 1 or self.out_channels % self.groups:
            msg = f'{self.out_channels} output channels are not divisible by {self.groups} groups'
            raise StructuralError(msg)


@dataclass(frozen=True, slots=True)
class Pool:
    method: PoolMethod
    kernel: int
    stride: int = 2

    def __post_init__(self) -> None:
        if self.kernel < 1 or self.stride < 1:
            msg = f'Invalid pooling geometry: {self!r}'
            raise StructuralError(msg)


@dataclass(frozen=True, slots=True)
class GlobalPool:
    """Global average over the spatial positions of every spike map, applied per time step."""


@dataclass(frozen=True, slots=True)
class Dense:
    """Fully connected, non-spiking layer; as the last layer it accumulates potential over the time window."""

    out_features: int


Layer: TypeAlias = ConvBlock | Pool | GlobalPool | Dense


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative layer list of a spiking network.

    The shape chain is validated on construction: spatial layers must fit the maps they receive, `Dense` layers
    flatten whatever reaches them, and the final layer must be `Dense`.

    Parameters
    ----------
    input_shape : tuple[int, int, int]
        ``(channels, height, width)`` of one encoded input slice.
    layers : tuple[Layer, ...]
        Ordered layers.
    time_steps : int
        Length ``T`` of the simulation window.
    neuron : NeuronParams
        Neuron model shared by all convolution blocks.
    name : str, optional
        Registry name used in checkpoints.
    """

    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    time_steps: int = 10
    neuron: NeuronParams = field(default_factory=NeuronParams)
    name: str = 'custom'

    def __post_init__(self) -> None:
        if self.time_steps < 1:
            msg = f'time_steps must be at least 1, got {self.time_steps}'
            raise StructuralError(msg)
        if not self.layers or not isinstance(self.layers[-1], Dense):
            msg = 'The final layer of a network must be Dense'
            raise StructuralError(msg)
        if any(isinstance(layer, Dense) for layer in self.layers[:-1]):
            msg = 'Dense layers are only supported as the output layer'
            raise StructuralError(msg)
        self.layer_shapes()

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer, in order.

        Raises
        ------
        StructuralError
            If the dimensions do not chain.
        """
        shape: tuple[int, ...] = tuple(self.input_shape)
        shapes: list[tuple[int, ...]] = []
        for index, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shape = (layer.out_features,)
            elif len(shape) != 3:
                msg = f'Layer {index} ({type(layer).__name__}) needs a spatial input, got {shape}'
                raise StructuralError(msg)
            elif isinstance(layer, ConvBlock):
                out_h = conv_output_size(shape[1], layer.kernel_size, layer.stride, layer.padding)
                out_w = conv_output_size(shape[2], layer.kernel_size, layer.stride, layer.padding)
                if out_h < 1 or out_w < 1:
                    msg = f'Layer {index}: kernel {layer.kernel_size} does not fit {shape[1]}x{shape[2]}'
                    raise StructuralError(msg)
                shape = (layer.out_channels, out_h, out_w)
            elif isinstance(layer, Pool):
                if layer.kernel > shape[1] or layer.kernel > shape[2]:
                    msg = f'Layer {index}: pooling kernel {layer.kernel} exceeds {shape[1]}x{shape[2]}'
                    raise StructuralError(msg)
                shape = (
                    shape[0],
                    conv_output_size(shape[1], layer.kernel, layer.stride),
                    conv_output_size(shape[2], layer.kernel, layer.stride),
                )
            else:
                shape = (shape[0],)
            shapes.append(shape)
        return shapes

    def layer_inputs(self) -> list[tuple[int, ...]]:
        """Per-sample input shape of every layer, in order."""
        return [tuple(self.input_shape), *self.layer_shapes()[:-1]]

    @property
    def num_classes(self) -> int:
        last = self.layers[-1]
        if not isinstance(last, Dense):
            msg = f'Network must end in a Dense layer, ends in {type(last).__name__}'
            raise StructuralError(msg)
        return last.out_features

    def with_pooling(self, method: PoolMethod) -> NetworkSpec:
        """Copy of this network with every `Pool` layer switched to `method`."""
        layers = tuple(replace(layer, method=method) if isinstance(layer, Pool) else layer for layer in self.layers)
        return replace(self, layers=layers)

    def describe(self) -> str:
        """One line per layer with its output shape, e.g. for logging the dimension chain."""
        lines = [f'input {self.input_shape}']
        lines.extend(f'{layer!r} -> {shape}' for layer, shape in zip(self.layers, self.layer_shapes(), strict=True))
        return '\n'.join(lines)


def _neuron(kind: NeuronKind | str, leak_rate: float, threshold: float) -> NeuronParams:
    return NeuronParams(leak_rate=leak_rate, threshold=threshold, kind=NeuronKind(kind))


def mnist_small(
    pooling: PoolMethod | str = PoolMethod.TEP,
    neuron: NeuronKind | str = NeuronKind.LIF,
    time_steps: int = 10,
    *,
    leak_rate: float = 0.5,
    threshold: float = 0.5,
) -> NetworkSpec:
    """Small structure for 28x28 grayscale digits: ``CB(32,7,0) P(2) CB(64,4,0) P(2) FC(10)``.

    The dimension chain is ``28 -> 22 -> 11 -> 8 -> 4 -> 64*4*4 -> 10``.
    """
    method = PoolMethod(pooling)
    layers: tuple[Layer, ...] = (
        ConvBlock(32, 7, padding=0),
        Pool(method, 2),
        ConvBlock(64, 4, padding=0),
        Pool(method, 2),
        Dense(10),
    )
    return NetworkSpec((1, 28, 28), layers, time_steps, _neuron(neuron, leak_rate, threshold), 'mnist_small')


def vgg_cifar(
    pooling: PoolMethod | str = PoolMethod.TEP,
    neuron: NeuronKind | str = NeuronKind.LIF,
    time_steps: int = 10,
    *,
    leak_rate: float = 0.5,
    threshold: float = 0.5,
) -> NetworkSpec:
    """VGG-style structure for 32x32 colour images, pooling kernel 5 and a global pooling head."""
    method = PoolMethod(pooling)
    layers: tuple[Layer, ...] = (
        ConvBlock(64, 3, padding=1),
        ConvBlock(64, 3, padding=1),
        Pool(method, 5),
        ConvBlock(128, 3, padding=1),
        ConvBlock(128, 3, padding=1),
        Pool(method, 5),
        ConvBlock(128, 3, padding=1),
        ConvBlock(128, 3, padding=1),
        Pool(method, 5),
        ConvBlock(256, 3, padding=1),
        ConvBlock(256, 3, padding=1),
        GlobalPool(),
        Dense(10),
    )
    return NetworkSpec((3, 32, 32), layers, time_steps, _neuron(neuron, leak_rate, threshold), 'vgg_cifar')


NETWORKS = {
    'mnist_small': mnist_small,
    'vgg_cifar': vgg_cifar,
}


def build_network(name: str, **kwargs: Any) -> NetworkSpec:
    """Look up a network builder by registry name and call it with `kwargs`."""
    try:
        builder = NETWORKS[name]
    except KeyError:
        msg = f'Unknown network {name!r}; choose from {sorted(NETWORKS)}'
        raise StructuralError(msg) from None
    return builder(**kwargs)


# ------------------------------------------------------ Parameters ----------------------------------------------------
def parameter_layout(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical ``(name, shape)`` ordering: layer order, then kernel, bias, GN scale, GN shift within a block."""
    layout: list[tuple[str, tuple[int, ...]]] = []
    for index, (layer, in_shape) in enumerate(zip(spec.layers, spec.layer_inputs(), strict=True)):
        if isinstance(layer, ConvBlock):
            layout += [
                (f'{index}.conv.kernel', (layer.out_channels, in_shape[0], layer.kernel_size, layer.kernel_size)),
                (f'{index}.conv.bias', (layer.out_channels,)),
                (f'{index}.gn.scale', (layer.out_channels,)),
                (f'{index}.gn.shift', (layer.out_channels,)),
            ]
        elif isinstance(layer, Dense):
            fan_in = math.prod(in_shape)
            layout += [
                (f'{index}.dense.weight', (layer.out_features, fan_in)),
                (f'{index}.dense.bias', (layer.out_features,)),
            ]
    return layout


def ordering_hash(spec: NetworkSpec) -> bytes:
    """SHA-256 digest of the canonical parameter layout; checkpoints refuse to load under a different layout."""
    text = ';'.join(f'{name}:{"x".join(map(str, shape))}' for name, shape in parameter_layout(spec))
    return hashlib.sha256(text.encode()).digest()


class ParameterSet:
    """Named parameter arrays of a network, kept in canonical order.

    The flat view concatenates every array in that order; per-sample gradients use the same layout.
    """

    __slots__ = ('_arrays', 'layout')

    def __init__(self, layout: list[tuple[str, tuple[int, ...]]], arrays: dict[str, NDArray[Any]]) -> None:
        for name, shape in layout:
            if name not in arrays or arrays[name].shape != shape:
                got = arrays[name].shape if name in arrays else None
                msg = f'Parameter {name!r} expected shape {shape}, got {got}'
                raise StructuralError(msg)
        self.layout = layout
        self._arrays = {name: arrays[name] for name, _ in layout}

    @classmethod
    def initialize(cls, spec: NetworkSpec, rng: np.random.Generator, dtype: Any = np.float32) -> ParameterSet:
        """Fan-in scaled uniform weights and biases; GN scale 1 and shift 0."""
        layout = parameter_layout(spec)
        arrays: dict[str, NDArray[Any]] = {}
        bound = 1.0
        for name, shape in layout:
            if name.endswith(('.kernel', '.weight')):
                bound = 1.0 / math.sqrt(math.prod(shape[1:]))
                arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            elif name.endswith(('conv.bias', 'dense.bias')):
                arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            elif name.endswith('.scale'):
                arrays[name] = np.ones(shape, dtype=dtype)
            else:
                arrays[name] = np.zeros(shape, dtype=dtype)
        return cls(layout, arrays)

    @classmethod
    def from_flat(cls, spec: NetworkSpec, flat: NDArray[Any]) -> ParameterSet:
        layout = parameter_layout(spec)
        sizes = [math.prod(shape) for _, shape in layout]
        if flat.ndim != 1 or flat.size != sum(sizes):
            msg = f'Flat vector of size {flat.size} does not match {sum(sizes)} parameters'
            raise StructuralError(msg)
        arrays: dict[str, NDArray[Any]] = {}
        offset = 0
        for (name, shape), size in zip(layout, sizes, strict=True):
            arrays[name] = flat[offset : offset + size].reshape(shape).copy()
            offset += size
        return cls(layout, arrays)

    def __getitem__(self, name: str) -> NDArray[Any]:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    @property
    def size(self) -> int:
        """Total number of scalar parameters."""
        return sum(array.size for array in self._arrays.values())

    @property
    def dtype(self) -> np.dtype[Any]:
        return next(iter(self._arrays.values())).dtype

    def flatten(self) -> NDArray[Any]:
        return np.concatenate([array.ravel() for array in self._arrays.values()])

    def astype(self, dtype: Any) -> ParameterSet:
        return ParameterSet(self.layout, {name: array.astype(dtype) for name, array in self._arrays.items()})
