import numpy as np
import pytest

from dpsnn import ConvBlock, Dense, GlobalPool, NetworkSpec, ParameterSet, Pool, PoolMethod, StructuralError
from dpsnn import build_network, mnist_small, ordering_hash, parameter_layout, vgg_cifar


def test_mnist_small_dimension_chain() -> None:
    spec = mnist_small()

    assert spec.layer_shapes() == [(32, 22, 22), (32, 11, 11), (64, 8, 8), (64, 4, 4), (10,)]
    assert spec.layer_inputs()[-1] == (64, 4, 4)
    assert spec.num_classes == 10
    assert spec.time_steps == 10
    assert spec.neuron.leak_rate == 0.5
    assert spec.neuron.threshold == 0.5


def test_vgg_cifar_chain() -> None:
    spec = vgg_cifar(pooling='max')

    shapes = spec.layer_shapes()
    assert shapes[2] == (64, 14, 14)
    assert shapes[5] == (128, 5, 5)
    assert shapes[8] == (128, 1, 1)
    assert shapes[-2] == (256,)
    assert shapes[-1] == (10,)
    assert all(layer.method is PoolMethod.MAX for layer in spec.layers if isinstance(layer, Pool))


def test_spec_validation() -> None:
    with pytest.raises(StructuralError, match='Dense'):
        NetworkSpec((1, 8, 8), (ConvBlock(4, 3, groups=2),))

    with pytest.raises(StructuralError, match='output layer'):
        NetworkSpec((1, 8, 8), (Dense(5), Dense(10)))

    with pytest.raises(StructuralError, match='does not fit'):
        NetworkSpec((1, 4, 4), (ConvBlock(4, 7, groups=2), Dense(10)))

    with pytest.raises(StructuralError, match='exceeds'):
        NetworkSpec((1, 4, 4), (ConvBlock(4, 3, groups=2), Pool(PoolMethod.AVG, 3), Dense(10)))

    with pytest.raises(StructuralError, match='divisible'):
        ConvBlock(6, 3, groups=4)

    with pytest.raises(StructuralError):
        build_network('resnet')

    truncated = mnist_small()
    object.__setattr__(truncated, 'layers', truncated.layers[:-1])
    with pytest.raises(StructuralError, match='must end in a Dense'):
        truncated.num_classes  # noqa: B018


def test_with_pooling_and_describe() -> None:
    spec = mnist_small(pooling=PoolMethod.TEP).with_pooling(PoolMethod.AVG)

    assert [layer.method for layer in spec.layers if isinstance(layer, Pool)] == [PoolMethod.AVG] * 2
    assert spec.describe().splitlines()[0] == 'input (1, 28, 28)'
    assert len(spec.describe().splitlines()) == 6


def test_parameter_layout_order() -> None:
    spec = NetworkSpec((1, 6, 6), (ConvBlock(4, 3, groups=2), GlobalPool(), Dense(3)))

    assert parameter_layout(spec) == [
        ('0.conv.kernel', (4, 1, 3, 3)),
        ('0.conv.bias', (4,)),
        ('0.gn.scale', (4,)),
        ('0.gn.shift', (4,)),
        ('2.dense.weight', (3, 4)),
        ('2.dense.bias', (3,)),
    ]


def test_ordering_hash_tracks_layout() -> None:
    assert ordering_hash(mnist_small()) == ordering_hash(mnist_small(pooling='max', neuron='if'))
    assert ordering_hash(mnist_small()) != ordering_hash(vgg_cifar())
    assert len(ordering_hash(mnist_small())) == 32


class TestParameterSet:
    def test_initialize_is_deterministic(self) -> None:
        spec = mnist_small()

        a = ParameterSet.initialize(spec, np.random.default_rng(7))
        b = ParameterSet.initialize(spec, np.random.default_rng(7))

        assert a.flatten().tobytes() == b.flatten().tobytes()
        assert a.dtype == np.float32
        assert len(a) == 10

    def test_initial_values(self) -> None:
        params = ParameterSet.initialize(mnist_small(), np.random.default_rng(0))

        np.testing.assert_array_equal(params['0.gn.scale'], 1.0)
        np.testing.assert_array_equal(params['2.gn.shift'], 0.0)
        bound = 1.0 / np.sqrt(1 * 7 * 7)
        assert np.abs(params['0.conv.kernel']).max() <= bound + 1e-7

    def test_flat_round_trip(self) -> None:
        spec = mnist_small()
        params = ParameterSet.initialize(spec, np.random.default_rng(1))

        flat = params.flatten()
        restored = ParameterSet.from_flat(spec, flat)

        assert flat.size == params.size == 1664 + 32960 + 10250
        assert list(restored) == list(params)
        np.testing.assert_array_equal(restored.flatten(), flat)

    def test_from_flat_size_mismatch(self) -> None:
        with pytest.raises(StructuralError, match='does not match'):
            ParameterSet.from_flat(mnist_small(), np.zeros(10, dtype=np.float32))

    def test_astype(self) -> None:
        params = ParameterSet.initialize(mnist_small(), np.random.default_rng(2))

        wide = params.astype(np.float64)

        assert wide.dtype == np.float64
        np.testing.assert_array_equal(wide.flatten(), params.flatten().astype(np.float64))
