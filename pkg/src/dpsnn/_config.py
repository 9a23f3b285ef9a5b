from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from typed_sentinels import Sentinel, is_sentinel

from ._data import DATASETS, Encoding, Poisson, Shuffle
from ._exceptions import StructuralError
from ._layers import PoolMethod
from ._network import NETWORKS, NetworkSpec, build_network
from ._neuron import NeuronKind

if TYPE_CHECKING:
    import argparse

logger = logging.getLogger(__name__)

UNSET: float = Sentinel(float)
"""Marker for a float setting that was not given; falsy, and typed as `float` for the type-checker."""

NUM_WORKERS_ENV = 'DPSNN_NUM_WORKERS'
SEED_STREAMS = ('init', 'batching', 'noise')


def default_num_workers() -> int:
    """Worker count from ``DPSNN_NUM_WORKERS``, or 1 when unset."""
    raw = os.environ.get(NUM_WORKERS_ENV)
    if raw is None or not raw.strip():
        return 1
    try:
        workers = int(raw)
    except ValueError:
        msg = f'{NUM_WORKERS_ENV} must be an integer, got {raw!r}'
        raise StructuralError(msg) from None
    if workers < 1:
        msg = f'{NUM_WORKERS_ENV} must be at least 1, got {workers}'
        raise StructuralError(msg)
    return workers


@dataclass(frozen=True)
class SeedStreams:
    """Independent generators derived from one master seed.

    ``init`` draws the initial parameters. Batching and noise streams are spawned per epoch and per optimizer step
    respectively, so a run resumed at an epoch boundary draws exactly what the uninterrupted run would have drawn.
    """

    seed: int
    sequences: tuple[np.random.SeedSequence, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'sequences', tuple(np.random.SeedSequence(self.seed).spawn(len(SEED_STREAMS))))

    def init(self) -> np.random.Generator:
        return np.random.default_rng(self.sequences[0])

    def batching(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng(self._child(1, epoch))

    def noise(self, step: int) -> np.random.Generator:
        return np.random.default_rng(self._child(2, step))

    def encoding(self, step: int, chunk: int) -> np.random.Generator:
        """Draws for rate-coded inputs; keyed below the batching stream so they never collide with an epoch key."""
        return np.random.default_rng(self._child(1, step, chunk))

    def evaluation(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng(self._child(0, epoch))

    def _child(self, stream: int, *keys: int) -> np.random.SeedSequence:
        parent = self.sequences[stream]
        return np.random.SeedSequence(parent.entropy, spawn_key=(*parent.spawn_key, *keys))


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run needs.

    Exactly one of `noise_scale` and `target_epsilon` must be set; the other stays `UNSET`. With a target, the
    trainer calibrates ``sigma`` for the whole run before the first step.
    """

    network: str = 'mnist_small'
    dataset: str = 'synth'
    data_dir: Path | None = None
    train_size: int | None = None
    test_size: int | None = None
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 0.005
    weight_decay: float = 0.01
    clip_bound: float = 2.0
    noise_scale: float = UNSET
    target_epsilon: float = UNSET
    delta: float = 1e-5
    seed: int = 0
    pooling: PoolMethod = PoolMethod.TEP
    neuron: NeuronKind = NeuronKind.LIF
    time_steps: int = 10
    leak_rate: float = 0.5
    threshold: float = 0.5
    encoding: Encoding = Encoding.DIRECT
    poisson_sampling: bool = False
    secure_rng: bool = False
    out_dir: Path = Path('runs')
    num_workers: int = field(default_factory=default_num_workers)
    chunk_size: int = 32
    log_steps: bool = False
    resume: Path | None = None

    def __post_init__(self) -> None:
        if is_sentinel(self.noise_scale) == is_sentinel(self.target_epsilon):
            msg = 'Set exactly one of noise_scale and target_epsilon'
            raise StructuralError(msg)
        if not is_sentinel(self.noise_scale) and not (self.noise_scale >= 0 and math.isfinite(self.noise_scale)):
            msg = f'noise_scale must be finite and non-negative, got {self.noise_scale!r}'
            raise StructuralError(msg)
        if not is_sentinel(self.target_epsilon) and not self.target_epsilon > 0:
            msg = f'target_epsilon must be positive, got {self.target_epsilon!r}'
            raise StructuralError(msg)
        positive = {
            'epochs': self.epochs,
            'batch_size': self.batch_size,
            'learning_rate': self.learning_rate,
            'clip_bound': self.clip_bound,
            'time_steps': self.time_steps,
            'num_workers': self.num_workers,
            'chunk_size': self.chunk_size,
        }
        for name, value in positive.items():
            if not value > 0:
                msg = f'{name} must be positive, got {value!r}'
                raise StructuralError(msg)
        if not 0.0 < self.delta < 1.0:
            msg = f'delta must lie in (0, 1), got {self.delta!r}'
            raise StructuralError(msg)
        if self.network not in NETWORKS:
            msg = f'Unknown network {self.network!r}; choose from {sorted(NETWORKS)}'
            raise StructuralError(msg)
        if self.dataset not in DATASETS:
            msg = f'Unknown dataset {self.dataset!r}; choose from {DATASETS}'
            raise StructuralError(msg)
        # normalise enum-valued settings given as plain strings
        object.__setattr__(self, 'pooling', PoolMethod(self.pooling))
        object.__setattr__(self, 'neuron', NeuronKind(self.neuron))
        object.__setattr__(self, 'encoding', Encoding(self.encoding))
        object.__setattr__(self, 'out_dir', Path(self.out_dir))

    @property
    def calibrate(self) -> bool:
        """Whether ``sigma`` is derived from `target_epsilon`."""
        return is_sentinel(self.noise_scale)

    def network_spec(self) -> NetworkSpec:
        return build_network(
            self.network,
            pooling=self.pooling,
            neuron=self.neuron,
            time_steps=self.time_steps,
            leak_rate=self.leak_rate,
            threshold=self.threshold,
        )

    def batch_mode(self, n_samples: int) -> Shuffle | Poisson:
        if self.poisson_sampling:
            return Poisson(min(1.0, self.batch_size / n_samples))
        return Shuffle()

    def seed_streams(self) -> SeedStreams:
        return SeedStreams(self.seed)

    def describe(self) -> dict[str, Any]:
        """Plain-data view with unset markers shown as ``None``."""
        view: dict[str, Any] = {}
        for item in fields(self):
            value = getattr(self, item.name)
            if is_sentinel(value):
                value = None
            elif isinstance(value, Path):
                value = str(value)
            elif hasattr(value, 'value'):
                value = value.value
            view[item.name] = value
        return view

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> RunConfig:
        """Build a config from parsed ``train`` arguments; ``DPSNN_NUM_WORKERS`` takes precedence over ``--workers``."""
        num_workers = default_num_workers() if os.environ.get(NUM_WORKERS_ENV) else args.workers
        return cls(
            network=args.net,
            dataset=args.dataset,
            data_dir=args.data_dir,
            train_size=args.train_size,
            test_size=args.test_size,
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            weight_decay=args.weight_decay,
            clip_bound=args.clip,
            noise_scale=UNSET if args.sigma is None else args.sigma,
            target_epsilon=UNSET if args.target_epsilon is None else args.target_epsilon,
            delta=args.delta,
            seed=args.seed,
            pooling=PoolMethod(args.pooling),
            neuron=NeuronKind(args.neuron),
            time_steps=args.time_steps,
            leak_rate=args.leak_rate,
            threshold=args.threshold,
            encoding=Encoding(args.encoding),
            poisson_sampling=args.poisson_sampling,
            secure_rng=args.secure_rng,
            out_dir=args.out,
            num_workers=num_workers,
            chunk_size=args.chunk_size,
            log_steps=args.log_steps,
            resume=args.resume,
        )
