"""Differentially private training loop, evaluation and run bookkeeping."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import IO, TYPE_CHECKING, Any

import numpy as np

from ._accountant import PrivacyLedger, calibrate_sigma, compose_step, to_eps_delta
from ._bptt import forward_batch, per_sample_gradients
from ._checkpoint import checkpoint_load, checkpoint_save
from ._data import Encoding, LabeledImageSet, Split, batches_per_epoch, encode, load_dataset, make_batches
from ._dp_optimizer import AdamWConfig, DpConfig, OptimizerState, adamw_update, aggregate_and_noise, clip_gradients
from ._exceptions import PrivacyBudgetExceeded, StructuralError
from ._network import NetworkSpec, ParameterSet

if TYPE_CHECKING:
    from collections.abc import Callable, Iterator, Sequence
    from concurrent.futures import Executor

    from numpy.typing import ArrayLike, NDArray

    from ._config import RunConfig, SeedStreams

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'summary.csv'
CHECKPOINT_FILE = 'checkpoint.dpsn'
RUN_FILE = 'run.json'
EVAL_CHUNK = 256


@dataclass(frozen=True, slots=True)
class MetricsRow:
    """One line of the metrics file: an epoch summary, or a single step in per-step mode."""

    epoch: int
    step: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    epsilon: float
    best_alpha: float
    wall_time_s: float

    @classmethod
    def header(cls) -> list[str]:
        return [item.name for item in fields(cls)]

    def cells(self) -> list[str]:
        return [
            str(self.epoch),
            str(self.step),
            f'{self.train_loss:.6f}',
            f'{self.train_accuracy:.6f}',
            f'{self.test_accuracy:.6f}',
            f'{self.epsilon:.6f}',
            f'{self.best_alpha:g}',
            f'{self.wall_time_s:.3f}',
        ]


class MetricsWriter:
    """Append-only CSV writer with a fixed header; every row is flushed as soon as it is written."""

    def __init__(self, path: Path, *, append: bool = False) -> None:
        self.path = path
        resume = append and path.exists()
        self._stream: IO[str] = path.open('a' if resume else 'w', newline='')
        self._writer = csv.writer(self._stream)
        if not resume:
            self._writer.writerow(MetricsRow.header())

    def write(self, row: MetricsRow) -> None:
        self._writer.writerow(row.cells())
        self._stream.flush()

    def close(self) -> None:
        self._stream.close()

    def __enter__(self) -> MetricsWriter:
        return self

    def __exit__(self, *_: object) -> None:
        self.close()


@dataclass
class TrainResult:
    spec: NetworkSpec
    params: ParameterSet
    ledger: PrivacyLedger
    noise_scale: float
    epsilon: float
    best_alpha: float
    rows: list[MetricsRow] = field(default_factory=list)
    halted: bool = False
    out_dir: Path | None = None

    @property
    def test_accuracy(self) -> float:
        return self.rows[-1].test_accuracy if self.rows else math.nan


@dataclass
class _EpochStats:
    loss_sum: float = 0.0
    correct: int = 0
    seen: int = 0
    fire_sums: dict[str, float] = field(default_factory=dict)

    def add(self, losses: NDArray[Any], correct: int, fire_rates: dict[str, float]) -> None:
        n_samples = int(losses.shape[0])
        self.loss_sum += float(losses.sum(dtype=np.float64))
        self.correct += correct
        self.seen += n_samples
        for name, rate in fire_rates.items():
            self.fire_sums[name] = self.fire_sums.get(name, 0.0) + rate * n_samples

    @property
    def loss(self) -> float:
        return self.loss_sum / self.seen if self.seen else math.nan

    @property
    def accuracy(self) -> float:
        return self.correct / self.seen if self.seen else math.nan

    def fire_rates(self) -> dict[str, float]:
        return {name: total / self.seen for name, total in self.fire_sums.items()} if self.seen else {}


@dataclass(frozen=True, slots=True)
class _ChunkResult:
    clipped: NDArray[Any]
    losses: NDArray[Any]
    correct: int
    fire_rates: dict[str, float]


def accuracy(logits: ArrayLike, labels: ArrayLike) -> float:
    """Fraction of rows whose argmax (first maximum on ties) equals the label."""
    predictions = np.argmax(np.asarray(logits), axis=-1)
    targets = np.asarray(labels)
    if predictions.shape != targets.shape:
        msg = f'{predictions.shape[0]} predictions for {targets.shape[0]} labels'
        raise StructuralError(msg)
    return float(np.mean(predictions == targets)) if targets.size else math.nan


def _chunks(indices: NDArray[np.int64], size: int) -> list[NDArray[np.int64]]:
    return [indices[start : start + size] for start in range(0, indices.shape[0], size)]


def predict(
    params: ParameterSet,
    images: ArrayLike,
    spec: NetworkSpec,
    *,
    encoding: Encoding | None = None,
    rng: np.random.Generator | None = None,
) -> NDArray[Any]:
    """Logits ``V[T] / T`` for a stack of images ``(N, C, H, W)``."""
    currents = encode(np.asarray(images, dtype=params.dtype), spec.time_steps, encoding or Encoding.DIRECT, rng)
    final, _ = forward_batch(currents, spec, params)
    return final / spec.time_steps


def evaluate(
    params: ParameterSet,
    testset: LabeledImageSet,
    spec: NetworkSpec,
    *,
    chunk_size: int = EVAL_CHUNK,
    executor: Executor | None = None,
    encoding: Encoding | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Test accuracy of `params`: argmax of ``V[T] / T`` against the labels.

    Pointwise per sample, so the result does not depend on the order of `testset` or on `chunk_size`.
    """
    if len(testset) == 0:
        msg = 'Cannot evaluate on an empty set'
        raise StructuralError(msg)
    if testset.image_shape != tuple(spec.input_shape):
        msg = f'Images of shape {testset.image_shape} do not fit network input {spec.input_shape}'
        raise StructuralError(msg)

    def _correct(index: NDArray[np.int64]) -> int:
        logits = predict(params, testset.images[index], spec, encoding=encoding, rng=rng)
        return int(np.sum(np.argmax(logits, axis=-1) == testset.labels[index]))

    chunks = _chunks(np.arange(len(testset), dtype=np.int64), chunk_size)
    counts = executor.map(_correct, chunks) if executor is not None and rng is None else map(_correct, chunks)
    return sum(counts) / len(testset)


def _batch_gradients(
    executor: Executor,
    dataset: LabeledImageSet,
    indices: NDArray[np.int64],
    spec: NetworkSpec,
    params: ParameterSet,
    config: RunConfig,
    streams: SeedStreams,
    step: int,
) -> list[_ChunkResult]:
    # chunk boundaries depend only on the batch, never on the worker count
    def _work(item: tuple[int, NDArray[np.int64]]) -> _ChunkResult:
        number, index = item
        images = dataset.images[index].astype(params.dtype, copy=False)
        currents = encode(images, spec.time_steps, config.encoding, streams.encoding(step, number))
        result = per_sample_gradients(currents, dataset.labels[index], spec, params)
        correct = int(np.sum(np.argmax(result.logits, axis=-1) == dataset.labels[index]))
        clipped = clip_gradients(result.gradients, config.clip_bound)
        return _ChunkResult(clipped, result.losses, correct, result.fire_rates)

    return list(executor.map(_work, enumerate(_chunks(indices, config.chunk_size))))


def _check_budget(ledger: PrivacyLedger, target: float | None, delta: float) -> None:
    if target is None:
        return
    epsilon, _ = to_eps_delta(ledger, delta)
    if epsilon > target:
        raise PrivacyBudgetExceeded(epsilon, target)


def _load_splits(config: RunConfig) -> tuple[LabeledImageSet, LabeledImageSet]:
    train_set = load_dataset(config.dataset, config.data_dir, Split.TRAIN).take(config.train_size)
    test_set = load_dataset(config.dataset, config.data_dir, Split.TEST).take(config.test_size)
    return train_set, test_set


def resolve_noise_scale(config: RunConfig, n_samples: int) -> float:
    """``sigma`` for the run: the configured value, or the one calibrated to the privacy target over all epochs."""
    if not config.calibrate:
        return config.noise_scale
    rate = min(1.0, config.batch_size / n_samples)
    total_steps = config.epochs * batches_per_epoch(n_samples, config.batch_size)
    return calibrate_sigma(config.target_epsilon, config.delta, rate, total_steps)


def train(
    config: RunConfig,
    *,
    clock: Callable[[], float] = time.perf_counter,
    train_set: LabeledImageSet | None = None,
    test_set: LabeledImageSet | None = None,
) -> TrainResult:
    """Train a spiking network with DP-SGD and write metrics and checkpoints to ``config.out_dir``.

    Every batch goes through per-sample forward and backward passes, per-sample clipping, one noisy aggregation,
    an AdamW update and one ledger composition. The epsilon the next step would reach is checked before the update is
    applied, so no step ever pushes the run past its privacy target.

    Parameters
    ----------
    config : RunConfig
        Run settings.
    clock : Callable[[], float], optional
        Time source for the ``wall_time_s`` column; inject a constant clock for byte-identical metrics files.
    train_set, test_set : LabeledImageSet | None, optional
        Data to use instead of loading ``config.dataset``.

    Raises
    ------
    CalibrationError
        If ``sigma`` cannot be calibrated to the target.
    NumericError
        If the loss or any activation diverges.
    StructuralError
        If the data does not fit the network.
    """
    spec = config.network_spec()
    if train_set is None or test_set is None:
        loaded_train, loaded_test = _load_splits(config)
        train_set = loaded_train if train_set is None else train_set
        test_set = loaded_test if test_set is None else test_set
    if train_set.image_shape != tuple(spec.input_shape):
        msg = f'Dataset images {train_set.image_shape} do not fit network {spec.name!r} input {spec.input_shape}'
        raise StructuralError(msg)

    n_samples = len(train_set)
    mode = config.batch_mode(n_samples)
    sampling_rate = min(1.0, config.batch_size / n_samples)
    sigma = resolve_noise_scale(config, n_samples)
    target = config.target_epsilon if config.calibrate else None
    dp = DpConfig(config.clip_bound, sigma, config.batch_size, config.poisson_sampling)
    streams = config.seed_streams()
    if sigma > 0 and not config.poisson_sampling:
        logger.warning('Accounting assumes Poisson sampling but batches are shuffled; epsilon is approximate')
    if sigma > 0 and not config.secure_rng:
        logger.warning('Gradient noise is drawn from a seeded generator; pass --secure-rng for deployment')

    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.resume is not None:
        checkpoint = checkpoint_load(config.resume, spec)
        params, opt_state, ledger, start_epoch = (
            checkpoint.params,
            checkpoint.opt_state,
            checkpoint.ledger,
            checkpoint.epoch,
        )
        if (ledger.noise_scale, ledger.sampling_rate) != (sigma, sampling_rate):
            msg = (
                f'Checkpoint ledger (sigma={ledger.noise_scale}, q={ledger.sampling_rate}) does not match this run '
                f'(sigma={sigma}, q={sampling_rate})'
            )
            raise StructuralError(msg)
        logger.info('Resuming from %s at epoch %d after %d steps', config.resume, start_epoch, ledger.steps)
    else:
        params = ParameterSet.initialize(spec, streams.init())
        opt_state = OptimizerState.zeros(
            params.size, AdamWConfig(lr=config.learning_rate, weight_decay=config.weight_decay), params.dtype
        )
        ledger = PrivacyLedger(sigma, sampling_rate)
        start_epoch = 0

    (out_dir / RUN_FILE).write_text(
        json.dumps({'config': config.describe(), 'noise_scale': sigma, 'sampling_rate': sampling_rate}, indent=2)
        + '\n'
    )
    logger.info(
        'Training %s on %d samples: sigma=%.4f, q=%.5f, %d epochs', spec.name, n_samples, sigma, sampling_rate,
        config.epochs,
    )
    logger.debug('Layers of %s:\n%s', spec.name, spec.describe())

    result = TrainResult(spec, params, ledger, sigma, *to_eps_delta(ledger, config.delta), out_dir=out_dir)
    started = clock()
    with (
        ThreadPoolExecutor(max_workers=config.num_workers) as executor,
        MetricsWriter(out_dir / METRICS_FILE, append=config.resume is not None) as writer,
    ):
        for epoch in range(start_epoch, config.epochs):
            stats = _EpochStats()
            for indices in make_batches(n_samples, config.batch_size, mode, streams.batching(epoch)):
                step = opt_state.step
                chunks = _batch_gradients(executor, train_set, indices, spec, params, config, streams, step)
                next_ledger = compose_step(ledger)
                try:
                    _check_budget(next_ledger, target, config.delta)
                except PrivacyBudgetExceeded as e:
                    logger.warning('Halting before step %d: %s', step + 1, e)
                    result.halted = True
                    break

                noise_rng = np.random.default_rng() if config.secure_rng else streams.noise(step)
                clipped = (
                    np.concatenate([chunk.clipped for chunk in chunks])
                    if chunks
                    else np.zeros((0, params.size), dtype=params.dtype)
                )
                noisy_sum = aggregate_and_noise(clipped, dp, noise_rng, size=params.size)
                params = ParameterSet.from_flat(spec, adamw_update(params.flatten(), noisy_sum, dp, opt_state))
                ledger = next_ledger

                batch = _EpochStats()
                for chunk in chunks:
                    batch.add(chunk.losses, chunk.correct, chunk.fire_rates)
                    stats.add(chunk.losses, chunk.correct, chunk.fire_rates)
                logger.debug('Step %d: %d samples, loss %.4f', ledger.steps, batch.seen, batch.loss)
                if config.log_steps:
                    epsilon, best_alpha = to_eps_delta(ledger, config.delta)
                    writer.write(
                        MetricsRow(
                            epoch + 1, ledger.steps, batch.loss, batch.accuracy, math.nan, epsilon, best_alpha,
                            clock() - started,
                        )
                    )

            rate_coded = config.encoding is Encoding.RATE
            test_accuracy = evaluate(
                params,
                test_set,
                spec,
                executor=executor,
                encoding=config.encoding,
                rng=streams.evaluation(epoch) if rate_coded else None,
            )
            epsilon, best_alpha = to_eps_delta(ledger, config.delta)
            row = MetricsRow(
                epoch + 1, ledger.steps, stats.loss, stats.accuracy, test_accuracy, epsilon, best_alpha,
                clock() - started,
            )
            writer.write(row)
            result.rows.append(row)
            rates = ' '.join(f'{name}={rate:.3f}' for name, rate in stats.fire_rates().items())
            logger.info(
                'Epoch %d/%d: loss %.4f, train %.4f, test %.4f, epsilon %.4f (alpha %g); fire rates %s',
                epoch + 1, config.epochs, stats.loss, stats.accuracy, test_accuracy, epsilon, best_alpha, rates,
            )
            checkpoint_save(
                out_dir / CHECKPOINT_FILE, spec, params, opt_state, ledger, epoch=epoch + 1,
                extra={'seed': config.seed},
            )
            if result.halted:
                break

    result.params, result.ledger = params, ledger
    result.epsilon, result.best_alpha = to_eps_delta(ledger, config.delta)
    logger.info('Finished after %d steps: epsilon %.4f at delta %g', ledger.steps, result.epsilon, config.delta)
    return result


@dataclass(frozen=True, slots=True)
class RunSummary:
    seed: int
    test_accuracy: float
    epsilon: float


def _summary_rows(summaries: Sequence[RunSummary]) -> Iterator[list[str]]:
    yield ['seed', 'test_accuracy', 'epsilon']
    for summary in summaries:
        yield [str(summary.seed), f'{summary.test_accuracy:.6f}', f'{summary.epsilon:.6f}']
    accuracies = np.array([summary.test_accuracy for summary in summaries])
    epsilons = np.array([summary.epsilon for summary in summaries])
    ddof = 1 if len(summaries) > 1 else 0
    yield ['mean', f'{accuracies.mean():.6f}', f'{epsilons.mean():.6f}']
    yield ['variance', f'{accuracies.var(ddof=ddof):.6f}', f'{epsilons.var(ddof=ddof):.6f}']


def train_runs(
    config: RunConfig,
    runs: int,
    *,
    clock: Callable[[], float] = time.perf_counter,
    train_set: LabeledImageSet | None = None,
    test_set: LabeledImageSet | None = None,
) -> list[TrainResult]:
    """Train seeds ``1..runs`` into ``out_dir/seed<k>`` and write the mean and variance of the final results.

    Raises
    ------
    StructuralError
        If `runs` is not positive.
    """
    if runs < 1:
        msg = f'runs must be at least 1, got {runs}'
        raise StructuralError(msg)
    if train_set is None or test_set is None:
        loaded_train, loaded_test = _load_splits(config)
        train_set = loaded_train if train_set is None else train_set
        test_set = loaded_test if test_set is None else test_set
    results: list[TrainResult] = []
    for seed in range(1, runs + 1):
        run_config = replace(config, seed=seed, out_dir=config.out_dir / f'seed{seed}')
        results.append(train(run_config, clock=clock, train_set=train_set, test_set=test_set))

    summaries = [RunSummary(seed, result.test_accuracy, result.epsilon) for seed, result in enumerate(results, 1)]
    config.out_dir.mkdir(parents=True, exist_ok=True)
    with (config.out_dir / SUMMARY_FILE).open('w', newline='') as stream:
        csv.writer(stream).writerows(_summary_rows(summaries))
    accuracies = [summary.test_accuracy for summary in summaries]
    logger.info('%d runs: mean test accuracy %.4f', runs, float(np.mean(accuracies)))
    return results


def load_for_eval(path: str | Path) -> tuple[NetworkSpec, ParameterSet, dict[str, Any]]:
    """Network, parameters and header extras of a checkpoint written by `train`."""
    checkpoint = checkpoint_load(path)
    return checkpoint.spec, checkpoint.params, {'epoch': checkpoint.epoch, **checkpoint.extra}

