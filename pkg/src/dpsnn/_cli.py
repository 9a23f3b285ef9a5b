from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import TYPE_CHECKING

from ._accountant import calibrate_sigma, epsilon_for
from ._config import RunConfig
from ._data import DATASETS, Encoding, Split, load_dataset
from ._exceptions import DpsnnError, StructuralError
from ._layers import PoolMethod
from ._network import NETWORKS
from ._neuron import NeuronKind
from ._trainer import evaluate, load_for_eval, train, train_runs

if TYPE_CHECKING:
    from collections.abc import Sequence

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)-7s %(name)s: %(message)s'


def _choices(enum_type: type[PoolMethod | NeuronKind | Encoding]) -> list[str]:
    return [member.value for member in enum_type]


def _add_train(subparsers: argparse._SubParsersAction[argparse.ArgumentParser]) -> None:
    parser = subparsers.add_parser('train', help='train a spiking network with DP-SGD')
    parser.add_argument('--dataset', choices=DATASETS, default='synth')
    parser.add_argument('--data-dir', type=Path, default=None, help='directory holding the dataset files')
    parser.add_argument('--train-size', type=int, default=None, help='use only the first N training samples')
    parser.add_argument('--test-size', type=int, default=None, help='use only the first N test samples')
    parser.add_argument('--net', choices=sorted(NETWORKS), default='mnist_small')
    parser.add_argument('--pooling', choices=_choices(PoolMethod), default=PoolMethod.TEP.value)
    parser.add_argument('--neuron', choices=_choices(NeuronKind), default=NeuronKind.LIF.value)
    parser.add_argument('--time-steps', type=int, default=10)
    parser.add_argument('--leak-rate', type=float, default=0.5)
    parser.add_argument('--threshold', type=float, default=0.5)
    parser.add_argument('--encoding', choices=_choices(Encoding), default=Encoding.DIRECT.value)
    parser.add_argument('--epochs', type=int, default=10)
    parser.add_argument('--batch-size', type=int, default=256)
    parser.add_argument('--lr', type=float, default=0.005)
    parser.add_argument('--weight-decay', type=float, default=0.01)
    parser.add_argument('--clip', type=float, default=2.0, help='per-sample l2 bound R; "inf" disables clipping')
    privacy = parser.add_mutually_exclusive_group(required=True)
    privacy.add_argument('--sigma', type=float, default=None, help='noise multiplier')
    privacy.add_argument('--target-epsilon', type=float, default=None, help='calibrate sigma to this epsilon')
    parser.add_argument('--delta', type=float, default=1e-5)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--poisson-sampling', action='store_true')
    parser.add_argument('--secure-rng', action='store_true', help='draw gradient noise from OS entropy')
    parser.add_argument('--out', type=Path, default=Path('runs'))
    parser.add_argument('--workers', type=int, default=1, help='overridden by DPSNN_NUM_WORKERS')
    parser.add_argument('--chunk-size', type=int, default=32, help='samples per worker task')
    parser.add_argument('--log-steps', action='store_true', help='also write one metrics row per step')
    parser.add_argument('--resume', type=Path, default=None, help='checkpoint to continue from')
    parser.add_argument('--runs', type=int, default=1, help='train seeds 1..N and summarize them')
    parser.set_defaults(handler=_run_train)


def _add_eval(subparsers: argparse._SubParsersAction[argparse.ArgumentParser]) -> None:
    parser = subparsers.add_parser('eval', help='report the test accuracy of a checkpoint')
    parser.add_argument('--checkpoint', type=Path, required=True)
    parser.add_argument('--dataset', choices=DATASETS, default='synth')
    parser.add_argument('--data-dir', type=Path, default=None)
    parser.add_argument('--test-size', type=int, default=None)
    parser.set_defaults(handler=_run_eval)


def _add_accountant(subparsers: argparse._SubParsersAction[argparse.ArgumentParser]) -> None:
    parser = subparsers.add_parser('accountant', help='epsilon for a noise level, or sigma for an epsilon target')
    mode = parser.add_mutually_exclusive_group(required=True)
    mode.add_argument('--sigma', type=float, default=None)
    mode.add_argument('--target-epsilon', type=float, default=None)
    parser.add_argument('--q', type=float, required=True, help='sampling rate B / N')
    length = parser.add_mutually_exclusive_group(required=True)
    length.add_argument('--steps', type=int, default=None)
    length.add_argument('--epochs', type=int, default=None, help='ceil(1 / q) steps per epoch')
    parser.add_argument('--delta', type=float, default=1e-5)
    parser.set_defaults(handler=_run_accountant)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dpsnn', description='Differentially private spiking neural networks.')
    parser.add_argument('-v', '--verbose', action='store_true', help='log every optimizer step')
    subparsers = parser.add_subparsers(dest='command', required=True)
    _add_train(subparsers)
    _add_eval(subparsers)
    _add_accountant(subparsers)
    return parser


def _run_train(args: argparse.Namespace) -> int:
    config = RunConfig.from_args(args)
    if args.runs > 1:
        results = train_runs(config, args.runs)
        for seed, result in enumerate(results, 1):
            print(f'seed {seed}: test_accuracy={result.test_accuracy:.4f} epsilon={result.epsilon:.4f}')
        return 0
    result = train(config)
    print(f'test_accuracy={result.test_accuracy:.4f} epsilon={result.epsilon:.4f} delta={config.delta:g}')
    return 0


def _run_eval(args: argparse.Namespace) -> int:
    spec, params, extra = load_for_eval(args.checkpoint)
    test_set = load_dataset(args.dataset, args.data_dir, Split.TEST).take(args.test_size)
    score = evaluate(params, test_set, spec)
    print(f'{spec.name} epoch {extra["epoch"]}: test_accuracy={score:.4f} on {len(test_set)} samples')
    return 0


def _run_accountant(args: argparse.Namespace) -> int:
    if not 0.0 < args.q <= 1.0:
        msg = f'Sampling rate q must lie in (0, 1], got {args.q!r}'
        raise StructuralError(msg)
    steps = args.steps if args.steps is not None else args.epochs * math.ceil(1.0 / args.q)
    if args.target_epsilon is not None:
        sigma = calibrate_sigma(args.target_epsilon, args.delta, args.q, steps)
        epsilon, alpha = epsilon_for(sigma, args.q, steps, args.delta)
        print(f'sigma={sigma:.6f} epsilon={epsilon:.6f} alpha={alpha:g} steps={steps}')
        return 0
    epsilon, alpha = epsilon_for(args.sigma, args.q, steps, args.delta)
    print(f'epsilon={epsilon:.6f} alpha={alpha:g} steps={steps}')
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point of the ``dpsnn`` command; returns the process exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT, stream=sys.stderr)
    try:
        return args.handler(args)
    except (DpsnnError, FileNotFoundError) as e:
        logger.error('%s: %s', type(e).__name__, e)
        return 1
