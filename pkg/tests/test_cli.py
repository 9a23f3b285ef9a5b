from pathlib import Path

import pytest

from dpsnn._cli import build_parser, main
from dpsnn._config import NUM_WORKERS_ENV


def test_accountant_epsilon(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(['accountant', '--sigma', '1.0', '--q', '1.0', '--steps', '1']) == 0

    out = capsys.readouterr().out.strip()
    assert out == 'epsilon=5.298774 alpha=5.75 steps=1'


def test_accountant_epochs(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(['accountant', '--sigma', '1.1', '--q', '0.01', '--epochs', '3']) == 0

    assert capsys.readouterr().out.strip().endswith('steps=300')


def test_accountant_calibration(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(['accountant', '--target-epsilon', '2.0', '--q', '0.01', '--steps', '500']) == 0

    fields = dict(item.split('=') for item in capsys.readouterr().out.split())
    assert float(fields['epsilon']) <= 2.0
    assert float(fields['sigma']) > 0.3


def test_accountant_failure_exit_status() -> None:
    assert main(['accountant', '--target-epsilon', '1e-6', '--q', '1.0', '--steps', '10']) == 1


@pytest.mark.parametrize(
    'argv',
    [
        ['--sigma', '1.0', '--q', '0', '--epochs', '2'],
        ['--sigma', '1.0', '--q', '1.5', '--epochs', '2'],
        ['--sigma', '1.0', '--q', '-0.1', '--steps', '5'],
        ['--sigma', '1.0', '--q', '0.01', '--steps', '5', '--delta', '0'],
        ['--target-epsilon', '2.0', '--q', '0.01', '--steps', '500', '--delta', '1'],
    ],
)
def test_accountant_rejects_out_of_range_rates(argv: list[str], caplog: pytest.LogCaptureFixture) -> None:
    assert main(['accountant', *argv]) == 1
    assert 'must lie in' in caplog.text


@pytest.mark.parametrize(
    'argv',
    [
        [],
        ['train'],
        ['train', '--sigma', '1', '--target-epsilon', '2'],
        ['train', '--sigma', '1', '--pooling', 'median'],
        ['accountant', '--sigma', '1', '--q', '0.1'],
        ['eval'],
    ],
)
def test_parser_errors(argv: list[str]) -> None:
    with pytest.raises(SystemExit):
        build_parser().parse_args(argv)


def test_train_defaults() -> None:
    args = build_parser().parse_args(['train', '--sigma', '0.8'])

    assert args.net == 'mnist_small'
    assert args.pooling == 'tep'
    assert args.batch_size == 256
    assert args.lr == 0.005
    assert args.clip == 2.0
    assert args.delta == 1e-5
    assert args.target_epsilon is None
    assert args.runs == 1


@pytest.mark.slow
def test_train_then_eval(tmp_path: Path, capsys: pytest.CaptureFixture[str], monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(NUM_WORKERS_ENV, raising=False)
    out = tmp_path / 'run'
    argv = ['train', '--sigma', '1.0', '--epochs', '1', '--batch-size', '50', '--time-steps', '2']
    argv += ['--train-size', '100', '--test-size', '20', '--out', str(out)]

    assert main(argv) == 0
    assert capsys.readouterr().out.startswith('test_accuracy=')

    assert main(['eval', '--checkpoint', str(out / 'checkpoint.dpsn'), '--test-size', '20']) == 0
    assert 'mnist_small epoch 1: test_accuracy=' in capsys.readouterr().out


def test_eval_missing_checkpoint(tmp_path: Path) -> None:
    assert main(['eval', '--checkpoint', str(tmp_path / 'nothing.dpsn')]) == 1
