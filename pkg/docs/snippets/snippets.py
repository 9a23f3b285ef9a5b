# pyright: reportRedeclaration=none
# ruff: noqa: T201

# --8<-- [start:accountant]
from dpsnn import PrivacyLedger, calibrate_sigma, epsilon_for

# One full-batch Gaussian step with unit noise
epsilon, alpha = epsilon_for(sigma=1.0, q=1.0, steps=1, delta=1e-5)
print(f'{epsilon:.4f} at alpha={alpha}')  # 5.2988 at alpha=5.75

# Noise level for ten epochs of batch 256 over 60k samples at epsilon <= 3
q = 256 / 60_000
sigma = calibrate_sigma(3.0, 1e-5, q, total_steps=10 * 235)

# Ledgers compose one step at a time
ledger = PrivacyLedger(sigma, q).compose(100)
print(ledger.to_eps_delta(1e-5))
# --8<-- [end:accountant]


# --8<-- [start:training]
from dpsnn import RunConfig, train

config = RunConfig(
    target_epsilon=3.0,
    pooling='tep',
    epochs=5,
    batch_size=256,
    out_dir='runs/tep-eps3',
)
result = train(config)
print(result.test_accuracy, result.epsilon)
# --8<-- [end:training]


# --8<-- [start:gradients]
import numpy as np

from dpsnn import ParameterSet, clip_gradients, encode_direct, mnist_small, per_sample_gradients, synth_dataset

spec = mnist_small(pooling='tep', time_steps=10)
params = ParameterSet.initialize(spec, np.random.default_rng(0))
batch = synth_dataset(1, seed=0)

currents = encode_direct(batch.images, spec.time_steps)  # (T, N, C, H, W)
result = per_sample_gradients(currents, batch.labels, spec, params)
clipped = clip_gradients(result.gradients, 2.0)  # one row per sample
# --8<-- [end:gradients]
