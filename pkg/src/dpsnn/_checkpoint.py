"""Self-describing binary checkpoints.

Layout, all integers little-endian::

    b"DPSN" | u16 version | u32 header length | JSON header | 32-byte parameter ordering hash
    u64 P | P x f32 parameters | P x f32 first moments | P x f32 second moments
    5 x f64 AdamW hyper-parameters (lr, beta1, beta2, eps, weight decay) | u64 optimizer step
    u32 K | K x f64 RDP orders | K x f64 accumulated RDP | u64 composed steps | f64 sampling rate | f64 noise scale
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from ._accountant import PrivacyLedger
from ._dp_optimizer import AdamWConfig, OptimizerState
from ._exceptions import CheckpointFormatError
from ._network import NETWORKS, NetworkSpec, ParameterSet, Pool, build_network, ordering_hash

if TYPE_CHECKING:
    from numpy.typing import NDArray

logger = logging.getLogger(__name__)

MAGIC = b'DPSN'
FORMAT_VERSION = 1
_FLOAT32 = np.dtype('<f4')
_FLOAT64 = np.dtype('<f8')


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to resume a run at an epoch boundary."""

    spec: NetworkSpec
    params: ParameterSet
    opt_state: OptimizerState
    ledger: PrivacyLedger
    epoch: int = 0
    extra: dict[str, Any] = field(default_factory=dict)


def _network_header(spec: NetworkSpec) -> dict[str, Any]:
    pools = [layer.method.value for layer in spec.layers if isinstance(layer, Pool)]
    return {
        'name': spec.name,
        'pooling': pools[0] if pools else None,
        'neuron': spec.neuron.kind.value,
        'leak_rate': spec.neuron.leak_rate,
        'threshold': spec.neuron.threshold,
        'time_steps': spec.time_steps,
    }


def checkpoint_save(
    path: str | Path,
    spec: NetworkSpec,
    params: ParameterSet,
    opt_state: OptimizerState,
    ledger: PrivacyLedger,
    *,
    epoch: int = 0,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Write a checkpoint to `path`, replacing any existing file atomically.

    Parameters are stored as 32-bit floats regardless of the compute dtype. `extra` must be JSON-serializable.
    """
    path = Path(path)
    header = json.dumps(
        {'epoch': epoch, 'extra': extra or {}, 'network': _network_header(spec)},
        sort_keys=True,
        separators=(',', ':'),
    ).encode()
    flat = params.flatten()
    opt = opt_state.config
    orders = np.asarray(ledger.orders, dtype=_FLOAT64)

    chunks = [
        MAGIC,
        struct.pack('<HI', FORMAT_VERSION, len(header)),
        header,
        ordering_hash(spec),
        struct.pack('<Q', flat.size),
        flat.astype(_FLOAT32).tobytes(),
        opt_state.exp_avg.astype(_FLOAT32).tobytes(),
        opt_state.exp_avg_sq.astype(_FLOAT32).tobytes(),
        struct.pack('<5dQ', opt.lr, *opt.betas, opt.eps, opt.weight_decay, opt_state.step),
        struct.pack('<I', orders.size),
        orders.tobytes(),
        ledger.rdp_eps.astype(_FLOAT64).tobytes(),
        struct.pack('<Qdd', ledger.steps, ledger.sampling_rate, ledger.noise_scale),
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f'.{path.name}.tmp')
    tmp.write_bytes(b''.join(chunks))
    os.replace(tmp, path)
    logger.debug('Saved checkpoint for epoch %d to %s', epoch, path)
    return path


class _Reader:
    __slots__ = ('_buffer', '_offset', '_path')

    def __init__(self, buffer: bytes, path: Path) -> None:
        self._buffer = buffer
        self._offset = 0
        self._path = path

    def take(self, size: int, what: str) -> bytes:
        end = self._offset + size
        if end > len(self._buffer):
            msg = f'{self._path}: truncated checkpoint while reading {what}'
            raise CheckpointFormatError(msg)
        chunk = self._buffer[self._offset : end]
        self._offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, count: int, dtype: np.dtype[Any], what: str) -> NDArray[Any]:
        return np.frombuffer(self.take(count * dtype.itemsize, what), dtype=dtype).astype(dtype.newbyteorder('='))

    def finish(self) -> None:
        if self._offset != len(self._buffer):
            msg = f'{self._path}: {len(self._buffer) - self._offset} trailing bytes after the ledger'
            raise CheckpointFormatError(msg)


def _rebuild_spec(network: dict[str, Any], path: Path) -> NetworkSpec:
    if network.get('name') not in NETWORKS:
        msg = f'{path}: network {network.get("name")!r} cannot be rebuilt from the header; pass its spec explicitly'
        raise CheckpointFormatError(msg)
    return build_network(
        network['name'],
        pooling=network['pooling'],
        neuron=network['neuron'],
        time_steps=network['time_steps'],
        leak_rate=network['leak_rate'],
        threshold=network['threshold'],
    )


def _check_network_header(written: dict[str, Any], spec: NetworkSpec, path: Path) -> None:
    expected = _network_header(spec)
    mismatched = [
        f'{key} {written.get(key)!r} != {value!r}' for key, value in expected.items() if written.get(key) != value
    ]
    if mismatched:
        msg = f'{path}: checkpoint network does not match {spec.name!r} ({", ".join(mismatched)})'
        raise CheckpointFormatError(msg)


def checkpoint_load(path: str | Path, spec: NetworkSpec | None = None, dtype: Any = np.float32) -> Checkpoint:
    """Read a checkpoint written by `checkpoint_save`.

    Parameters
    ----------
    path : str | Path
        Checkpoint file.
    spec : NetworkSpec | None, optional
        Network the parameters belong to. When omitted, a registered network is rebuilt from the header.
    dtype : Any, optional
        Compute dtype of the returned parameters and moments.

    Raises
    ------
    CheckpointFormatError
        On a bad magic number, an unsupported version, a parameter ordering or network header (pooling, neuron,
        time steps) that does not match `spec`, a truncated file or a ledger inconsistent with its own noise scale and
        sampling rate.
    """
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if (magic := reader.take(len(MAGIC), 'magic')) != MAGIC:
        msg = f'{path}: not a checkpoint (magic {magic!r}, expected {MAGIC!r})'
        raise CheckpointFormatError(msg)
    version, header_len = reader.unpack('<HI', 'version')
    if version != FORMAT_VERSION:
        msg = f'{path}: unsupported checkpoint version {version} (this build reads version {FORMAT_VERSION})'
        raise CheckpointFormatError(msg)
    try:
        header = json.loads(reader.take(header_len, 'header'))
    except ValueError as e:
        msg = f'{path}: unreadable header: {e}'
        raise CheckpointFormatError(msg) from e

    explicit = spec is not None
    spec = spec or _rebuild_spec(header['network'], path)
    stored_hash = reader.take(32, 'ordering hash')
    if stored_hash != ordering_hash(spec):
        msg = f'{path}: parameter ordering hash does not match network {spec.name!r}; refusing to load'
        raise CheckpointFormatError(msg)
    if explicit:
        # pooling and neuron settings carry no parameters, so the hash cannot tell them apart
        _check_network_header(header['network'], spec, path)

    (size,) = reader.unpack('<Q', 'parameter count')
    flat = reader.array(size, _FLOAT32, 'parameters')
    exp_avg = reader.array(size, _FLOAT32, 'first moments')
    exp_avg_sq = reader.array(size, _FLOAT32, 'second moments')
    lr, beta1, beta2, eps, weight_decay, step = reader.unpack('<5dQ', 'optimizer state')
    (n_orders,) = reader.unpack('<I', 'order count')
    orders = reader.array(n_orders, _FLOAT64, 'orders')
    rdp = reader.array(n_orders, _FLOAT64, 'ledger')
    steps, sampling_rate, noise_scale = reader.unpack('<Qdd', 'ledger parameters')
    reader.finish()

    ledger = PrivacyLedger(noise_scale, sampling_rate, tuple(orders.tolist()), steps)
    if not np.allclose(ledger.rdp_eps, rdp, rtol=1e-9, atol=0.0):
        msg = f'{path}: stored ledger disagrees with its noise scale {noise_scale} and sampling rate {sampling_rate}'
        raise CheckpointFormatError(msg)
    opt_state = OptimizerState(
        exp_avg.astype(dtype),
        exp_avg_sq.astype(dtype),
        AdamWConfig(lr, (beta1, beta2), eps, weight_decay),
        step,
    )
    params = ParameterSet.from_flat(spec, flat.astype(dtype))
    return Checkpoint(spec, params, opt_state, ledger, header['epoch'], header['extra'])
