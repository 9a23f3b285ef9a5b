"""Dataset ingestion, input encoding and batching."""

from __future__ import annotations

import enum
import gzip
import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, TypeAlias

import numpy as np

from ._exceptions import IdxFormatError, StructuralError

if TYPE_CHECKING:
    from collections.abc import Iterator, Sequence

    from numpy.typing import ArrayLike, NDArray

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
NUM_CLASSES = 10
PIXEL_SCALE = 255.0


@dataclass(frozen=True, slots=True)
class LabeledImageSet:
    """Images of shape ``(N, C, H, W)`` scaled to ``[0, 1]`` and their integer class labels."""

    images: NDArray[Any]
    labels: NDArray[np.int64]

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            msg = f'Images must have shape (N, C, H, W), got {self.images.shape}'
            raise StructuralError(msg)
        if self.labels.shape != (self.images.shape[0],):
            msg = f'{self.images.shape[0]} images but labels of shape {self.labels.shape}'
            raise StructuralError(msg)
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            msg = 'Pixel values must lie in [0, 1]'
            raise StructuralError(msg)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            msg = f'Labels must lie in [0, {NUM_CLASSES - 1}]'
            raise StructuralError(msg)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]  # type: ignore[return-value]

    def subset(self, indices: ArrayLike) -> LabeledImageSet:
        index = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[index], self.labels[index])

    def take(self, count: int | None) -> LabeledImageSet:
        """The first `count` samples, or the whole set when `count` is ``None`` or too large."""
        if count is None or count >= len(self):
            return self
        return LabeledImageSet(self.images[:count], self.labels[:count])


# ------------------------------------------------------- IDX files ----------------------------------------------------
def _read(path: Path) -> tuple[bytes, bool]:
    """File contents, inflated for `.gz` files, and whether the whole stream was present.

    A cut-off gzip file yields the bytes that could be inflated, so callers can report the first field that is missing;
    a corrupt one raises `zlib.error`.
    """
    raw = path.read_bytes()
    if path.suffix != '.gz':
        return raw, True
    inflater = zlib.decompressobj(wbits=zlib.MAX_WBITS | 16)
    return inflater.decompress(raw), inflater.eof


def _write(path: Path, data: bytes) -> None:
    if path.suffix == '.gz':
        # no file name and a fixed timestamp in the gzip header, so identical sets give identical files
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


def _read_idx(path: Path, magic: int, kind: str) -> tuple[tuple[int, ...], bytes]:
    try:
        raw, complete = _read(path)
    except zlib.error as e:
        raise IdxFormatError(path, 'data', f'corrupt gzip stream: {e}') from e
    if len(raw) < 4:
        raise IdxFormatError(path, 'magic', 'file shorter than the 4-byte magic number')
    (found,) = struct.unpack('>I', raw[:4])
    if found != magic:
        raise IdxFormatError(path, 'magic', f'expected {kind} magic 0x{magic:08X}, found 0x{found:08X}')
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(path, 'dimensions', f'truncated header: need {header} bytes, found {len(raw)}')
    dims = struct.unpack(f'>{ndim}I', raw[4:header])
    payload = raw[header:]
    expected = math.prod(dims)
    if len(payload) < expected:
        raise IdxFormatError(path, 'data', f'truncated file: need {expected} data bytes, found {len(payload)}')
    if not complete:
        raise IdxFormatError(path, 'data', 'compressed stream ends before its end-of-stream marker')
    return dims, payload[:expected]


def load_idx(images_path: str | Path, labels_path: str | Path) -> LabeledImageSet:
    """Parse an IDX image file and its IDX label file.

    Pixels are scaled by ``1 / 255`` into a ``(N, 1, H, W)`` float32 tensor. Files ending in ``.gz`` are read
    through gzip.

    Raises
    ------
    IdxFormatError
        On a wrong magic number, a truncated file, mismatched counts or out-of-range labels; ``field`` names the
        offending field.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    (count, rows, cols), pixels = _read_idx(images_path, IMAGE_MAGIC, 'image')
    (label_count,), label_bytes = _read_idx(labels_path, LABEL_MAGIC, 'label')
    if label_count != count:
        raise IdxFormatError(labels_path, 'count', f'{label_count} labels for {count} images in {images_path}')

    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, 1, rows, cols).astype(np.float32) / PIXEL_SCALE
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= NUM_CLASSES:
        raise IdxFormatError(labels_path, 'labels', f'label {labels.max()} outside [0, {NUM_CLASSES - 1}]')
    logger.debug('Loaded %d images of %dx%d from %s', count, rows, cols, images_path)
    return LabeledImageSet(images, labels)


def write_idx(dataset: LabeledImageSet, images_path: str | Path, labels_path: str | Path) -> None:
    """Write a single-channel set back to IDX files; inverse of `load_idx` for pixels on the ``1 / 255`` grid."""
    n_samples, channels, rows, cols = dataset.images.shape
    if channels != 1:
        msg = f'IDX image files hold one channel, got {channels}'
        raise StructuralError(msg)
    pixels = np.rint(dataset.images * PIXEL_SCALE).astype(np.uint8)
    _write(Path(images_path), struct.pack('>IIII', IMAGE_MAGIC, n_samples, rows, cols) + pixels.tobytes())
    _write(Path(labels_path), struct.pack('>II', LABEL_MAGIC, n_samples) + dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------- CIFAR-10 binary -------------------------------------------------
CIFAR_SHAPE = (3, 32, 32)
CIFAR_RECORD = 1 + math.prod(CIFAR_SHAPE)


def load_cifar10_binary(paths: Sequence[str | Path]) -> LabeledImageSet:
    """Read CIFAR-10 binary batches: one label byte followed by 3072 channel-major pixel bytes per record."""
    images: list[NDArray[Any]] = []
    labels: list[NDArray[Any]] = []
    for path in map(Path, paths):
        try:
            raw, complete = _read(path)
        except zlib.error as e:
            msg = f'{path}: corrupt gzip stream: {e}'
            raise StructuralError(msg) from e
        if not complete:
            msg = f'{path}: compressed stream ends before its end-of-stream marker'
            raise StructuralError(msg)
        if len(raw) % CIFAR_RECORD:
            msg = f'{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record'
            raise StructuralError(msg)
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / PIXEL_SCALE)
    if not images:
        msg = 'No CIFAR-10 batch files given'
        raise StructuralError(msg)
    return LabeledImageSet(np.concatenate(images), np.concatenate(labels))


# -------------------------------------------------------- Encoding ----------------------------------------------------
class Encoding(enum.Enum):
    DIRECT = 'direct'
    RATE = 'rate'


def _check_time_steps(time_steps: int) -> None:
    if time_steps < 1:
        msg = f'Time window must be at least 1 step, got {time_steps}'
        raise StructuralError(msg)


def encode_direct(image: ArrayLike, time_steps: int) -> NDArray[Any]:
    """Replicate `image` as a constant input current at every time step; the result has shape ``(T, *image.shape)``.

    Passing a batch ``(N, C, H, W)`` yields the ``(T, N, C, H, W)`` layout consumed by the forward pass.
    """
    _check_time_steps(time_steps)
    x = np.asarray(image)
    return np.repeat(x[None], time_steps, axis=0)


def encode_rate(image: ArrayLike, time_steps: int, rng: np.random.Generator) -> NDArray[Any]:
    """Bernoulli rate coding: each pixel spikes at each step with probability equal to its intensity."""
    _check_time_steps(time_steps)
    x = np.asarray(image)
    draws = rng.random((time_steps, *x.shape))
    return (draws < x).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32)


def encode(
    images: ArrayLike,
    time_steps: int,
    encoding: Encoding = Encoding.DIRECT,
    rng: np.random.Generator | None = None,
) -> NDArray[Any]:
    if encoding is Encoding.DIRECT:
        return encode_direct(images, time_steps)
    if rng is None:
        msg = 'Rate encoding needs a random generator'
        raise StructuralError(msg)
    return encode_rate(images, time_steps, rng)


# -------------------------------------------------------- Batching ----------------------------------------------------
@dataclass(frozen=True, slots=True)
class Shuffle:
    """A fresh permutation per epoch, cut into consecutive batches; the last batch may be partial."""


@dataclass(frozen=True, slots=True)
class Poisson:
    """Every sample joins each batch independently with probability `rate`."""

    rate: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            msg = f'Sampling rate must lie in [0, 1], got {self.rate!r}'
            raise StructuralError(msg)


BatchMode: TypeAlias = 'Shuffle | Poisson'


def batches_per_epoch(n_samples: int, batch_size: int) -> int:
    """``ceil(N / B)``: the batch count of a shuffled epoch and the expected count used for Poisson epochs."""
    return math.ceil(n_samples / batch_size)


def make_batches(
    dataset: LabeledImageSet | int,
    batch_size: int,
    mode: BatchMode,
    rng: np.random.Generator,
) -> Iterator[NDArray[np.int64]]:
    """Index batches covering one epoch.

    Parameters
    ----------
    dataset : LabeledImageSet | int
        The set to batch, or just its size.
    batch_size : int
        Batch size ``B``.
    mode : Shuffle | Poisson
        Batching mode. Poisson epochs contain ``ceil(N / B)`` independently drawn batches of variable size.
    rng : np.random.Generator
        Source of the permutation or the inclusion draws.

    Raises
    ------
    StructuralError
        If the dataset is empty, `batch_size` is not positive, or exceeds ``N`` in shuffle mode.
    """
    n_samples = dataset if isinstance(dataset, int) else len(dataset)
    if n_samples == 0:
        msg = 'Cannot batch an empty dataset'
        raise StructuralError(msg)
    if batch_size < 1:
        msg = f'batch_size must be at least 1, got {batch_size}'
        raise StructuralError(msg)
    if isinstance(mode, Shuffle) and batch_size > n_samples:
        msg = f'batch_size {batch_size} exceeds the {n_samples} available samples'
        raise StructuralError(msg)
    return _batches(n_samples, batch_size, mode, rng)


def _batches(n_samples: int, batch_size: int, mode: BatchMode, rng: np.random.Generator) -> Iterator[NDArray[np.int64]]:
    if isinstance(mode, Poisson):
        for _ in range(batches_per_epoch(n_samples, batch_size)):
            yield np.flatnonzero(rng.random(n_samples) < mode.rate).astype(np.int64)
        return
    order = rng.permutation(n_samples).astype(np.int64)
    for start in range(0, n_samples, batch_size):
        yield order[start : start + batch_size]


# ------------------------------------------------------ Synthetic data ------------------------------------------------
SYNTH_SIZE = 28


def synth_patterns(size: int = SYNTH_SIZE) -> NDArray[np.float32]:
    """Ten noiseless class templates: bars through the centre at 18 degree steps, shape ``(10, 1, size, size)``."""
    centre = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) - centre
    patterns = np.empty((NUM_CLASSES, 1, size, size), dtype=np.float32)
    for label in range(NUM_CLASSES):
        angle = math.pi * label / NUM_CLASSES
        # distance of every pixel to the line through the centre at `angle`
        distance = np.abs(rows * math.cos(angle) - cols * math.sin(angle))
        bar = np.clip(2.0 - distance, 0.0, 1.0)
        patterns[label, 0] = np.rint(bar * PIXEL_SCALE) / PIXEL_SCALE
    return patterns


def synth_dataset(n_per_class: int, seed: int, *, noise: float = 0.15, size: int = SYNTH_SIZE) -> LabeledImageSet:
    """Deterministic ten-class corpus of noisy oriented bars.

    Labels cycle ``0, 1, ..., 9, 0, 1, ...`` so every prefix of ``10 k`` samples is balanced. Pixels are quantized to
    the ``1 / 255`` grid, so the set survives an IDX round trip unchanged.
    """
    if n_per_class < 1:
        msg = f'n_per_class must be at least 1, got {n_per_class}'
        raise StructuralError(msg)
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(NUM_CLASSES, dtype=np.int64), n_per_class)
    clean = synth_patterns(size)[labels]
    noisy = np.clip(clean + noise * rng.standard_normal(clean.shape), 0.0, 1.0)
    images = (np.rint(noisy * PIXEL_SCALE) / PIXEL_SCALE).astype(np.float32)
    return LabeledImageSet(images, labels)


# ------------------------------------------------------ Named datasets ------------------------------------------------
class Split(enum.Enum):
    TRAIN = 'train'
    TEST = 'test'


_IDX_FILES = {
    Split.TRAIN: ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    Split.TEST: ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}
_CIFAR_FILES = {
    Split.TRAIN: tuple(f'data_batch_{index}.bin' for index in range(1, 6)),
    Split.TEST: ('test_batch.bin',),
}
_SYNTH_SIZES = {Split.TRAIN: (100, 0), Split.TEST: (20, 1)}
DATASETS = ('mnist', 'fashion', 'cifar10', 'synth')


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / f'{name}.gz', data_dir / 'cifar-10-batches-bin' / name):
        if candidate.exists():
            return candidate
    msg = f'Dataset file {name!r} (or {name}.gz) not found under {data_dir}'
    raise FileNotFoundError(msg)


def load_dataset(name: str, data_dir: str | Path | None, split: Split | str) -> LabeledImageSet:
    """Load a named dataset split.

    ``mnist`` and ``fashion`` read the standard IDX file names from `data_dir`, ``cifar10`` reads the binary
    batches, and ``synth`` generates `synth_dataset` (100 samples per class for training, 20 for testing).

    Raises
    ------
    StructuralError
        For an unknown dataset name.
    FileNotFoundError
        If an expected file is missing.
    """
    split = Split(split)
    if name == 'synth':
        n_per_class, seed = _SYNTH_SIZES[split]
        return synth_dataset(n_per_class, seed)
    if name not in DATASETS:
        msg = f'Unknown dataset {name!r}; choose from {DATASETS}'
        raise StructuralError(msg)
    if data_dir is None:
        msg = f'Dataset {name!r} needs a data directory'
        raise StructuralError(msg)
    root = Path(data_dir)
    if name == 'cifar10':
        return load_cifar10_binary([_find(root, file) for file in _CIFAR_FILES[split]])
    images, labels = (_find(root, file) for file in _IDX_FILES[split])
    return load_idx(images, labels)
