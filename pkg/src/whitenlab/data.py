"""Data ingestion: seeded synthetic populations and an IDX-format reader.

All randomness flows through Philox, a 64-bit counter-based generator,
so any stream can be reconstructed from (seed, path) regardless of
execution order or platform. `stream(seed, *path)` is the single entry
point for deriving independent generators.
"""

import gzip
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InputError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def stream(seed: int, *path) -> np.random.Generator:
    """Independent Philox stream for the given seed and derivation path.

    Two calls with the same arguments produce bitwise-identical streams;
    distinct paths give statistically independent ones, which makes
    parallel sweeps schedule-independent.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path) -> int:
    """Deterministic child seed for (seed, path); used to label sweep points."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class Dataset:
    """Feature matrix (d x N, one column per sample) plus optional labels."""

    x: np.ndarray
    labels: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        if self.x.ndim != 2:
            raise InputError(f"dataset features must be 2-D, got shape {self.x.shape}")
        if self.labels is not None and self.labels.shape != (self.x.shape[1],):
            raise InputError("label count does not match the number of samples")

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    @property
    def size(self) -> int:
        return self.x.shape[1]


def gaussian_population(d: int, n: int, seed: int) -> Dataset:
    """n i.i.d. standard-normal points in d dimensions from a Philox stream."""
    if d < 1 or n < 1:
        raise InputError("dimension and size must be >= 1")
    rng = stream(seed, 0)
    return Dataset(x=rng.standard_normal((d, n)), source=f"gaussian(d={d},n={n},seed={seed})")


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise InputError(f"truncated file while reading {what}")
    return buf


def _open_maybe_gzip(path):
    with open(path, "rb") as probe:
        magic = probe.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair into a columns-are-samples dataset.

    Pixels are scaled to [0, 1] as byte/255. Distinct errors for a bad
    magic number, a truncated file, and an image/label count mismatch.
    """
    with _open_maybe_gzip(images_path) as fh:
        magic, n_images, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IMAGES_MAGIC:
            raise InputError(f"bad magic in image file: 0x{magic:08x}")
        raw = _read_exact(fh, n_images * rows * cols, "image data")
    with _open_maybe_gzip(labels_path) as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != LABELS_MAGIC:
            raise InputError(f"bad magic in label file: 0x{magic:08x}")
        raw_labels = _read_exact(fh, n_labels, "label data")
    if n_images != n_labels:
        raise InputError(f"count mismatch: {n_images} images vs {n_labels} labels")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n_images, rows * cols)
    x = pixels.astype(np.float64).T / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return Dataset(x=x, labels=labels, source=str(images_path))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write byte images (N x rows x cols, uint8) and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise InputError("expected N x rows x cols images and N labels")
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(labels.tobytes())


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """n samples drawn without replacement, deterministically for a seed."""
    if not 0 <= n <= ds.size:
        raise InputError(f"cannot subsample {n} of {ds.size}")
    idx = stream(seed, 1).permutation(ds.size)[:n]
    return Dataset(
        x=ds.x[:, idx],
        labels=None if ds.labels is None else ds.labels[idx],
        source=ds.source,
    )


def split(ds: Dataset, n_train: int, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint train/test subsets drawn from one seeded permutation."""
    if n_train + n_test > ds.size:
        raise InputError(f"cannot split {n_train}+{n_test} of {ds.size}")
    order = stream(seed, 4).permutation(ds.size)
    parts = []
    for sel in (order[:n_train], order[n_train : n_train + n_test]):
        parts.append(
            Dataset(
                x=ds.x[:, sel],
                labels=None if ds.labels is None else ds.labels[sel],
                source=ds.source,
            )
        )
    return parts[0], parts[1]


def batch_iter(ds: Dataset, batch_size: int, seed: int):
    """Endless iterator of (X, labels) batches, reshuffled every epoch.

    Epoch e uses the stream (seed, 2, e), so the batch sequence is
    reproducible and independent of how far the iterator is consumed.
    A trailing partial batch is dropped to keep the width constant.
    """
    if not 1 <= batch_size <= ds.size:
        raise InputError(f"batch size {batch_size} out of range for {ds.size} samples")
    epoch = 0
    while True:
        order = stream(seed, 2, epoch).permutation(ds.size)
        for start in range(0, ds.size - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            yield ds.x[:, idx], None if ds.labels is None else ds.labels[idx]
        epoch += 1


DESCRIPTOR_KEYS = ("source", "images", "labels", "train_size", "test_size", "seed")


def load_split(descriptor: dict) -> tuple[Dataset, Dataset]:
    """Train/test datasets from a plain-value descriptor.

    The descriptor has keys `source` ("synthetic" or "idx"), `images` and
    `labels` paths (idx only), `train_size`, `test_size` and `seed`. Being
    plain values, descriptors cross process boundaries cheaply; the loaded
    split is cached per process, and Datasets are immutable by convention.
    """
    unknown = set(descriptor) - set(DESCRIPTOR_KEYS)
    if unknown:
        raise InputError(f"unknown data descriptor keys: {sorted(unknown)}")
    return _cached_split(
        descriptor.get("source", "synthetic"),
        descriptor.get("images"),
        descriptor.get("labels"),
        int(descriptor.get("train_size", 2000)),
        int(descriptor.get("test_size", 1000)),
        int(descriptor.get("seed", 0)),
    )


@lru_cache(maxsize=4)
def _cached_split(source, images, labels, n_train, n_test, seed):
    if source == "synthetic":
        ds = synthetic_digits(n_train + n_test, derive_seed(seed, 42))
    elif source == "idx":
        if not images or not labels:
            raise InputError("data source 'idx' requires 'images' and 'labels' paths")
        ds = read_idx(images, labels)
    else:
        raise InputError(f"unknown data source {source!r}")
    return split(ds, n_train, n_test, derive_seed(seed, 43))


# ---------------------------------------------------------------------------
# synthetic digit images
#
# A deterministic stand-in for handwritten-digit data when no IDX files are
# available: seven-segment glyphs on a 28 x 28 canvas with random shifts,
# stroke intensity and pixel noise. Same shape contract as MNIST
# (d = 784, labels 0..9, pixels in [0, 1]).

_SEGMENTS = {
    "top": (slice(4, 7), slice(9, 20)),
    "top_left": (slice(5, 14), slice(7, 10)),
    "top_right": (slice(5, 14), slice(19, 22)),
    "middle": (slice(13, 16), slice(9, 20)),
    "bottom_left": (slice(15, 24), slice(7, 10)),
    "bottom_right": (slice(15, 24), slice(19, 22)),
    "bottom": (slice(22, 25), slice(9, 20)),
}

_DIGIT_SEGMENTS = {
    0: ("top", "top_left", "top_right", "bottom_left", "bottom_right", "bottom"),
    1: ("top_right", "bottom_right"),
    2: ("top", "top_right", "middle", "bottom_left", "bottom"),
    3: ("top", "top_right", "middle", "bottom_right", "bottom"),
    4: ("top_left", "top_right", "middle", "bottom_right"),
    5: ("top", "top_left", "middle", "bottom_right", "bottom"),
    6: ("top", "top_left", "middle", "bottom_left", "bottom_right", "bottom"),
    7: ("top", "top_right", "bottom_right"),
    8: ("top", "top_left", "top_right", "middle", "bottom_left", "bottom_right", "bottom"),
    9: ("top", "top_left", "top_right", "middle", "bottom_right", "bottom"),
}


def _digit_templates() -> np.ndarray:
    templates = np.zeros((10, 28, 28))
    for digit, segments in _DIGIT_SEGMENTS.items():
        for name in segments:
            templates[digit][_SEGMENTS[name]] = 1.0
    return templates


def synthetic_digits(n: int, seed: int) -> Dataset:
    """n noisy seven-segment digit images as byte-quantized 28 x 28 bitmaps."""
    if n < 1:
        raise InputError("size must be >= 1")
    rng = stream(seed, 3)
    templates = _digit_templates()
    labels = rng.integers(0, 10, size=n)
    shifts = rng.integers(-2, 3, size=(n, 2))
    intensity = rng.uniform(0.6, 1.0, size=n)
    noise = rng.normal(0.0, 0.08, size=(n, 28, 28))
    images = np.empty((n, 28, 28))
    for i in range(n):
        glyph = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(0, 1))
        images[i] = glyph * intensity[i] + noise[i]
    np.clip(images, 0.0, 1.0, out=images)
    pixels = np.round(images * 255.0).astype(np.uint8)
    x = pixels.reshape(n, 784).astype(np.float64).T / 255.0
    return Dataset(x=x, labels=labels.astype(np.int64), source=f"synthetic-digits(seed={seed})")
