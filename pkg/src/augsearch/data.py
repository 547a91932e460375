"""Datasets: CIFAR-10 binary records, synthetic nuisance data, samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataFormatError
from .fileio import atomic_write_bytes

CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


# ---------------------------------------------------------------------------
# CIFAR-10 binary layout: 1 label byte + C*H*W pixel bytes, channel-planar,
# row-major within each plane.


def parse_records(blob: bytes, shape: Sequence[int] = CIFAR_SHAPE, class_count: int = CIFAR_CLASSES,
                  split: str = "train", source: str = "<bytes>") -> Dataset:
    pixels = math.prod(shape)
    rec = pixels + 1
    if len(blob) == 0:
        raise DataFormatError(f"{source}: empty file")
    if len(blob) % rec:
        raise DataFormatError(f"{source}: size {len(blob)} is not a multiple of the {rec}-byte record")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise DataFormatError(f"{source}: record {bad} has label byte {labels[bad]} > {class_count - 1}")
    images = raw[:, 1:].reshape((-1,) + tuple(shape)).astype(np.float64) / 255.0
    return Dataset(images, labels, class_count, split)


def load_cifar10(path: str | Path, split: str = "train") -> Dataset:
    """Load a CIFAR-10 binary batch file, or every batch of a split from a directory.

    For a directory, ``split="train"`` reads ``data_batch_*.bin`` and
    ``split="test"`` reads ``test_batch.bin``.
    """
    path = Path(path)
    if path.is_dir():
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
        files = sorted(path.glob(pattern))
        if not files:
            raise DataFormatError(f"{path}: no {pattern} files")
    elif path.exists():
        files = [path]
    else:
        raise DataFormatError(f"{path}: no such file or directory")
    parts = [parse_records(f.read_bytes(), split=split, source=str(f)) for f in files]
    return Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        CIFAR_CLASSES,
        split,
    )


def records_bytes(ds: Dataset) -> bytes:
    if ds.class_count > 256:
        raise ConfigError("record layout stores labels in one byte")
    pix = np.rint(np.clip(ds.images, 0, 1) * 255).astype(np.uint8).reshape(len(ds), -1)
    return np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1).tobytes()


def write_cifar10(ds: Dataset, path: str | Path) -> None:
    """Write ``ds`` in the CIFAR-10 record layout (any image shape)."""
    atomic_write_bytes(path, records_bytes(ds))


# ---------------------------------------------------------------------------
# synthetic data

SHAPES = ("hbar", "vbar", "diag", "antidiag", "square", "plus", "disk", "ring", "ell", "tee")
NUISANCES = ("none", "rotation", "brightness", "translation")


@dataclass(frozen=True)
class SynthSpec:
    nuisance: str = "none"
    nuisance_on: str = "val"  # "val" or "both"
    classes: int = 4
    image_size: int = 24
    channels: int = 1
    samples_per_class: int = 250
    val_per_class: int = 250
    seed: int = 0
    noise: float = 0.02
    jitter: float = 0.5  # pixels of random shape offset
    rotation: float = 30.0  # degrees, uniform in [-rotation, rotation]
    brightness: float = 0.5  # factor uniform in [1 - b, 1 + b]
    translation: float = 0.25  # fraction of size, uniform in [-t, t]
    # appearance variation present in every split
    fg: tuple[float, float] = (0.9, 0.9)
    bg: tuple[float, float] = (0.1, 0.1)
    softness: tuple[float, float] = (1.0, 1.0)  # edge width multiplier

    def validate(self) -> None:
        if self.nuisance not in NUISANCES:
            raise ConfigError(f"nuisance must be one of {NUISANCES}")
        if self.nuisance_on not in ("val", "both"):
            raise ConfigError("nuisance_on must be 'val' or 'both'")
        if not 2 <= self.classes <= len(SHAPES):
            raise ConfigError(f"classes must be in [2, {len(SHAPES)}]")
        if self.samples_per_class < 1 or self.val_per_class < 1:
            raise ConfigError("samples per class must be >= 1")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        for name in ("fg", "bg", "softness"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} range must satisfy low <= high")
        if self.softness[0] <= 0:
            raise ConfigError("softness must be > 0")


def _segment_dist(px, py, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0)
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def shape_mask(kind: str, size: int, angle: float = 0.0, shift: tuple[float, float] = (0.0, 0.0),
               scale: float = 1.0, softness: float = 1.0) -> np.ndarray:
    """Anti-aliased ``size x size`` mask of a class shape in unit coordinates.

    ``angle`` rotates the shape counter-clockwise (degrees) about the image
    centre; ``shift`` moves it by ``(dx, dy)`` pixels.
    """
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # inverse-rotate pixel positions into the shape frame, y pointing up
    th = math.radians(angle)
    dx = (xx - c - shift[0]) / (size / 2.0)
    dy = -(yy - c - shift[1]) / (size / 2.0)
    px = math.cos(th) * dx + math.sin(th) * dy
    py = -math.sin(th) * dx + math.cos(th) * dy
    s = 0.7 * scale
    seg = lambda ax, ay, bx, by: _segment_dist(px, py, ax * s, ay * s, bx * s, by * s)
    if kind == "hbar":
        d = seg(-1, 0, 1, 0)
    elif kind == "vbar":
        d = seg(0, -1, 0, 1)
    elif kind == "diag":
        d = seg(-0.8, -0.8, 0.8, 0.8)
    elif kind == "antidiag":
        d = seg(-0.8, 0.8, 0.8, -0.8)
    elif kind == "square":
        r = 0.7 * s
        d = np.abs(np.maximum(np.abs(px), np.abs(py)) - r)
    elif kind == "plus":
        d = np.minimum(seg(-1, 0, 1, 0), seg(0, -1, 0, 1))
    elif kind == "disk":
        d = np.maximum(np.hypot(px, py) - 0.55 * s, 0.0)
    elif kind == "ring":
        d = np.abs(np.hypot(px, py) - 0.75 * s)
    elif kind == "ell":
        d = np.minimum(seg(-0.7, 1, -0.7, -0.8), seg(-0.7, -0.8, 0.9, -0.8))
    elif kind == "tee":
        d = np.minimum(seg(-0.9, 0.8, 0.9, 0.8), seg(0, 0.8, 0, -1))
    else:
        raise ConfigError(f"unknown shape {kind!r}")
    half_width = 0.14
    pixel = 2.0 * softness / size
    return np.clip((half_width - d) / pixel + 0.5, 0.0, 1.0)


def _render(spec: SynthSpec, label: int, rng: np.random.Generator, nuisance: str):
    """Render one sample; returns ``(image, base)`` where ``base`` omits the nuisance."""
    size = spec.image_size
    shift = tuple(rng.uniform(-spec.jitter, spec.jitter, size=2))
    fg = rng.uniform(*spec.fg, size=spec.channels)
    bg = rng.uniform(*spec.bg)
    soft = rng.uniform(*spec.softness)
    noise = rng.normal(0.0, spec.noise, size=(spec.channels, size, size))
    # nuisance draws happen for every sample so the stream does not depend on the split
    angle = rng.uniform(-spec.rotation, spec.rotation)
    factor = rng.uniform(1 - spec.brightness, 1 + spec.brightness)
    offset = tuple(rng.uniform(-spec.translation, spec.translation, size=2) * size)

    def compose(mask):
        img = bg + (fg[:, None, None] - bg) * mask[None]
        return img + noise

    kind = SHAPES[label]
    base = np.clip(compose(shape_mask(kind, size, 0.0, shift, softness=soft)), 0.0, 1.0)
    if nuisance == "rotation":
        img = compose(shape_mask(kind, size, angle, shift, softness=soft))
    elif nuisance == "translation":
        img = compose(shape_mask(kind, size, 0.0, (shift[0] + offset[0], shift[1] + offset[1]), softness=soft))
    elif nuisance == "brightness":
        img = compose(shape_mask(kind, size, 0.0, shift, softness=soft)) * factor
    else:
        img = base
    return np.clip(img, 0.0, 1.0), base


def _make_split(spec: SynthSpec, per_class: int, nuisance: str, rng: np.random.Generator, split: str):
    n = per_class * spec.classes
    images = np.empty((n, spec.channels, spec.image_size, spec.image_size))
    bases = np.empty_like(images)
    labels = np.repeat(np.arange(spec.classes), per_class)
    for i, lab in enumerate(labels):
        images[i], bases[i] = _render(spec, int(lab), rng, nuisance)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], spec.classes, split), bases[order]


def make_synthetic(spec: SynthSpec, return_bases: bool = False):
    """Generate ``(train, val)`` from class shapes with an optional nuisance.

    With ``nuisance_on="val"`` only the validation split carries the
    nuisance; with ``"both"`` the two splits share one distribution.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    train_nuisance = spec.nuisance if spec.nuisance_on == "both" else "none"
    train, train_bases = _make_split(spec, spec.samples_per_class, train_nuisance, rng, "train")
    val, val_bases = _make_split(spec, spec.val_per_class, spec.nuisance, rng, "val")
    if return_bases:
        return train, val, train_bases, val_bases
    return train, val


# ---------------------------------------------------------------------------
# samplers


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Uniform subset of size ``n`` without replacement."""
    if n < 0 or n > len(ds):
        raise ConfigError(f"cannot draw {n} of {len(ds)} records")
    idx = np.random.default_rng(seed).permutation(len(ds))[:n]
    return ds.take(idx)


def split_holdout(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < fraction < 1:
        raise ConfigError("holdout fraction must be in (0, 1)")
    idx = np.random.default_rng(seed).permutation(len(ds))
    k = int(round(len(ds) * fraction))
    train = replace(ds.take(idx[k:]), split="train")
    val = replace(ds.take(idx[:k]), split="val")
    return train, val


def sample_val_batch(ds: Dataset, size: int, rng: np.random.Generator,
                     label: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Uniform batch without replacement, optionally restricted to one class."""
    if size <= 0:
        raise ConfigError("validation batch size must be >= 1")
    pool = np.arange(len(ds)) if label is None else np.flatnonzero(ds.labels == label)
    if size > len(pool):
        raise ConfigError(f"validation batch of {size} exceeds {len(pool)} available records")
    idx = pool[rng.choice(len(pool), size=size, replace=False)]
    return ds.images[idx], ds.labels[idx]


def sample_images(ds: Dataset, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Search images: ``count`` records without replacement (with replacement if ``count > len``)."""
    if count <= 0:
        raise ConfigError("need at least one search image")
    idx = rng.choice(len(ds), size=count, replace=count > len(ds))
    return ds.images[idx], ds.labels[idx]
