"""CIFAR-10 binary ingestion, a seeded synthetic shape dataset, and batching."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, ContractError, FormatError

RECORD_BYTES = 3073
CIFAR_SIDE = 32
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W], values in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


@dataclass
class LabeledBatch:
    images: Tensor
    labels: np.ndarray
    indices: np.ndarray


# CIFAR-10 binary ----------------------------------------------------------------------

def parse_cifar_bytes(buf: bytes, num_classes: int = 10, source: str = "<bytes>") -> Dataset:
    if len(buf) % RECORD_BYTES:
        raise FormatError(f"{source}: size {len(buf)} is not a multiple of {RECORD_BYTES}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"{source}: record {int(bad[0])} has label byte {int(labels[bad[0]])} >= {num_classes}")
    images = raw[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes)


def load_cifar_binary(path, num_classes: int = 10) -> Dataset:
    """One batch file, a list of them, or a directory of ``*.bin`` files."""
    paths: list[Path]
    if isinstance(path, (list, tuple)):
        paths = [Path(p) for p in path]
    elif Path(path).is_dir():
        paths = sorted(Path(path).glob("*.bin"))
        if not paths:
            raise FormatError(f"{path}: no .bin files")
    else:
        paths = [Path(path)]
    parts = [parse_cifar_bytes(p.read_bytes(), num_classes, str(p)) for p in paths]
    return Dataset(np.concatenate([d.images for d in parts]), np.concatenate([d.labels for d in parts]), num_classes)


def to_cifar_bytes(ds: Dataset) -> bytes:
    if ds.images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise FormatError(f"CIFAR records need 3x32x32 images, got {ds.images.shape[1:]}")
    if ds.labels.size and (ds.labels.min() < 0 or ds.labels.max() > 255):
        raise FormatError("labels must fit in one byte")
    pix = np.rint(ds.images * 255.0)
    if np.any(np.abs(pix - ds.images * 255.0) > 1e-6) or pix.min() < 0 or pix.max() > 255:
        raise FormatError("pixel values are not exact multiples of 1/255 in [0, 1]")
    out = np.empty((len(ds), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = ds.labels
    out[:, 1:] = pix.reshape(len(ds), -1).astype(np.uint8)
    return out.tobytes()


def write_cifar_binary(ds: Dataset, path) -> None:
    Path(path).write_bytes(to_cifar_bytes(ds))


# synthetic shapes ------------------------------------------------------------------------

def _template(family: int, variant: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if family == 0:  # bars
        period = int(rng.integers(4, 7))
        phase = int(rng.integers(0, period))
        coord = (yy, xx, yy + xx)[variant % 3]
        return (((coord + phase) % period) < period / 2).astype(np.float64)
    if family == 1:  # disks (filled, then rings)
        r = rng.uniform(size / 6, size / 3)
        cy, cx = rng.uniform(r, size - r, size=2)
        d = np.hypot(yy - cy, xx - cx)
        if variant % 2:
            return ((d <= r) & (d >= r * 0.55)).astype(np.float64)
        return (d <= r).astype(np.float64)
    q = int(rng.integers(2, 4)) + variant  # checkers
    oy, ox = rng.integers(0, 2 * q, size=2)
    return ((((yy + oy) // q) + ((xx + ox) // q)) % 2).astype(np.float64)


def synth_generate(num_classes: int = 3, samples: int = 3000, image_size: int = 12, seed: int = 0,
                   noise: float = 0.15, contrast: tuple[float, float] = (0.05, 0.3)) -> Dataset:
    """Class-conditional shape images: class c draws family c % 3 (bars, disks,
    checkers) in variant c // 3, with random placement, colors and contrast,
    plus Gaussian pixel noise.  Pixels are quantized to multiples of 1/255."""
    rng = np.random.default_rng(seed)
    labels = np.arange(samples) % num_classes
    rng.shuffle(labels)
    images = np.empty((samples, 3, image_size, image_size))
    for n, c in enumerate(labels):
        mask = _template(int(c) % 3, int(c) // 3, image_size, rng)
        bg = rng.uniform(0.2, 0.6, size=3)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        fg = np.clip(bg + sign * rng.uniform(*contrast, size=3), 0.0, 1.0)
        img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
        if noise:
            img = img + rng.normal(0.0, noise, size=img.shape)
        images[n] = img
    images = np.rint(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    return Dataset(images, labels.astype(np.int64), num_classes)


# batching -----------------------------------------------------------------------------------

def augment_images(images: np.ndarray, rng: np.random.Generator, pad: int = 4,
                   flip: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-pad, random crop back to size, random horizontal flip (p=0.5).
    Returns (images, crop offsets [N,2], flip flags [N])."""
    n, c, h, w = images.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out, offsets, flips


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def batch_iter(ds: Dataset, batch_size: int, epoch_seed: int, augment: bool = False,
               shuffle: bool = True) -> Iterator[LabeledBatch]:
    """Seeded shuffle, optional pad-4 crop + flip drawn from the same
    generator; the last short batch is emitted."""
    if batch_size < 1 or batch_size > len(ds):
        raise ContractError(f"batch size {batch_size} must be in [1, {len(ds)}]")
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(len(ds)) if shuffle else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        imgs = ds.images[idx]
        if augment:
            imgs = augment_images(imgs, rng)[0]
        yield LabeledBatch(Tensor(imgs), ds.labels[idx], idx)


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (images - m) / s


def epoch_seed(shuffle_seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([shuffle_seed, epoch]).generate_state(1)[0])


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # "synthetic" or a CIFAR-10 binary path
    num_classes: int = 3
    train_size: int = 2400
    val_size: int = 600
    image_size: int = 12
    noise: float = 0.15
    contrast: tuple[float, float] = (0.05, 0.3)
    data_seed: int = 0
    augment: bool = False
    mean: tuple[float, float, float] = CIFAR10_MEAN
    std: tuple[float, float, float] = CIFAR10_STD
    shuffle_seed: int = 0
    val_source: str | None = None  # CIFAR only: separate evaluation file

    def __post_init__(self):
        self.contrast = tuple(self.contrast)
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)
        if self.train_size < 1 or self.val_size < 1:
            raise ConfigError("split sizes must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"], d["std"], d["contrast"] = list(self.mean), list(self.std), list(self.contrast)
        return d


def load_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    if spec.source == "synthetic":
        ds = synth_generate(spec.num_classes, spec.train_size + spec.val_size, spec.image_size,
                            spec.data_seed, spec.noise, spec.contrast)
        return ds.split(spec.train_size)
    if not Path(spec.source).exists():
        raise ConfigError(f"dataset path {spec.source} does not exist")
    ds = load_cifar_binary(spec.source, spec.num_classes)
    if spec.val_source:
        val = load_cifar_binary(spec.val_source, spec.num_classes)
        train = ds.subset(np.arange(min(spec.train_size, len(ds))))
        return train, val.subset(np.arange(min(spec.val_size, len(val))))
    n_train = min(spec.train_size, len(ds) - 1)
    train, rest = ds.split(n_train)
    return train, rest.subset(np.arange(min(spec.val_size, len(rest))))
