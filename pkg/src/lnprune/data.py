"""Datasets: IDX files, a seeded synthetic task, subsampling and augmentation."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    @property
    def size(self):
        return int(self.images.shape[0])

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split)

    def select_classes(self, classes) -> "Dataset":
        """Keep only ``classes``, relabelled ``0..len(classes)-1`` in the given order."""
        classes = list(classes)
        lookup = np.full(self.class_count, -1, dtype=np.int64)
        lookup[classes] = np.arange(len(classes))
        keep = np.flatnonzero(lookup[self.labels] >= 0)
        return Dataset(self.images[keep], lookup[self.labels[keep]], len(classes), self.split)


# ---------------------------------------------------------------------------
# IDX

def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic, ndim_name):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x} ({ndim_name})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    if len(raw) - header > count:
        raise DataError(f"{path}: {len(raw) - header - count} trailing bytes after IDX payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count=None, split="train") -> Dataset:
    """Read an IDX image file (``[N, H, W]`` bytes) and its label file."""
    pixels = _read_idx(images_path, IDX_IMAGES, "images")
    labels = _read_idx(labels_path, IDX_LABELS, "labels").astype(np.int64)
    if pixels.shape[0] != labels.shape[0]:
        raise DataError(f"image/label count mismatch: {pixels.shape[0]} images, {labels.shape[0]} labels")
    if pixels.shape[0] == 0:
        raise DataError("IDX files contain no samples")
    if class_count is None:
        class_count = int(labels.max()) + 1
    images = (pixels.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(np.ascontiguousarray(images), labels, int(class_count), split)


def write_idx(dataset: Dataset, images_path, labels_path):
    """Export a single-channel dataset; pixels are quantised to 8 bits."""
    if dataset.images.shape[1] != 1:
        raise DataError("IDX export supports single-channel images only")
    N, _, H, W = dataset.images.shape
    q = np.clip(np.rint(dataset.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES, N, H, W))
        fh.write(q.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS, N))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def quantize(dataset: Dataset) -> Dataset:
    """Round pixels to the 8-bit grid an IDX round trip would produce."""
    q = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.float32) / np.float32(255.0)
    return Dataset(q.astype(np.float32), dataset.labels, dataset.class_count, dataset.split)


# ---------------------------------------------------------------------------
# synthetic task

@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 8
    size: int = 32
    per_class: tuple = (60, 20, 40)  # train, val, test samples per class
    sigma: float = 0.05
    seed: int = 0
    shift: int = 0  # max random circular shift of the template, in pixels

    def __post_init__(self):
        if self.size < 8:
            raise DataError(f"synthetic images must be at least 8 px, got {self.size}")
        if self.class_count < 2:
            raise DataError(f"need at least two classes, got {self.class_count}")
        if len(self.per_class) != 3 or min(self.per_class) < 1:
            raise DataError("per_class must give three positive counts (train, val, test)")
        if self.sigma < 0 or self.shift < 0:
            raise DataError("sigma and shift must be non-negative")


def class_templates(spec: SynthSpec):
    """One oriented grating (plus a weaker cross grating) per class, values in [0, 1]."""
    rng = np.random.default_rng([spec.seed, 0])
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(np.float64) / spec.size
    templates = []
    for c in range(spec.class_count):
        theta = np.pi * c / spec.class_count
        freq = 2.0 + 2.0 * (c % 3)
        phase = rng.uniform(0, 2 * np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        v = -xx * np.sin(theta) + yy * np.cos(theta)
        pattern = np.sin(2 * np.pi * freq * u + phase) + 0.5 * np.sin(2 * np.pi * (freq + 1) * v)
        templates.append(0.5 + pattern / 3.0)
    return np.stack(templates)


def synth_generate(spec: SynthSpec):
    """Seeded synthetic train/val/test splits.

    Each split draws from its own sub-seed, so regenerating one split never
    disturbs the others.
    """
    templates = class_templates(spec)
    splits = {}
    for s, (name, per_class) in enumerate(zip(SPLITS, spec.per_class), start=1):
        rng = np.random.default_rng([spec.seed, s])
        labels = np.repeat(np.arange(spec.class_count), per_class)
        labels = labels[rng.permutation(labels.size)]
        imgs = templates[labels]
        if spec.shift:
            dy = rng.integers(-spec.shift, spec.shift + 1, size=labels.size)
            dx = rng.integers(-spec.shift, spec.shift + 1, size=labels.size)
            imgs = np.stack([np.roll(im, (a, b), axis=(0, 1)) for im, a, b in zip(imgs, dy, dx)])
        noise = rng.normal(0.0, spec.sigma, size=imgs.shape) if spec.sigma > 0 else 0.0
        imgs = np.clip(imgs + noise, 0.0, 1.0).astype(np.float32)[:, None]
        splits[name] = Dataset(np.ascontiguousarray(imgs), labels.astype(np.int64), spec.class_count, name)
    return splits["train"], splits["val"], splits["test"]


# ---------------------------------------------------------------------------
# sampling and augmentation

def sample_subset(dataset: Dataset, n, seed) -> Dataset:
    """``n`` samples drawn uniformly without replacement, in the sampler's order."""
    if n < 1 or n > dataset.size:
        raise DataError(f"cannot draw {n} samples from a dataset of {dataset.size}")
    rng = np.random.default_rng(seed)
    return dataset.subset(rng.permutation(dataset.size)[:n])


def hflip(images):
    return np.ascontiguousarray(images[..., ::-1])


def center_crop(images, crop):
    H, W = images.shape[2:]
    if crop > H or crop > W:
        raise DataError(f"crop {crop} larger than image {H}x{W}")
    y, x = (H - crop) // 2, (W - crop) // 2
    return np.ascontiguousarray(images[:, :, y:y + crop, x:x + crop])


def augment(images, crop, mirror=True, seed=0, mirror_prob=0.5, return_offsets=False):
    """Random ``crop``x``crop`` window per image plus optional horizontal mirror."""
    N, _, H, W = images.shape
    if crop > H or crop > W or crop < 1:
        raise DataError(f"crop {crop} does not fit image {H}x{W}")
    rng = np.random.default_rng(seed)
    oy = rng.integers(0, H - crop + 1, size=N)
    ox = rng.integers(0, W - crop + 1, size=N)
    flips = rng.random(N) < mirror_prob if mirror else np.zeros(N, dtype=bool)
    out = np.empty((N, images.shape[1], crop, crop), dtype=images.dtype)
    for i in range(N):
        patch = images[i, :, oy[i]:oy[i] + crop, ox[i]:ox[i] + crop]
        out[i] = patch[..., ::-1] if flips[i] else patch
    if return_offsets:
        return out, oy, ox
    return out
