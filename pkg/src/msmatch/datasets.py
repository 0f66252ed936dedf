"""Datasets, stratified splits and per-channel normalization.

Pixel arrays are kept in source units (0-255 for 8-bit RGB, native integer
range for raster bands). Augmentation operates in those units against the
dataset's declared ``value_range``; normalization is applied afterwards.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

RGB_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".gif"}
RASTER_SUFFIXES = {".tif", ".tiff", ".npy"}
STD_FLOOR = 1e-6

# EuroSAT class sizes (27 000 images); used for split-arithmetic fixtures.
EUROSAT_CLASS_COUNTS = {
    "AnnualCrop": 3000,
    "Forest": 3000,
    "HerbaceousVegetation": 3000,
    "Highway": 2500,
    "Industrial": 2500,
    "Pasture": 2000,
    "PermanentCrop": 2500,
    "Residential": 3000,
    "River": 2500,
    "SeaLake": 3000,
}


class DatasetError(ValueError):
    """Raised for malformed dataset trees, bad split requests and similar."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # [C, H, W]
    label: int
    id: str
    value_range: tuple[float, float] = (0.0, 255.0)

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise DatasetError(f"sample {self.id}: expected [C, H, W], got shape {self.pixels.shape}")
        c, h, w = self.pixels.shape
        if c < 1 or h < 8 or w < 8:
            raise DatasetError(f"sample {self.id}: shape {self.pixels.shape} below minimum 1x8x8")
        if not np.all(np.isfinite(self.pixels)):
            raise DatasetError(f"sample {self.id}: non-finite pixels")
        if self.label < 0:
            raise DatasetError(f"sample {self.id}: negative label")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def replace(self, pixels: np.ndarray) -> "ImageSample":
        return ImageSample(pixels, self.label, self.id, self.value_range)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """An immutable, ordered collection of equally shaped samples.

    Pixels are held as one stacked ``[N, C, H, W]`` array; indexing yields
    :class:`ImageSample` views.
    """

    pixels: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...]
    class_names: tuple[str, ...]
    value_range: tuple[float, float] = (0.0, 255.0)
    channel_stats: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "pixels", _readonly(self.pixels))
        object.__setattr__(self, "labels", _readonly(np.asarray(self.labels, dtype=np.int64)))
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "value_range", (float(self.value_range[0]), float(self.value_range[1])))
        if self.pixels.ndim != 4:
            raise DatasetError(f"expected pixels [N, C, H, W], got {self.pixels.shape}")
        n = self.pixels.shape[0]
        if len(self.labels) != n or len(self.ids) != n:
            raise DatasetError("pixels, labels and ids must have equal length")
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError("class names must be distinct")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label outside [0, K)")
        if len(set(self.ids)) != n:
            raise DatasetError("sample ids must be unique")
        lo, hi = self.value_range
        if not hi > lo:
            raise DatasetError(f"invalid value range {self.value_range}")
        if self.channel_stats is not None:
            mean, std = (np.asarray(a, dtype=np.float64) for a in self.channel_stats)
            if mean.shape != (self.channels,) or std.shape != (self.channels,):
                raise DatasetError("channel_stats must have one entry per channel")
            if np.any(std <= 0):
                raise DatasetError("channel std must be positive")
            object.__setattr__(self, "channel_stats", (_readonly(mean), _readonly(std)))

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def __getitem__(self, i: int) -> ImageSample:
        return ImageSample(self.pixels[i], int(self.labels[i]), self.ids[i], self.value_range)

    def __iter__(self) -> Iterator[ImageSample]:
        return (self[i] for i in range(len(self)))

    @property
    def channels(self) -> int:
        return self.pixels.shape[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {name: int(c) for name, c in zip(self.class_names, counts)}

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.pixels[idx],
            self.labels[idx],
            [self.ids[i] for i in idx],
            self.class_names,
            self.value_range,
            self.channel_stats,
        )

    def with_stats(self, mean, std) -> "LabeledDataset":
        return LabeledDataset(self.pixels, self.labels, self.ids, self.class_names, self.value_range, (mean, std))

    def content_hash(self) -> str:
        """sha256 over ids, labels, class names, shape, dtype and pixel bytes."""
        h = hashlib.sha256()
        h.update(json.dumps([self.class_names, list(self.pixels.shape), str(self.pixels.dtype)]).encode())
        h.update("\n".join(self.ids).encode())
        h.update(self.labels.tobytes())
        h.update(self.pixels.tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class SplitPartition:
    train_labeled: LabeledDataset
    train_unlabeled: LabeledDataset  # labels kept for diagnostics only
    test: LabeledDataset
    seed: int
    source_hash: str = field(default="")

    def __post_init__(self):
        sets = [set(p.ids) for p in (self.train_labeled, self.train_unlabeled, self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DatasetError("partition members overlap")

    def manifest(self, stats: tuple[np.ndarray, np.ndarray] | None = None) -> dict:
        if stats is None:
            stats = self.train_labeled.channel_stats
        out = {
            "dataset_hash": self.source_hash,
            "seed": self.seed,
            "class_names": list(self.test.class_names),
            "value_range": list(self.test.value_range),
            "train_labeled": list(self.train_labeled.ids),
            "train_unlabeled": list(self.train_unlabeled.ids),
            "test": list(self.test.ids),
            "channel_stats": None,
        }
        if stats is not None:
            out["channel_stats"] = {"mean": [float(v) for v in stats[0]], "std": [float(v) for v in stats[1]],
                                    "computed_on": "full_dataset"}
        return out

    def write_manifest(self, path: str | os.PathLike, stats=None) -> None:
        Path(path).write_text(json.dumps(self.manifest(stats), indent=1))


# --------------------------------------------------------------------------
# loading


def _class_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not dirs:
        raise DatasetError(f"no class directories under {root}")
    return dirs


def _read_rgb(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def _band_last(shape) -> bool:
    a, b, c = shape
    if a == b != c:
        return True
    if b == c:
        return False
    return c < a


def _read_raster(path: Path) -> np.ndarray:
    try:
        if path.suffix.lower() == ".npy":
            arr = np.load(path)
        else:
            import tifffile

            arr = tifffile.imread(path)
    except Exception as exc:
        raise DatasetError(f"cannot decode raster {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3 and _band_last(arr.shape):
        # (H, W, C) as written by most GeoTIFF tools
        arr = arr.transpose(2, 0, 1)
    if arr.ndim != 3:
        raise DatasetError(f"raster {path} has unsupported shape {arr.shape}")
    return arr


def _resize(arr: np.ndarray, side: int) -> np.ndarray:
    from PIL import Image

    if arr.shape[1:] == (side, side):
        return arr
    out = np.empty((arr.shape[0], side, side), dtype=np.float32)
    for c in range(arr.shape[0]):
        im = Image.fromarray(arr[c].astype(np.float32), mode="F")
        out[c] = np.asarray(im.resize((side, side), Image.BILINEAR))
    if np.issubdtype(arr.dtype, np.integer):
        info = np.iinfo(arr.dtype)
        out = np.clip(np.rint(out), info.min, info.max).astype(arr.dtype)
    return out


def load_folder_dataset(root, format: str = "rgb_image", resize_to: int | None = None,
                        workers: int | None = None) -> LabeledDataset:
    """Load a directory-per-class image tree.

    Class indices follow the lexicographic order of subdirectory names.
    ``format`` is ``"rgb_image"`` (8-bit colour images) or
    ``"multiband_raster"`` (GeoTIFF / ``.npy`` band stacks). Files are decoded
    in a thread pool; output order equals a sequential walk.
    """
    if format not in ("rgb_image", "multiband_raster"):
        raise DatasetError(f"unknown format {format!r}")
    root = Path(root)
    suffixes = RGB_SUFFIXES if format == "rgb_image" else RASTER_SUFFIXES
    reader = _read_rgb if format == "rgb_image" else _read_raster

    files: list[tuple[Path, int]] = []
    class_names = []
    for k, d in enumerate(_class_dirs(root)):
        members = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in suffixes)
        if not members:
            raise DatasetError(f"class directory {d} is empty")
        class_names.append(d.name)
        files.extend((p, k) for p in members)

    def decode(path: Path) -> np.ndarray:
        arr = reader(path)
        return _resize(arr, resize_to) if resize_to else arr

    with ThreadPoolExecutor(max_workers=workers) as pool:
        arrays = list(pool.map(decode, [p for p, _ in files]))

    first = arrays[0]
    for (path, _), arr in zip(files, arrays):
        if arr.shape[0] != first.shape[0]:
            raise DatasetError(f"{path} has {arr.shape[0]} bands, expected {first.shape[0]} (from {files[0][0]})")
        if arr.shape != first.shape:
            raise DatasetError(f"{path} has shape {arr.shape}, expected {first.shape}")
    pixels = np.stack(arrays)

    if format == "rgb_image":
        value_range = (0.0, 255.0)
    elif np.issubdtype(pixels.dtype, np.integer):
        # native integer range actually used by the sensor data
        value_range = (float(min(pixels.min(), 0)), float(pixels.max()))
    else:
        value_range = (float(pixels.min()), float(pixels.max()))
    if value_range[1] <= value_range[0]:
        value_range = (value_range[0], value_range[0] + 1.0)

    ids = [f"{path.parent.name}/{path.name}" for path, _ in files]
    labels = [k for _, k in files]
    logger.info("loaded %d samples, %d classes, shape %s from %s", len(ids), len(class_names), first.shape, root)
    return LabeledDataset(pixels, labels, ids, class_names, value_range)


# --------------------------------------------------------------------------
# synthetic stand-in

# Generator difficulty knobs, calibrated so a linear probe on raw pixels stays
# below 100% while a small CNN trained on plenty of labels reaches >= 95%, and
# a handful of labels per class leaves a clear gap for unlabeled data to close.
SYN = dict(
    scale=(0.3, 0.42),        # shape radius, fraction of side
    center_jitter=0.12,       # fraction of side
    rot_jitter=15.0,          # degrees
    fg_amp=(80.0, 120.0),
    bg_level=(120.0, 140.0),
    bg_texture=8.0,           # amplitude of a random low-frequency grating
    gain_jitter=0.1,          # per-sample per-channel multiplicative
    noise_std=6.0,
    softness=0.6,             # edge width in pixels
)

_SQRT_HALF = np.sqrt(0.5)


def _shape_sdf(kind: int, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Signed distance (unit-radius shape coordinates) of primitive ``kind % 8``;
    kinds >= 8 reuse the primitives with thinner strokes."""
    t = 0.2 if kind < 8 else 0.12
    k = kind % 8
    if k == 5:  # X: the plus turned by 45 degrees
        px, py = (px + py) * _SQRT_HALF, (py - px) * _SQRT_HALF
        k = 1
    r = np.hypot(px, py)
    box = np.maximum(np.abs(px), np.abs(py))
    if k == 0:  # ring
        return np.abs(r - 0.8) - t
    if k == 1:  # plus
        return np.minimum(np.maximum(np.abs(px) - 1, np.abs(py) - t), np.maximum(np.abs(py) - 1, np.abs(px) - t))
    if k == 2:  # square outline
        return np.abs(box - 0.75) - t
    if k == 3:  # two parallel bars
        return np.maximum(np.abs(px) - 0.95, np.abs(np.abs(py) - 0.5) - t)
    if k == 4:  # filled disk
        return r - 0.7
    if k == 6:  # filled square
        return box - 0.6
    # triangle, pointing up
    return np.maximum(-py - 0.5, np.abs(px) * 0.894 + py * 0.447 - 0.45)


def make_synthetic(n_classes: int, channels: int, side: int, per_class: int, seed: int) -> LabeledDataset:
    """Deterministic shape-classification dataset in 8-bit units.

    Class ``k`` is a geometric primitive (ring, plus, square outline, bars,
    disk, X, filled square, triangle; thinner strokes beyond eight classes)
    drawn over a textured background. Position, size, rotation, contrast,
    background level, per-channel gains and noise vary per sample, so the
    class is carried by shape alone and is invariant to horizontal flips.
    """
    for name, v in dict(n_classes=n_classes, channels=channels, side=side, per_class=per_class).items():
        if v < 1:
            raise DatasetError(f"{name} must be >= 1")
    spatial_seq, chan_seq, noise_seq = np.random.SeedSequence(seed).spawn(3)
    srng = np.random.default_rng(spatial_seq)
    # channel-dependent draws use their own streams so spatial content is the
    # same for any channel count
    crng = np.random.default_rng(chan_seq)

    n = n_classes * per_class
    labels = np.repeat(np.arange(n_classes), per_class)
    scale = srng.uniform(*SYN["scale"], n) * side
    cx = side / 2 + srng.uniform(-1, 1, n) * SYN["center_jitter"] * side
    cy = side / 2 + srng.uniform(-1, 1, n) * SYN["center_jitter"] * side
    rot = np.deg2rad(srng.uniform(-1, 1, n) * SYN["rot_jitter"])
    amp = srng.uniform(*SYN["fg_amp"], n)
    t_angle = srng.uniform(0, np.pi, n)
    t_freq = srng.uniform(0.5, 2.0, n)
    t_phase = srng.uniform(0, 2 * np.pi, n)

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    dx = xx[None] - cx[:, None, None]
    dy = yy[None] - cy[:, None, None]
    c, s = np.cos(rot)[:, None, None], np.sin(rot)[:, None, None]
    px = (c * dx + s * dy) / scale[:, None, None]
    py = (-s * dx + c * dy) / scale[:, None, None]
    sdf = np.empty((n, side, side))
    for k in range(n_classes):
        sel = labels == k
        sdf[sel] = _shape_sdf(k, px[sel], py[sel])
    alpha = 1 / (1 + np.exp(np.clip(sdf * scale[:, None, None] / SYN["softness"], -50, 50)))
    u = np.cos(t_angle)[:, None, None] * xx + np.sin(t_angle)[:, None, None] * yy
    texture = SYN["bg_texture"] * np.sin(2 * np.pi * t_freq[:, None, None] * u / side + t_phase[:, None, None])

    bg = crng.uniform(*SYN["bg_level"], (n, channels))
    fg_profile = crng.uniform(0.4, 1.0, (n, channels))
    gain = 1 + crng.uniform(-1, 1, (n, channels)) * SYN["gain_jitter"]

    nrng = np.random.default_rng([noise_seq.generate_state(1)[0], channels])
    pixels = (
        bg[:, :, None, None]
        + gain[:, :, None, None] * (texture[:, None] + (amp[:, None] * fg_profile)[:, :, None, None] * alpha[:, None])
        + nrng.normal(0, SYN["noise_std"], (n, channels, side, side))
    )
    pixels = np.clip(pixels, 0, 255).astype(np.float32)
    ids = [f"syn-{k}-{i:05d}" for i, k in enumerate(labels)]
    names = [f"class_{k:02d}" for k in range(n_classes)]
    return LabeledDataset(pixels, labels, ids, names, (0.0, 255.0))


def make_count_fixture(class_counts: dict[str, int], channels: int = 1, side: int = 8) -> LabeledDataset:
    """Zero-pixel dataset with given per-class sizes, for split arithmetic."""
    names = sorted(class_counts)
    labels = np.concatenate([np.full(class_counts[c], k) for k, c in enumerate(names)])
    ids = [f"{names[k]}/{i:06d}" for i, k in enumerate(labels)]
    pixels = np.zeros((len(labels), channels, side, side), dtype=np.uint8)
    pixels = np.broadcast_to(pixels[:1], pixels.shape)  # no extra memory
    return LabeledDataset(pixels, labels, ids, names, (0.0, 255.0))


# --------------------------------------------------------------------------
# splits


def _round_half_up(fraction: float, m: int) -> int:
    return int((Decimal(str(fraction)) * m).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def stratified_split(ds: LabeledDataset, test_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Per-class seeded split; class ``c`` with ``m`` samples sends
    ``round_half_up(test_fraction * m)`` samples to the test set."""
    if not 0 < test_fraction < 1:
        raise DatasetError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng([seed, 0x5717])
    train_idx, test_idx = [], []
    for k, name in enumerate(ds.class_names):
        members = np.flatnonzero(ds.labels == k)
        if len(members) < 2:
            raise DatasetError(f"class {name!r} has {len(members)} samples, need >= 2")
        n_test = _round_half_up(test_fraction, len(members))
        if n_test == 0:
            raise DatasetError(f"class {name!r} would receive 0 test samples")
        if n_test == len(members):
            raise DatasetError(f"class {name!r} would receive 0 train samples")
        perm = rng.permutation(members)
        test_idx.append(np.sort(perm[:n_test]))
        train_idx.append(np.sort(perm[n_test:]))
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


def select_labeled_subset(train: LabeledDataset, n_per_class: int, seed: int,
                          test: LabeledDataset | None = None) -> SplitPartition:
    """Draw ``n_per_class`` labeled samples per class; the rest become unlabeled."""
    rng = np.random.default_rng([seed, 0x1AB])
    labeled, unlabeled = [], []
    for k, name in enumerate(train.class_names):
        members = np.flatnonzero(train.labels == k)
        if len(members) < n_per_class:
            raise DatasetError(f"class {name!r} has {len(members)} train samples, need {n_per_class}")
        perm = rng.permutation(members)
        labeled.append(np.sort(perm[:n_per_class]))
        unlabeled.append(np.sort(perm[n_per_class:]))
    if test is None:
        test = train.subset([])
    return SplitPartition(train.subset(np.concatenate(labeled)), train.subset(np.concatenate(unlabeled)), test, seed)


def make_partition(ds: LabeledDataset, test_fraction: float, n_per_class: int, seed: int) -> SplitPartition:
    train, test = stratified_split(ds, test_fraction, seed)
    part = select_labeled_subset(train, n_per_class, seed, test)
    return SplitPartition(part.train_labeled, part.train_unlabeled, part.test, seed, ds.content_hash())


# --------------------------------------------------------------------------
# normalization


def compute_normalization(ds: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std over every pixel; std floored at 1e-6."""
    if len(ds) == 0:
        raise DatasetError("cannot compute statistics of an empty dataset")
    c = ds.channels
    total = np.zeros(c)
    count = 0
    # chunked two-pass so full-size rasters do not need a float64 copy
    for start in range(0, len(ds), 1024):
        chunk = ds.pixels[start:start + 1024].astype(np.float64)
        total += chunk.sum(axis=(0, 2, 3))
        count += chunk.shape[0] * chunk.shape[2] * chunk.shape[3]
    mean = total / count
    sq = np.zeros(c)
    for start in range(0, len(ds), 1024):
        chunk = ds.pixels[start:start + 1024].astype(np.float64)
        sq += ((chunk - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3))
    std = np.maximum(np.sqrt(sq / count), STD_FLOOR)
    return mean, std


def normalize_array(pixels: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    shape = (-1, 1, 1)
    return (pixels - mean.reshape(shape)) / std.reshape(shape)


def normalize(sample: ImageSample, mean, std) -> ImageSample:
    if len(mean) != sample.pixels.shape[0] or len(std) != sample.pixels.shape[0]:
        raise DatasetError("normalization statistics do not match channel count")
    return sample.replace(normalize_array(sample.pixels.astype(np.float64), mean, std))


def denormalize(sample: ImageSample, mean, std) -> ImageSample:
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return sample.replace(sample.pixels * std + mean)
