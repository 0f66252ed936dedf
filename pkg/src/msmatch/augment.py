"""Weak and strong augmentation for images with any number of channels.

All ops work in source pixel units relative to a declared value range
``(lo, hi)``: intensity thresholds (Solarize, Posterize, Equalize) are defined
on an 8-bit view of that range, geometric ops fill exposed areas with ``lo``,
and every output is clamped to ``[lo, hi]``.

Ops are vectorized over a leading batch axis with one magnitude per sample, so
``apply_op_batch(x[None], op, [m])[0]`` and ``apply_op(sample, op, m)`` run
the same arithmetic.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .datasets import ImageSample

WEAK_TRANSLATE = 0.125
DEFAULT_OPS_PER_IMAGE = 3


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentOp:
    name: str
    param_range: tuple[float, float] | None  # None for parameter-free ops
    ms_compatible: bool
    geometric: bool = False

    def check(self, magnitude) -> None:
        if self.param_range is None:
            return
        lo, hi = self.param_range
        m = np.asarray(magnitude, dtype=np.float64)
        if np.any(m < lo) or np.any(m > hi) or not np.all(np.isfinite(m)):
            raise AugmentError(f"{self.name} magnitude {magnitude} outside [{lo}, {hi}]")


OPS: dict[str, AugmentOp] = {
    op.name: op
    for op in [
        AugmentOp("AutoContrast", None, False),
        AugmentOp("Brightness", (0.05, 0.95), False),
        AugmentOp("Color", (0.05, 0.95), False),
        AugmentOp("Contrast", (0.05, 0.95), True),
        AugmentOp("Equalize", None, True),
        AugmentOp("Posterize", (4, 8), True),
        AugmentOp("Rotate", (-30, 30), True, geometric=True),
        AugmentOp("Sharpness", (0.05, 0.95), True),
        AugmentOp("ShearX", (-0.3, 0.3), True, geometric=True),
        AugmentOp("ShearY", (-0.3, 0.3), True, geometric=True),
        AugmentOp("Solarize", (0, 256), True),
        AugmentOp("TranslateX", (-0.3, 0.3), True, geometric=True),
        AugmentOp("TranslateY", (-0.3, 0.3), True, geometric=True),
    ]
}


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str  # "weak" | "strong_rgb" | "strong_ms"
    ops_per_image: int = DEFAULT_OPS_PER_IMAGE

    def __post_init__(self):
        if self.kind not in ("weak", "strong_rgb", "strong_ms"):
            raise AugmentError(f"unknown policy kind {self.kind!r}")
        if self.kind != "weak" and not 1 <= self.ops_per_image <= len(self.eligible):
            raise AugmentError(f"ops_per_image must be in [1, {len(self.eligible)}]")

    @property
    def eligible(self) -> tuple[AugmentOp, ...]:
        if self.kind == "strong_ms":
            return tuple(op for op in OPS.values() if op.ms_compatible)
        if self.kind == "strong_rgb":
            return tuple(OPS.values())
        return ()

    def describe(self) -> dict:
        if self.kind == "weak":
            return {"kind": "weak", "hflip_p": 0.5, "max_translate": WEAK_TRANSLATE, "fill": "range_min"}
        return {
            "kind": self.kind,
            "ops_per_image": self.ops_per_image,
            "sampling": "uniform_without_replacement",
            "magnitudes": "uniform_in_range",
            "intensity_reference": "8bit_view_of_declared_range",
            "ops": {op.name: (list(op.param_range) if op.param_range else None) for op in self.eligible},
        }


def policy_for_channels(channels: int, ops_per_image: int = DEFAULT_OPS_PER_IMAGE) -> AugmentPolicy:
    return AugmentPolicy("strong_rgb" if channels == 3 else "strong_ms", ops_per_image)


def sample_rng(seed: int, sample_id: str, step: int, stream: int = 0) -> np.random.Generator:
    """Generator for one sample at one step: a pure function of its arguments."""
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), step, stream])


# --------------------------------------------------------------------------
# batched op kernels: x is float [N, C, H, W], m is float [N]


def _col(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.asarray(m, dtype=x.dtype).reshape(-1, 1, 1, 1)


def _to8(x, lo, hi):
    return (x - lo) * (255.0 / (hi - lo))


def _blend(x, degraded, m):
    w = _col(m, x)
    return w * x + (1 - w) * degraded


def _autocontrast(x, m, lo, hi):
    cmin = x.min(axis=(2, 3), keepdims=True)
    cmax = x.max(axis=(2, 3), keepdims=True)
    span = cmax - cmin
    flat = span <= 0
    scale = np.where(flat, 1.0, (hi - lo) / np.where(flat, 1.0, span)).astype(x.dtype)
    out = lo + (x - cmin) * scale
    return np.where(flat, x, out)


def _brightness(x, m, lo, hi):
    return lo + _col(m, x) * (x - lo)


def _color(x, m, lo, hi):
    return _blend(x, x.mean(axis=1, keepdims=True), m)


def _contrast(x, m, lo, hi):
    return _blend(x, x.mean(axis=(2, 3), keepdims=True), m)


def _equalize(x, m, lo, hi):
    n, c, h, w = x.shape
    bins = np.clip(np.floor((x - lo) * (256.0 / (hi - lo))), 0, 255).astype(np.int64)
    offsets = (np.arange(n * c) * 256).reshape(n, c, 1, 1)
    hist = np.bincount((bins + offsets).ravel(), minlength=n * c * 256).reshape(n, c, 256)
    nonzero = hist > 0
    last = 255 - np.argmax(nonzero[:, :, ::-1], axis=2)
    last_count = np.take_along_axis(hist, last[..., None], axis=2)[..., 0]
    step = (h * w - last_count) // 255
    keep = (step == 0) | (nonzero.sum(axis=2) <= 1)
    safe = np.where(keep, 1, step)
    cum = np.cumsum(hist, axis=2) - hist  # exclusive prefix sum
    lut = np.minimum((cum + (safe // 2)[..., None]) // safe[..., None], 255)
    mapped = np.take_along_axis(lut.reshape(n, c, 256), bins.reshape(n, c, -1), axis=2).reshape(x.shape)
    out = lo + mapped.astype(x.dtype) * ((hi - lo) / 255.0)
    return np.where(keep[..., None, None], x, out)


def _posterize(x, m, lo, hi):
    bits = np.rint(np.asarray(m, dtype=np.float64)).astype(np.int64)
    drop = (2.0 ** (8 - np.clip(bits, 0, 8))).reshape(-1, 1, 1, 1)
    q = np.floor(np.floor(_to8(x, lo, hi)) / drop) * drop
    out = (lo + q * ((hi - lo) / 255.0)).astype(x.dtype)
    # posterize(8) drops no bits
    return np.where((bits >= 8).reshape(-1, 1, 1, 1), x, out)


def _sharpness(x, m, lo, hi):
    smooth = x.copy()
    neigh = (
        x[:, :, :-2, :-2] + x[:, :, :-2, 1:-1] + x[:, :, :-2, 2:]
        + x[:, :, 1:-1, :-2] + x[:, :, 1:-1, 2:]
        + x[:, :, 2:, :-2] + x[:, :, 2:, 1:-1] + x[:, :, 2:, 2:]
    )
    # PIL SMOOTH kernel [[1,1,1],[1,5,1],[1,1,1]]/13; borders keep the original
    smooth[:, :, 1:-1, 1:-1] = (neigh + 5 * x[:, :, 1:-1, 1:-1]) / 13
    return _blend(x, smooth, m)


def _solarize(x, m, lo, hi):
    t = _col(m, x)
    return np.where(_to8(x, lo, hi) >= t, lo + hi - x, x)


def _warp(x, inv: np.ndarray, fill: float) -> np.ndarray:
    """Bilinear resample with per-sample inverse affine maps about the centre.

    ``inv`` is [N, 2, 3] mapping output (x, y, 1) offsets from the centre to
    source offsets. All channels of a sample share one coordinate map.
    """
    n, c, h, w = x.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    ox = (xx - cx).ravel()
    oy = (yy - cy).ravel()
    sx = cx + inv[:, 0, 0, None] * ox + inv[:, 0, 1, None] * oy + inv[:, 0, 2, None]
    sy = cy + inv[:, 1, 0, None] * ox + inv[:, 1, 1, None] * oy + inv[:, 1, 2, None]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = (sx - x0).astype(x.dtype)[:, None]
    wy = (sy - y0).astype(x.dtype)[:, None]
    # pad by one pixel of fill; indices beyond the border clip onto the pad
    padded = np.full((n, c, h + 2, w + 2), fill, dtype=x.dtype)
    padded[:, :, 1:-1, 1:-1] = x
    flat = padded.reshape(n, c, -1)
    ix0 = np.clip(x0.astype(np.int64) + 1, 0, w + 1)
    ix1 = np.clip(x0.astype(np.int64) + 2, 0, w + 1)
    iy0 = np.clip(y0.astype(np.int64) + 1, 0, h + 1)
    iy1 = np.clip(y0.astype(np.int64) + 2, 0, h + 1)

    def gather(iy, ix):
        return np.take_along_axis(flat, (iy * (w + 2) + ix)[:, None, :], axis=2)

    out = (
        gather(iy0, ix0) * ((1 - wx) * (1 - wy))
        + gather(iy0, ix1) * (wx * (1 - wy))
        + gather(iy1, ix0) * ((1 - wx) * wy)
        + gather(iy1, ix1) * (wx * wy)
    )
    return out.reshape(n, c, h, w)


def _affine(n):
    inv = np.zeros((n, 2, 3))
    inv[:, 0, 0] = 1
    inv[:, 1, 1] = 1
    return inv


def _rotate(x, m, lo, hi):
    # positive angle = counter-clockwise on screen (y axis points down)
    theta = np.deg2rad(np.asarray(m, dtype=np.float64))
    cos, sin = np.cos(theta), np.sin(theta)
    inv = _affine(len(theta))
    inv[:, 0, 0], inv[:, 0, 1] = cos, -sin
    inv[:, 1, 0], inv[:, 1, 1] = sin, cos
    return _warp(x, inv, lo)


def _shear_x(x, m, lo, hi):
    inv = _affine(x.shape[0])
    inv[:, 0, 1] = np.asarray(m, dtype=np.float64)
    return _warp(x, inv, lo)


def _shear_y(x, m, lo, hi):
    inv = _affine(x.shape[0])
    inv[:, 1, 0] = np.asarray(m, dtype=np.float64)
    return _warp(x, inv, lo)


def _translate_x(x, m, lo, hi):
    inv = _affine(x.shape[0])
    inv[:, 0, 2] = -np.asarray(m, dtype=np.float64) * x.shape[3]
    return _warp(x, inv, lo)


def _translate_y(x, m, lo, hi):
    inv = _affine(x.shape[0])
    inv[:, 1, 2] = -np.asarray(m, dtype=np.float64) * x.shape[2]
    return _warp(x, inv, lo)


KERNELS: dict[str, Callable] = {
    "AutoContrast": _autocontrast,
    "Brightness": _brightness,
    "Color": _color,
    "Contrast": _contrast,
    "Equalize": _equalize,
    "Posterize": _posterize,
    "Rotate": _rotate,
    "Sharpness": _sharpness,
    "ShearX": _shear_x,
    "ShearY": _shear_y,
    "Solarize": _solarize,
    "TranslateX": _translate_x,
    "TranslateY": _translate_y,
}


def _as_op(op) -> AugmentOp:
    if isinstance(op, AugmentOp):
        return op
    try:
        return OPS[op]
    except KeyError:
        raise AugmentError(f"unknown op {op!r}") from None


def apply_op_batch(x: np.ndarray, op, magnitudes, value_range=(0.0, 255.0), check_range: bool = True) -> np.ndarray:
    """Apply one op to a float batch ``[N, C, H, W]`` with per-sample magnitudes.

    ``check_range=False`` admits magnitudes outside the sampling range (for
    example the neutral value 1 of the blend ops); they still must be finite.
    """
    op = _as_op(op)
    if x.ndim != 4:
        raise AugmentError(f"expected [N, C, H, W], got {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    m = np.zeros(x.shape[0]) if magnitudes is None else np.broadcast_to(np.asarray(magnitudes, float), (x.shape[0],))
    if check_range:
        op.check(m if op.param_range else 0)
    elif not np.all(np.isfinite(m)):
        raise AugmentError(f"{op.name} magnitude must be finite")
    lo, hi = value_range
    out = KERNELS[op.name](x, m, lo, hi)
    return np.clip(out, lo, hi).astype(x.dtype, copy=False)


def apply_op(img: ImageSample, op, magnitude=None, check_range: bool = True) -> ImageSample:
    """Apply a single named op to one sample."""
    x = img.pixels
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    out = apply_op_batch(x[None].astype(dtype), op, None if magnitude is None else [magnitude], img.value_range,
                         check_range)
    return img.replace(out[0])


# --------------------------------------------------------------------------
# policies


def _weak_params(rng: np.random.Generator, h: int, w: int) -> tuple[bool, int, int]:
    flip = bool(rng.random() < 0.5)
    mx, my = int(WEAK_TRANSLATE * w), int(WEAK_TRANSLATE * h)
    dx = int(rng.integers(-mx, mx + 1))
    dy = int(rng.integers(-my, my + 1))
    return flip, dx, dy


def _weak_apply(x: np.ndarray, flip: bool, dx: int, dy: int, fill: float) -> np.ndarray:
    """x is [C, H, W]; integer shift with fill at exposed borders."""
    if flip:
        x = x[:, :, ::-1]
    c, h, w = x.shape
    out = np.full_like(x, fill)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = x[:, ys, xs]
    return out


def weak_augment(img: ImageSample, rng: np.random.Generator) -> ImageSample:
    """Horizontal flip with p=0.5 and integer x/y shifts of up to 12.5% of the side."""
    _, h, w = img.shape
    flip, dx, dy = _weak_params(rng, h, w)
    return img.replace(_weak_apply(img.pixels, flip, dx, dy, img.value_range[0]))


def weak_augment_batch(x: np.ndarray, rngs: Sequence[np.random.Generator], value_range=(0.0, 255.0)) -> np.ndarray:
    out = np.empty_like(x)
    h, w = x.shape[2:]
    for i, rng in enumerate(rngs):
        out[i] = _weak_apply(x[i], *_weak_params(rng, h, w), value_range[0])
    return out


def sample_ops(policy: AugmentPolicy, rng) -> list[tuple[AugmentOp, float | None]]:
    """Draw distinct ops uniformly and a uniform magnitude for each, in draw order."""
    eligible = policy.eligible
    if not eligible:
        raise AugmentError(f"policy {policy.kind!r} has no strong ops")
    picks = rng.choice(len(eligible), size=policy.ops_per_image, replace=False)
    chosen = []
    for i in picks:
        op = eligible[int(i)]
        mag = None if op.param_range is None else float(rng.uniform(*op.param_range))
        chosen.append((op, mag))
    return chosen


def _check_policy(policy: AugmentPolicy, channels: int) -> None:
    if policy.kind == "weak":
        raise AugmentError("strong_augment needs a strong policy")
    if policy.kind == "strong_rgb" and channels != 3:
        raise AugmentError(f"strong_rgb requires 3 channels, got {channels}")


def strong_augment(img: ImageSample, policy: AugmentPolicy, rng) -> ImageSample:
    _check_policy(policy, img.shape[0])
    dtype = img.pixels.dtype if np.issubdtype(img.pixels.dtype, np.floating) else np.float64
    x = img.pixels[None].astype(dtype)
    for op, mag in sample_ops(policy, rng):
        x = apply_op_batch(x, op, None if mag is None else [mag], img.value_range)
    return img.replace(x[0])


def strong_augment_batch(x: np.ndarray, policy: AugmentPolicy, rngs: Sequence, value_range=(0.0, 255.0)) -> np.ndarray:
    """Strong-augment a batch; equivalent to per-sample :func:`strong_augment`.

    Samples are grouped by the op drawn at each position so every op runs
    once per round over all samples that chose it.
    """
    _check_policy(policy, x.shape[1])
    draws = [sample_ops(policy, rng) for rng in rngs]
    out = x.astype(np.float32) if not np.issubdtype(x.dtype, np.floating) else x.copy()
    for r in range(policy.ops_per_image):
        by_op: dict[str, list[int]] = {}
        for i, d in enumerate(draws):
            by_op.setdefault(d[r][0].name, []).append(i)
        for name, idx in by_op.items():
            mags = None if OPS[name].param_range is None else [draws[i][r][1] for i in idx]
            out[idx] = apply_op_batch(out[idx], name, mags, value_range)
    return out
