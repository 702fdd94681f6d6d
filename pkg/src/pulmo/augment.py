"""Rotation/translation augmentation and minority-class balancing."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, Sample
from .errors import UsageError
from .imageio import to_unit
from .synth import SplitMix64, derive_seed


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    degrees: float = 0.0
    dx_frac: float = 0.0
    dy_frac: float = 0.0
    fill: float = 0.0

    def __post_init__(self):
        if self.kind not in ("rotate", "translate"):
            raise UsageError(f"unknown transform kind {self.kind!r}")
        if abs(self.degrees) > 45 or abs(self.dx_frac) > 0.5 or abs(self.dy_frac) > 0.5:
            raise UsageError(f"transform outside sanity bounds: {self}")

    @property
    def name(self) -> str:
        if self.kind == "rotate":
            return f"rotate({self.degrees:+g})"
        return f"translate({self.dx_frac:+g},{self.dy_frac:+g})"

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.kind == "rotate":
            return rotate(image, self.degrees, self.fill)
        return translate(image, self.dx_frac, self.dy_frac, self.fill)


STOCK_TRANSFORMS: tuple[TransformSpec, ...] = (
    *(TransformSpec("rotate", degrees=d) for d in (5, -5, 10, -10)),
    *(TransformSpec("translate", dx_frac=f) for f in (0.10, -0.10)),
    *(TransformSpec("translate", dy_frac=f) for f in (0.10, -0.10)),
    *(TransformSpec("translate", dx_frac=f) for f in (0.15, -0.15)),
    *(TransformSpec("translate", dy_frac=f) for f in (0.15, -0.15)),
)


def _snap(v: np.ndarray) -> np.ndarray:
    # remove trig round-off so right-angle rotations land exactly on pixel centres
    r = np.round(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


def rotate(image: np.ndarray, degrees: float, fill: float = 0.0) -> np.ndarray:
    """Rotate about the image centre, positive angles counter-clockwise as displayed.

    Bilinear sampling; each of the four taps that falls outside the image
    contributes ``fill`` instead.
    """
    src = to_unit(image)
    h, w = src.shape
    if degrees == 0:
        return src.copy()
    t = math.radians(degrees)
    cos, sin = math.cos(t), math.sin(t)
    rc, cc = (h - 1) / 2, (w - 1) / 2
    rr, ccs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = ccs - cc, -(rr - rc)
    sx = cos * dx + sin * dy
    sy = -sin * dx + cos * dy
    sr, sc = _snap(rc - sy), _snap(cc + sx)

    r0, c0 = np.floor(sr).astype(np.int64), np.floor(sc).astype(np.int64)
    fr, fc = sr - r0, sc - c0
    out = np.zeros((h, w))
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            r, c = r0 + dr, c0 + dc
            inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            vals = np.where(inside, src[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)], fill)
            out += wr * wc * vals
    return out.astype(np.float32)


def _round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def translate(image: np.ndarray, dx_frac: float, dy_frac: float, fill: float = 0.0) -> np.ndarray:
    """Shift right by round(dx_frac*W) columns and down by round(dy_frac*H) rows."""
    src = to_unit(image)
    h, w = src.shape
    dx, dy = _round_half_away(dx_frac * w), _round_half_away(dy_frac * h)
    out = np.full((h, w), fill, dtype=np.float32)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = src[
        max(-dy, 0) : h + min(-dy, 0), max(-dx, 0) : w + min(-dx, 0)
    ]
    return out


def apply_to_sample(sample: Sample, spec: TransformSpec, suffix: str = "") -> Sample:
    mask = sample.mask
    if mask is not None:
        mask = replace(spec, fill=0.0).apply(mask.astype(np.float32)) >= 0.5
    return replace(
        sample,
        id=f"{sample.id}#{spec.name}{suffix}",
        image=spec.apply(sample.image),
        mask=mask,
        augmented=True,
        transform=spec.name,
    )


def draw_transforms(sample_id: str, copies: int, seed: int) -> list[TransformSpec]:
    """Seeded draw of ``copies`` distinct stock transforms for one sample id."""
    if not 1 <= copies <= len(STOCK_TRANSFORMS):
        raise UsageError(f"copies_per_image must lie in [1, {len(STOCK_TRANSFORMS)}], got {copies}")
    rng = SplitMix64(derive_seed(seed, zlib.crc32(sample_id.encode())))
    pool = list(range(len(STOCK_TRANSFORMS)))
    for i in range(copies):
        j = rng.integer(i, len(pool) - 1)
        pool[i], pool[j] = pool[j], pool[i]
    return [STOCK_TRANSFORMS[k] for k in pool[:copies]]


def balance_augment(dataset: Dataset, minority_label: int, copies_per_image: int = 4, seed: int = 0) -> Dataset:
    """Originals plus ``copies_per_image`` augmented variants of every minority sample.

    Only pass training partitions here; augmented samples carry ``augmented=True``.
    """
    if copies_per_image < 1 or copies_per_image > len(STOCK_TRANSFORMS):
        raise UsageError(f"copies_per_image must lie in [1, {len(STOCK_TRANSFORMS)}], got {copies_per_image}")
    out = list(dataset.samples)
    for s in dataset:
        if s.label == minority_label and not s.augmented:
            out.extend(apply_to_sample(s, t) for t in draw_transforms(s.id, copies_per_image, seed))
    return Dataset(out, dataset.layout)
