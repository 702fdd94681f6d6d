"""Seeded synthetic chest images with exact lung masks.

Two filled ellipses form the lung field. TB samples carry 1-3 Gaussian
lesions inside the lungs. An optional 4x4 bright square in an image corner
(outside the lungs) acts as a label-correlated shortcut.

All randomness comes from SplitMix64 streams keyed by (seed, class, index),
so a sample does not depend on generation order and files are byte-identical
across runs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
CLASSES = ("normal", "tb")
CUE_MODES = ("none", "train_only", "flipped_at_test")
CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right")
CUE_SIZE = 4
CUE_MARGIN = 1


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    state = seed & MASK64
    for k in keys:
        state = mix64((state + (k & MASK64) + GOLDEN) & MASK64)
    return state


class SplitMix64:
    """SplitMix64 generator; array draws advance the state exactly as repeated scalar draws."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            out = _mix64_array(states)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def uniform(self, n: int | None = None):
        """Doubles in [0, 1) from the top 53 bits."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0**-53
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def integer(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller, consuming 2*ceil(n/2) draws."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = 1.0 - u[:m], u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (64, 64)
    n_per_class: int = 100
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_intensity: float = 0.2
    noise_std: float = 0.05
    spurious_cue: str = "none"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "lesion_count_range", tuple(int(v) for v in self.lesion_count_range))
        h, w = self.image_size
        if min(h, w) < 16:
            raise ConfigError("synthetic images must be at least 16x16")
        if self.spurious_cue not in CUE_MODES:
            raise ConfigError(f"spurious_cue must be one of {CUE_MODES}, got {self.spurious_cue!r}")
        if self.spurious_cue != "none" and min(h, w) < 32:
            raise ConfigError("a spurious cue needs images of at least 32x32 to stay clear of the lungs")
        lo, hi = self.lesion_count_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad lesion_count_range {self.lesion_count_range}")
        if self.n_per_class < 0 or self.noise_std < 0:
            raise ConfigError("n_per_class and noise_std must be non-negative")


@dataclass
class SampleParts:
    image: np.ndarray  # float64 in [0, 1] before quantization
    mask: np.ndarray  # bool
    lesion_map: np.ndarray  # intensity added by lesions
    lesion_centers: list[tuple[float, float]]
    cue_corner: str | None
    label: int


def _ellipse(h, w, cy, cx, b, a):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / b) ** 2 + ((xx - cx) / a) ** 2 <= 1.0


def cue_box(corner: str, h: int, w: int) -> tuple[slice, slice]:
    top = corner.startswith("top")
    left = corner.endswith("left")
    rows = slice(CUE_MARGIN, CUE_MARGIN + CUE_SIZE) if top else slice(h - CUE_MARGIN - CUE_SIZE, h - CUE_MARGIN)
    cols = slice(CUE_MARGIN, CUE_MARGIN + CUE_SIZE) if left else slice(w - CUE_MARGIN - CUE_SIZE, w - CUE_MARGIN)
    return rows, cols


def render_sample(config: SynthConfig, cls: str, index: int, lesions: bool = True) -> SampleParts:
    """Float rendering plus ground truth. ``lesions=False`` gives the matched lesion-free twin."""
    if cls not in CLASSES:
        raise ConfigError(f"class must be one of {CLASSES}, got {cls!r}")
    label = CLASSES.index(cls)
    h, w = config.image_size
    base = SplitMix64(derive_seed(config.seed, label, index, 0))

    mask = np.zeros((h, w), bool)
    for side in (0, 1):
        cx = w * (base.uniform_range(0.27, 0.33) if side == 0 else base.uniform_range(0.67, 0.73))
        cy = h * base.uniform_range(0.47, 0.53)
        a = w * base.uniform_range(0.115, 0.15)
        b = h * base.uniform_range(0.23, 0.30)
        mask |= _ellipse(h, w, cy, cx, b, a)

    noise = base.normal(h * w).reshape(h, w) * config.noise_std
    image = np.where(mask, 0.42, 0.12) + noise

    lesion_map = np.zeros((h, w))
    centers: list[tuple[float, float]] = []
    if cls == "tb" and lesions:
        lrng = SplitMix64(derive_seed(config.seed, label, index, 1))
        count = lrng.integer(*config.lesion_count_range)
        ys, xs = np.nonzero(mask)
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(count):
            k = lrng.integer(0, len(ys) - 1)
            cy, cx = float(ys[k]), float(xs[k])
            sigma = lrng.uniform_range(1.5, 3.0) * min(h, w) / 64
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            blob = config.lesion_intensity * np.exp(-d2 / (2 * sigma**2))
            blob[d2 > (2.5 * sigma) ** 2] = 0.0
            lesion_map += blob * mask
            centers.append((cy, cx))
        image = image + lesion_map

    corner = None
    cue_on = (config.spurious_cue == "train_only" and cls == "tb") or (
        config.spurious_cue == "flipped_at_test" and cls == "normal"
    )
    if cue_on:
        crng = SplitMix64(derive_seed(config.seed, label, index, 2))
        corner = CORNERS[crng.integer(0, 3)]
        rows, cols = cue_box(corner, h, w)
        image[rows, cols] = 0.95

    return SampleParts(np.clip(image, 0.0, 1.0), mask, lesion_map, centers, corner, label)


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes, round half up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def gen_sample(config: SynthConfig, cls: str, index: int) -> tuple[np.ndarray, np.ndarray, int]:
    parts = render_sample(config, cls, index)
    return quantize(parts.image), parts.mask, parts.label


MANIFEST_FIELDS = ("id", "class", "index", "segmentation_name", "spurious_cue", "cue_corner", "lesion_count", "seed")


def gen_dataset(config: SynthConfig, out_root) -> Path:
    """Write both dataset layouts plus ``manifest.csv`` under ``out_root``.

    Layout::

        images/NNNNN.pgm, masks/NNNNN.pgm          segmentation
        normal/NNNNN.pgm, tb/NNNNN.pgm             classification
        lung_masks/{normal,tb}/NNNNN.pgm           truth masks for the classification tree
    """
    from .imageio import write_pgm

    root = Path(out_root)
    for sub in ("images", "masks", "normal", "tb", "lung_masks/normal", "lung_masks/tb"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(2 * config.n_per_class)))
    rows = []
    for label, cls in enumerate(CLASSES):
        for index in range(config.n_per_class):
            parts = render_sample(config, cls, index)
            img = quantize(parts.image)
            mask = parts.mask.astype(np.uint8) * 255
            seg_name = f"{label * config.n_per_class + index:0{width}d}.pgm"
            name = f"{index:0{width}d}.pgm"
            write_pgm(img, root / "images" / seg_name)
            write_pgm(mask, root / "masks" / seg_name)
            write_pgm(img, root / cls / name)
            write_pgm(mask, root / "lung_masks" / cls / name)
            rows.append(
                {
                    "id": f"{cls}/{name[:-4]}",
                    "class": cls,
                    "index": index,
                    "segmentation_name": seg_name,
                    "spurious_cue": config.spurious_cue,
                    "cue_corner": parts.cue_corner or "",
                    "lesion_count": len(parts.lesion_centers),
                    "seed": config.seed,
                }
            )
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return root

