"""Labeled samples, dataset containers and directory ingestion."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ManifestError, UsageError
from .imageio import DatasetStats, apply_mask, mask_from_pgm, read_pgm, resize_bilinear, to_unit, zscore_normalize

CLASS_NAMES = ("normal", "tb")
NORMAL, TB = 0, 1


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: int | None = None
    mask: np.ndarray | None = None
    augmented: bool = False
    transform: str | None = None
    source: str | None = None


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)
    layout: str = "classification"

    def __len__(self):
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.layout)

    def class_indices(self) -> dict[int, list[int]]:
        """Global indices per label, in dataset order."""
        out: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            out.setdefault(s.label if s.label is not None else 0, []).append(i)
        return dict(sorted(out.items()))

    def map_images(self, fn) -> "Dataset":
        return Dataset([replace(s, image=fn(s)) for s in self.samples], self.layout)


def _pgms(folder: Path) -> list[Path]:
    return sorted(p for p in folder.glob("*.pgm") if p.is_file())


def load_dataset(root, layout: str, mask_dir: str = "lung_masks") -> Dataset:
    """Read a segmentation tree (``images/`` + ``masks/``) or a classification tree
    (``normal/`` + ``tb/``, optional ``<mask_dir>/<class>/``). Files are taken in
    lexicographic order."""
    root = Path(root)
    if layout == "segmentation":
        images = _pgms(root / "images")
        if not images:
            raise UsageError(f"no .pgm files under {root / 'images'}")
        orphans = [p.name for p in images if not (root / "masks" / p.name).is_file()]
        if orphans:
            raise ManifestError(f"{len(orphans)} image(s) without a mask: {', '.join(orphans[:10])}")
        samples = [
            Sample(p.stem, read_pgm(p), mask=mask_from_pgm(read_pgm(root / "masks" / p.name)), source=str(p))
            for p in images
        ]
        return Dataset(samples, "segmentation")
    if layout == "classification":
        samples = []
        for label, cls in enumerate(CLASS_NAMES):
            files = _pgms(root / cls)
            if not files:
                raise UsageError(f"class folder {root / cls} is empty or missing")
            for p in files:
                mpath = root / mask_dir / cls / p.name
                mask = mask_from_pgm(read_pgm(mpath)) if mpath.is_file() else None
                samples.append(Sample(f"{cls}/{p.stem}", read_pgm(p), label=label, mask=mask, source=str(p)))
        return Dataset(samples, "classification")
    raise UsageError(f"layout must be 'segmentation' or 'classification', got {layout!r}")


def resize_sample(sample: Sample, size: tuple[int, int]) -> Sample:
    h, w = size
    image = sample.image
    mask = sample.mask
    if image.shape != (h, w):
        image = resize_bilinear(image, h, w)
        if mask is not None:
            mask = resize_bilinear(mask.astype(np.float32), h, w) >= 0.5
    else:
        image = to_unit(image)
    return replace(sample, image=image, mask=mask)


def prepare(dataset: Dataset, size: tuple[int, int]) -> Dataset:
    """Resize every image to ``size`` (working form in [0, 1])."""
    return Dataset([resize_sample(s, size) for s in dataset], dataset.layout)


def normalized_batch(dataset: Dataset, stats: DatasetStats, mask_input: bool = False) -> np.ndarray:
    """N x 1 x H x W float32 array of z-scored images; with ``mask_input`` the
    out-of-mask region is set to exactly 0 after normalization."""
    out = []
    for s in dataset:
        z = zscore_normalize(s.image, stats)
        if mask_input:
            if s.mask is None:
                raise UsageError(f"sample {s.id} has no mask to apply")
            z = apply_mask(z, s.mask)
        out.append(z)
    return np.stack(out)[:, None].astype(np.float32)


def mask_batch(dataset: Dataset) -> np.ndarray:
    missing = [s.id for s in dataset if s.mask is None]
    if missing:
        raise UsageError(f"samples without masks: {missing[:5]}")
    return np.stack([s.mask for s in dataset])[:, None].astype(np.float32)
