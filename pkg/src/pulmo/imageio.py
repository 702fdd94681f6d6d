"""Netpbm codecs and per-image preprocessing.

Images are plain numpy arrays: ``uint8`` (H, W) is the storage form, any
float dtype is the working form. Masks are boolean (H, W) arrays.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DimensionError, FormatError, UsageError

_WHITESPACE = b" \t\n\r\v\f"


def _header_tokens(buf: bytes, count: int) -> tuple[list[tuple[int, int]], int]:
    """Parse ``count`` ASCII integers after the 2-byte magic. Returns (value, offset) pairs and
    the payload offset (one whitespace byte after the last token)."""
    pos = 2
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos] in _WHITESPACE or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < n and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise FormatError("truncated header", pos)
        start = pos
        while pos < n and buf[pos] not in _WHITESPACE and buf[pos] != ord("#"):
            pos += 1
        text = buf[start:pos]
        if not text.isdigit():
            raise FormatError(f"expected a decimal integer in header, got {text[:16]!r}", start)
        tokens.append((int(text), start))
    if pos >= n or buf[pos] not in _WHITESPACE:
        raise FormatError("header must end with a single whitespace byte", pos)
    return tokens, pos + 1


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0)
    tokens, start = _header_tokens(buf, 3)
    (w, w_off), (h, h_off), (maxval, m_off) = tokens
    if w <= 0:
        raise FormatError("width must be positive", w_off)
    if h <= 0:
        raise FormatError("height must be positive", h_off)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", m_off)
    need = w * h * channels
    have = len(buf) - start
    if have < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {have}", len(buf))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", start + need)
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_pgm(path) -> np.ndarray:
    """Binary P5 graymap with maxval 255 -> uint8 (H, W)."""
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def _as_bytes(image: np.ndarray, ndim: int, what: str) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.ndim != ndim:
        raise DimensionError(f"{what} expects a {ndim}-d array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255 or not np.array_equal(arr, np.round(arr))):
            raise UsageError(f"{what} needs 8-bit values; convert real-form images with to_uint8 first")
        arr = arr.astype(np.uint8)
    return np.ascontiguousarray(arr)


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_pgm(image: np.ndarray, path) -> None:
    arr = _as_bytes(image, 2, "write_pgm")
    h, w = arr.shape
    _atomic_write(path, b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def write_ppm(rgb: np.ndarray, path) -> None:
    arr = _as_bytes(rgb, 3, "write_ppm")
    h, w, c = arr.shape
    if c != 3:
        raise DimensionError(f"write_ppm expects H x W x 3, got {arr.shape}")
    _atomic_write(path, b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def to_unit(image: np.ndarray) -> np.ndarray:
    """uint8 storage form -> float32 in [0, 1]."""
    arr = np.asarray(image)
    return arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0, 1] reals -> bytes with round-half-up."""
    return np.floor(np.clip(np.asarray(image, np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping; returns float32."""
    if out_h < 1 or out_w < 1:
        raise UsageError(f"resize target must be positive, got {out_h}x{out_w}")
    src = to_unit(image) if np.asarray(image).dtype == np.uint8 else np.asarray(image, np.float32)
    h, w = src.shape
    if (h, w) == (out_h, out_w):
        return src.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(np.float32)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bottom * fy[:, None]
    # keep interpolation inside the input range despite float rounding
    return np.clip(out, src.min(), src.max()).astype(np.float32)


@dataclass(frozen=True)
class DatasetStats:
    mean: float
    std: float

    @property
    def effective_std(self) -> float:
        return self.std if self.std >= 1e-8 else 1.0


def dataset_stats(images: Iterable[np.ndarray]) -> DatasetStats:
    """Scalar mean and population std over every pixel of every image (working form)."""
    images = list(images)
    count = sum(np.size(img) for img in images)
    if count == 0:
        raise UsageError("dataset_stats needs at least one image")
    mean = sum(to_unit(img).astype(np.float64).sum() for img in images) / count
    sq = sum(((to_unit(img).astype(np.float64) - mean) ** 2).sum() for img in images)
    return DatasetStats(float(mean), float(np.sqrt(sq / count)))


def zscore_normalize(image: np.ndarray, stats: DatasetStats) -> np.ndarray:
    return ((to_unit(image).astype(np.float64) - stats.mean) / stats.effective_std).astype(np.float32)


def zscore_denormalize(image: np.ndarray, stats: DatasetStats) -> np.ndarray:
    return (np.asarray(image, np.float64) * stats.effective_std + stats.mean).astype(np.float32)


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero every pixel outside ``mask``; inside pixels are returned unchanged."""
    img = np.asarray(image)
    m = np.asarray(mask, dtype=bool)
    if img.shape != m.shape:
        raise DimensionError(f"apply_mask: image {img.shape} vs mask {m.shape}")
    return np.where(m, img, np.zeros((), dtype=img.dtype))


def mask_from_pgm(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr) >= 128


def keep_largest_components(mask: np.ndarray, count: int = 2) -> np.ndarray:
    """Keep the ``count`` largest 4-connected foreground regions (ties: first in scan order)."""
    from scipy import ndimage

    m = np.asarray(mask, bool)
    if count <= 0:
        return m.copy()
    labels, n = ndimage.label(m)
    if n <= count:
        return m.copy()
    sizes = np.bincount(labels.ravel())[1:]
    keep = np.argsort(-sizes, kind="stable")[:count] + 1
    return np.isin(labels, keep)
