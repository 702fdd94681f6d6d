"""Score-CAM heatmaps, overlays and the in-mask localization score."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DimensionError, EmptyCamError, TaskMismatchError, UndefinedMetricError, UsageError
from .imageio import resize_bilinear, to_uint8, write_pgm, write_ppm
from .nn.training import _as_batch, capture_activations, forward_batches
from .tensor import Tensor, no_grad

# blue -> cyan -> yellow -> red at t = 0, 1/3, 2/3, 1
_STOPS = np.array([0.0, 1 / 3, 2 / 3, 1.0])
_COLORS = np.array([[0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]], np.float64)


def _build_colormap() -> np.ndarray:
    t = np.arange(256) / 255.0
    rgb = np.stack([np.interp(t, _STOPS, _COLORS[:, c]) for c in range(3)], axis=1)
    return np.floor(rgb + 0.5).astype(np.uint8)


COLORMAP = _build_colormap()


@dataclass
class Heatmap:
    values: np.ndarray  # float64 (H, W) in [0, 1]
    target_class: int
    source_layer: str
    weights: np.ndarray | None = None
    scores: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi > lo:
        return (a - lo) / (hi - lo)
    return np.ones_like(a) if hi > 0 else np.zeros_like(a)


def score_cam(model, image, layer_id: str | None = None, target_class: int | None = None, batch_size: int = 32) -> Heatmap:
    """Gradient-free class activation map.

    Each activation map at ``layer_id`` is upsampled to the input size and
    min-max scaled into a soft mask. The masked inputs are scored by the model.
    A softmax over those target-class probabilities weights the upsampled
    maps. The ReLU of the weighted sum, min-max scaled, is the heatmap.
    Constant maps are left out of the softmax (weight 0).
    """
    if model.task != "classification":
        raise TaskMismatchError("score_cam needs a classification model")
    x = _as_batch(image)
    if x.shape[0] != 1:
        raise UsageError("score_cam takes a single image")
    layer_id = layer_id or model.default_cam_layer
    if target_class is None:
        target_class = int(np.argmax(forward_batches(model, x)[0]))
    h, w = x.shape[2:]
    acts = capture_activations(model, x, layer_id).data[0].astype(np.float64)
    up = np.stack([resize_bilinear(a, h, w).astype(np.float64) for a in acts])
    lo, hi = up.min(axis=(1, 2)), up.max(axis=(1, 2))
    live = hi > lo
    if not live.any():
        raise EmptyCamError(f"every activation map at {layer_id!r} is constant")

    norm = (up[live] - lo[live, None, None]) / (hi - lo)[live, None, None]
    masked = (x[0, :, None] * norm[None].astype(np.float32)).transpose(1, 0, 2, 3)
    logits = forward_batches(model, np.ascontiguousarray(masked, np.float32), batch_size)
    with no_grad():
        probs = ops.softmax(Tensor(logits)).data[:, target_class].astype(np.float64)

    scores = np.full(len(acts), -np.inf)
    scores[live] = probs
    e = np.zeros(len(acts))
    e[live] = np.exp(probs - probs.max())
    weights = e / e.sum()
    cam = np.maximum(np.tensordot(weights, up, axes=1), 0.0)
    return Heatmap(_minmax(cam), target_class, layer_id, weights, scores)


def localization_score(heatmap: Heatmap | np.ndarray, mask: np.ndarray) -> float:
    """Share of heatmap mass that falls inside ``mask``."""
    v = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, np.float64)
    m = np.asarray(mask, bool)
    if v.shape != m.shape:
        raise DimensionError(f"heatmap {v.shape} vs mask {m.shape}")
    total = float(v.sum())
    if total <= 0:
        raise UndefinedMetricError("localization score is undefined for an all-zero heatmap")
    return float(v[m].sum()) / total


def colorize(values: np.ndarray) -> np.ndarray:
    idx = np.floor(np.clip(np.asarray(values, np.float64), 0, 1) * 255 + 0.5).astype(np.int64)
    return COLORMAP[idx]


def render_overlay(heatmap: Heatmap | np.ndarray, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """uint8 H x W x 3 blend of the colorized heatmap over the grayscale image.

    uint8 images are used as stored; real-valued images are min-max scaled for display.
    """
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must lie in [0, 1], got {alpha}")
    v = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    img = np.asarray(image)
    if img.shape != v.shape:
        raise DimensionError(f"heatmap {v.shape} vs image {img.shape}")
    gray = img.astype(np.float64) if img.dtype == np.uint8 else np.floor(_minmax(img.astype(np.float64)) * 255 + 0.5)
    blend = (1 - alpha) * gray[..., None] + alpha * colorize(v).astype(np.float64)
    return np.floor(blend + 0.5).astype(np.uint8)


def write_overlay(path, heatmap, image, alpha: float = 0.5) -> None:
    write_ppm(render_overlay(heatmap, image, alpha), path)


def write_heatmap_pgm(path, heatmap: Heatmap) -> None:
    write_pgm(to_uint8(heatmap.values), path)
