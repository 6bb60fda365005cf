"""Grad-CAM heatmaps and Shapley segment attributions with overlay rendering."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .models import Classifier
from .pipeline import IMAGE_SIZE, PreprocessedImage

MAX_EXACT_SEGMENTS = 12


class ExplainError(Exception):
    pass


@dataclass(frozen=True)
class AttributionMap:
    """224x224 map in [0, 1]; 0.5 is neutral for diverging (shapley) maps."""

    values: np.ndarray
    method: Literal["gradcam", "shapley"]
    target_category: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ExplainError(f"attribution map must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {v.shape}")
        if v.size and (v.min() < -1e-9 or v.max() > 1 + 1e-9):
            raise ExplainError("attribution values must lie in [0, 1]")

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "target": int(self.target_category),
            "values": np.asarray(self.values, dtype=float).round(6).tolist(),
        }


@dataclass(frozen=True)
class Segmentation:
    segment_ids: np.ndarray  # 224x224 int array
    n_segments: int

    def __post_init__(self):
        ids = np.asarray(self.segment_ids)
        if ids.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ExplainError("segment map must cover the full image")
        present = np.unique(ids)
        if not np.array_equal(present, np.arange(self.n_segments)):
            raise ExplainError("segment ids must be contiguous 0..n-1 and all present")


@dataclass(frozen=True)
class ShapleyResult:
    phi: np.ndarray  # per-segment attribution
    base_value: float  # model output on the fully masked image
    full_value: float  # model output on the intact image


def _bilinear_upsample(raw: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(raw[None, None].astype(np.float64))
    up = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return up[0, 0].numpy()


def cam_from_activations(a: np.ndarray, g: np.ndarray, upsample_to: int | None = None) -> np.ndarray:
    """Core Grad-CAM: channel-mean weights, ReLU'd weighted sum, normalize.

    ``a`` and ``g`` are (h, w, k). A flat map (max == min) normalizes to
    all zeros rather than dividing by zero.
    """
    if a.shape != g.shape:
        raise ExplainError(f"activation/gradient shape mismatch: {a.shape} vs {g.shape}")
    alpha = g.mean(axis=(0, 1))
    raw = np.maximum((a * alpha).sum(axis=2), 0.0)
    if upsample_to is not None:
        raw = _bilinear_upsample(raw, upsample_to)
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0.0:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def grad_cam(
    classifier: Classifier, image: PreprocessedImage | np.ndarray, target_category: int
) -> AttributionMap:
    """Gradient-weighted activation heatmap for one prediction."""
    a, g = classifier.activations_and_grads(image, target_category)
    values = cam_from_activations(a.astype(np.float64), g.astype(np.float64), upsample_to=IMAGE_SIZE)
    return AttributionMap(values=values, method="gradcam", target_category=int(target_category))


def segment_grid(grid: tuple[int, int] = (4, 4)) -> Segmentation:
    """Row-major block segmentation; each grid axis must divide 224."""
    rows, cols = grid
    if rows < 1 or cols < 1 or IMAGE_SIZE % rows or IMAGE_SIZE % cols:
        raise ExplainError(f"grid axes must divide {IMAGE_SIZE}, got {grid}")
    bh, bw = IMAGE_SIZE // rows, IMAGE_SIZE // cols
    ids = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            ids[r * bh : (r + 1) * bh, c * bw : (c + 1) * bw] = r * cols + c
    return Segmentation(segment_ids=ids, n_segments=rows * cols)


def _shapley_weights(n: int) -> list[float]:
    """weight[s] for a coalition of size s excluding the player: s!(n-s-1)!/n!"""
    fact = [math.factorial(k) for k in range(n + 1)]
    return [fact[s] * fact[n - s - 1] / fact[n] for s in range(n)]


def exact_shapley_from_values(values: dict[int, float], n: int) -> np.ndarray:
    """Exact Shapley attribution from a full coalition-value table keyed by bitmask."""
    w = _shapley_weights(n)
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        for mask in range(1 << n):
            if mask & bit:
                continue
            s = bin(mask).count("1")
            phi[i] += w[s] * (values[mask | bit] - values[mask])
    return phi


def blurred_baseline(pixels: np.ndarray, sigma: float = 10.0) -> np.ndarray:
    return ndimage.gaussian_filter(pixels, sigma=(sigma, sigma, 0.0))


def gray_baseline(pixels: np.ndarray) -> np.ndarray:
    return np.full_like(pixels, 0.5)


class _CoalitionValue:
    """v(S) = target probability with segments outside S replaced by baseline."""

    def __init__(
        self,
        classifier: Classifier,
        pixels: np.ndarray,
        seg: Segmentation,
        target_category: int,
        baseline: np.ndarray,
        chunk: int = 32,
    ):
        self.classifier = classifier
        self.pixels = pixels.astype(np.float32)
        self.seg = seg
        self.target = int(target_category)
        self.baseline = baseline.astype(np.float32)
        self.chunk = chunk
        self._cache: dict[int, float] = {}

    def _compose(self, mask: int) -> np.ndarray:
        keep = np.isin(self.seg.segment_ids, [i for i in range(self.seg.n_segments) if mask & (1 << i)])
        return np.where(keep[..., None], self.pixels, self.baseline)

    def many(self, masks: list[int]) -> None:
        todo = [m for m in dict.fromkeys(masks) if m not in self._cache]
        for start in range(0, len(todo), self.chunk):
            group = todo[start : start + self.chunk]
            batch = np.stack([self._compose(m) for m in group])
            _, probs = self.classifier.forward(batch)
            for m, p in zip(group, probs[:, self.target]):
                self._cache[m] = float(p)

    def __call__(self, mask: int) -> float:
        if mask not in self._cache:
            self.many([mask])
        return self._cache[mask]


def shapley_attribution(
    classifier: Classifier,
    image: PreprocessedImage | np.ndarray,
    seg: Segmentation,
    target_category: int,
    mode: str = "exact",
    n_samples: int = 2000,
    sample_seed: int = 0,
    baseline: str = "blur",
) -> ShapleyResult:
    """Shapley attribution of the target-category probability over segments.

    ``mode="exact"`` enumerates all 2^n coalitions (n <= 12);
    ``mode="sampled"`` uses the permutation estimator, deterministic per seed.
    Masked segments are replaced by a blurred copy of the image (or mid-gray
    with ``baseline="gray"``).
    """
    pixels = image.pixels if isinstance(image, PreprocessedImage) else np.asarray(image)
    if baseline == "blur":
        base_pixels = blurred_baseline(pixels)
    elif baseline == "gray":
        base_pixels = gray_baseline(pixels)
    else:
        raise ExplainError(f"unknown baseline {baseline!r} (use 'blur' or 'gray')")
    n = seg.n_segments
    v = _CoalitionValue(classifier, pixels, seg, target_category, base_pixels)
    full_mask = (1 << n) - 1

    if mode == "exact":
        if n > MAX_EXACT_SEGMENTS:
            raise ExplainError(
                f"exact mode enumerates 2^{n} coalitions; use mode='sampled' for n > {MAX_EXACT_SEGMENTS}"
            )
        v.many(list(range(1 << n)))
        phi = exact_shapley_from_values(v._cache, n)
    elif mode == "sampled":
        rng = np.random.default_rng(sample_seed)
        phi = np.zeros(n)
        for _ in range(n_samples):
            order = rng.permutation(n)
            mask = 0
            masks = [0]
            for i in order:
                mask |= 1 << int(i)
                masks.append(mask)
            v.many(masks)
            prev = v(0)
            mask = 0
            for i in order:
                mask |= 1 << int(i)
                cur = v(mask)
                phi[int(i)] += cur - prev
                prev = cur
        phi /= n_samples
    else:
        raise ExplainError(f"unknown mode {mode!r} (use 'exact' or 'sampled')")

    return ShapleyResult(phi=phi, base_value=v(0), full_value=v(full_mask))


def to_pixel_map(result: ShapleyResult, seg: Segmentation, target_category: int = 0) -> AttributionMap:
    """Spread per-segment phi onto pixels, diverging around 0.5.

    max|phi| maps to distance 0.5 from neutral; an all-zero phi gives a
    uniform 0.5 map.
    """
    phi = np.asarray(result.phi, dtype=np.float64)
    scale = np.abs(phi).max()
    values = np.full((IMAGE_SIZE, IMAGE_SIZE), 0.5)
    if scale > 0:
        per_pixel = phi[seg.segment_ids]
        values = 0.5 + 0.5 * per_pixel / scale
    return AttributionMap(values=values, method="shapley", target_category=int(target_category))


_JET_X = np.array([0.0, 0.125, 0.375, 0.625, 0.875, 1.0])
_JET_RGB = np.array(
    [
        [0.0, 0.0, 0.5],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.5, 0.0, 0.0],
    ]
)


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] scalars to RGB through a blue-to-red jet-style ramp."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    out = np.empty(v.shape + (3,), dtype=np.float64)
    for ch in range(3):
        out[..., ch] = np.interp(v, _JET_X, _JET_RGB[:, ch])
    return out


def overlay(
    image: PreprocessedImage | np.ndarray, attribution: AttributionMap, alpha: float = 0.4
) -> bytes:
    """Alpha-blend the colormapped attribution over the image; returns PNG bytes."""
    pixels = image.pixels if isinstance(image, PreprocessedImage) else np.asarray(image)
    values = np.asarray(attribution.values)
    if pixels.shape[:2] != values.shape:
        raise ExplainError(f"image {pixels.shape[:2]} and map {values.shape} sizes differ")
    if not 0.0 <= alpha <= 1.0:
        raise ExplainError("alpha must be in [0, 1]")
    color = heat_colormap(values)
    blended = (1.0 - alpha) * pixels.astype(np.float64) + alpha * color
    arr = np.round(np.clip(blended, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def export_attribution(
    attribution: AttributionMap,
    path_json: str | Path,
    shapley: ShapleyResult | None = None,
    seg: Segmentation | None = None,
) -> None:
    doc = {"method": attribution.method, "target": int(attribution.target_category)}
    if shapley is not None and seg is not None:
        doc["phi"] = np.asarray(shapley.phi, dtype=float).tolist()
        doc["base_value"] = shapley.base_value
        doc["full_value"] = shapley.full_value
        doc["segments"] = {"n_segments": seg.n_segments, "block_grid": True}
    else:
        doc["values"] = attribution.to_json()["values"]
    Path(path_json).write_text(json.dumps(doc, indent=2))
