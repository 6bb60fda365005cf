"""Deterministic synthetic nail-image dataset for desk-scale runs.

Each category gets a distinct nail hue (equal-luminance wheel), a ridge
texture (per-category orientation and period), and a geometric marker:
dark streak (melanoma), plain (healthy), thick curved rim (onychogryphosis),
blue plate (blue finger), bulged outline (clubbing), dark pits (pitting).
The palette is chosen for feature-space separability, not clinical realism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import CANONICAL_CATEGORIES
from .pipeline import derive_seed

SIZE = 224
SKIN_TONE = (0.76, 0.62, 0.54)


def _wheel_color(angle_deg: float, sat: float = 0.42) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.clip(
        0.5 + sat * np.array([math.cos(a), math.cos(a - 2 * math.pi / 3), math.cos(a + 2 * math.pi / 3)]),
        0.0,
        1.0,
    )


# category -> (hue angle, ridge period px, ridge orientation deg, marker)
MOTIFS = {
    "acral_lentiginous_melanoma": (0.0, 8.0, 0.0, "streak"),
    "healthy_nail": (300.0, 12.0, 30.0, "plain"),
    "onychogryphosis": (60.0, 18.0, 60.0, "rim"),
    "blue_finger": (240.0, 28.0, 90.0, "plain"),
    "clubbing": (180.0, 44.0, 120.0, "bulge"),
    "pitting": (120.0, 64.0, 150.0, "pits"),
}


@dataclass(frozen=True)
class SynthSpec:
    per_category: int = 100
    seed: int = 0


def render_nail_image(category: str, rng: np.random.Generator) -> np.ndarray:
    """One 224x224x3 float image in [0, 1] for the given category."""
    hue_angle, period, orient_deg, marker = MOTIFS[category]
    color = _wheel_color(hue_angle)

    img = np.ones((SIZE, SIZE, 3), dtype=np.float64) * np.array(SKIN_TONE)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)

    cx = 112.0 + rng.uniform(-6, 6)
    cy = 112.0 + rng.uniform(-6, 6)
    ax = 74.0 + rng.uniform(-5, 5)
    ay = 96.0 + rng.uniform(-5, 5)
    if marker == "bulge":
        # clubbed nails bulge sideways toward the tip
        ax *= 1.22
    r2 = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    nail = r2 <= 1.0
    if marker == "bulge":
        lower = ((xx - cx) / (ax * 1.18)) ** 2 + ((yy - (cy + 0.35 * ay)) / (ay * 0.75)) ** 2
        nail |= lower <= 1.0

    theta = math.radians(orient_deg)
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.sin(2 * math.pi * (math.cos(theta) * xx + math.sin(theta) * yy) / period + phase)
    plate = color * (0.80 + 0.20 * wave)[..., None]
    img[nail] = plate[nail]

    if marker == "streak":
        sx = cx + rng.uniform(-0.3, 0.3) * ax
        width = rng.uniform(8, 16)
        streak = nail & (np.abs(xx - sx) < width)
        img[streak] = np.array([0.12, 0.07, 0.05])
    elif marker == "rim":
        rim = (r2 > 0.62) & nail
        img[rim] = color * 0.45
    elif marker == "bulge":
        edge = (r2 > 0.80) & (r2 <= 1.0)
        img[edge] = color * 0.7
    elif marker == "pits":
        n_pits = rng.integers(5, 13)
        for _ in range(n_pits):
            ang = rng.uniform(0, 2 * math.pi)
            rad = rng.uniform(0, 0.75)
            px = cx + rad * ax * math.cos(ang)
            py = cy + rad * ay * math.sin(ang)
            pr = rng.uniform(3, 6)
            pit = (xx - px) ** 2 + (yy - py) ** 2 <= pr**2
            img[pit & nail] = color * 0.25

    img *= rng.uniform(0.95, 1.05)
    img += rng.normal(0.0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(spec: SynthSpec, out_dir: str | Path) -> dict[str, int]:
    """Write an ingest-compatible tree of PNGs; byte-identical per (spec, path)."""
    out = Path(out_dir)
    counts: dict[str, int] = {}
    for cat_idx, category in enumerate(CANONICAL_CATEGORIES):
        cat_dir = out / category
        cat_dir.mkdir(parents=True, exist_ok=True)
        for i in range(spec.per_category):
            rng = np.random.default_rng(derive_seed(spec.seed, category, i))
            pixels = render_nail_image(category, rng)
            arr = np.round(pixels * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(cat_dir / f"{category}_{i:04d}.png")
        counts[category] = spec.per_category
    return counts
