"""Image decoding, resizing, augmentation, and batch assembly."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, asdict
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .dataset import DatasetManifest, SplitAssignment

IMAGE_SIZE = 224
N_CATEGORIES = 6
DEFAULT_BATCH_SIZE = 32


class ImageDecodeError(Exception):
    def __init__(self, source_id: str, reason: str):
        super().__init__(f"cannot decode image {source_id!r}: {reason}")
        self.source_id = source_id


@dataclass(frozen=True)
class PreprocessedImage:
    """224x224x3 float32 array with values in [0, 1]."""

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ValueError(f"expected {IMAGE_SIZE}x{IMAGE_SIZE}x3 pixels, got {self.pixels.shape}")


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool = True
    horizontal_flip: bool = True
    rotation_max_degrees: float = 15.0
    brightness_jitter: float = 0.1
    contrast_jitter: float = 0.1

    def __post_init__(self):
        if self.rotation_max_degrees < 0:
            raise ValueError("rotation_max_degrees must be >= 0")
        for name in ("brightness_jitter", "contrast_jitter"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "AugmentationConfig":
        return cls(**doc)


@dataclass(frozen=True)
class ImageBatch:
    images: np.ndarray  # (N, 224, 224, 3) float32
    labels: np.ndarray  # (N, 6) one-hot float32
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        n = self.images.shape[0]
        if n < 1:
            raise ValueError("batch must contain at least one image")
        if self.images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ValueError(f"bad image shape {self.images.shape}")
        if self.labels.shape != (n, N_CATEGORIES):
            raise ValueError(f"bad labels shape {self.labels.shape}")
        row_sums = self.labels.sum(axis=1)
        if not (np.all(row_sums == 1.0) and np.all(np.max(self.labels, axis=1) == 1.0)):
            raise ValueError("labels must be one-hot rows")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def label_indices(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)


def one_hot(indices: Sequence[int]) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= N_CATEGORIES):
        raise ValueError(f"label index out of range 0..{N_CATEGORIES - 1}")
    out = np.zeros((len(idx), N_CATEGORIES), dtype=np.float32)
    out[np.arange(len(idx)), idx] = 1.0
    return out


def load_and_resize(image_bytes: bytes, source_id: str = "") -> PreprocessedImage:
    """Decode to RGB, bilinear-resize to 224x224, scale to [0, 1]."""
    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            rgb = img.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(source_id, str(exc)) from exc
    if rgb.size != (IMAGE_SIZE, IMAGE_SIZE):
        rgb = rgb.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    pixels = np.asarray(rgb, dtype=np.float32) / 255.0
    return PreprocessedImage(pixels=pixels, source_id=source_id)


def augment(img: PreprocessedImage, cfg: AugmentationConfig, rng_seed: int) -> PreprocessedImage:
    """Apply flip/rotation/brightness/contrast jitter, deterministic per seed.

    Contrast is a stretch about the image mean, so constant images pass
    through rotation+contrast unchanged. Output is clipped to [0, 1].
    """
    if not cfg.enabled:
        return img
    rng = np.random.default_rng(rng_seed)
    pixels = img.pixels

    if cfg.horizontal_flip and rng.random() < 0.5:
        pixels = pixels[:, ::-1, :]

    if cfg.rotation_max_degrees > 0:
        angle = rng.uniform(-cfg.rotation_max_degrees, cfg.rotation_max_degrees)
        pixels = ndimage.rotate(pixels, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")

    if cfg.brightness_jitter > 0:
        factor = rng.uniform(1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter)
        pixels = pixels * factor

    if cfg.contrast_jitter > 0:
        factor = rng.uniform(1.0 - cfg.contrast_jitter, 1.0 + cfg.contrast_jitter)
        mean = pixels.mean()
        pixels = mean + factor * (pixels - mean)

    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    return PreprocessedImage(pixels=np.ascontiguousarray(pixels), source_id=img.source_id)


class ImageStore:
    """Decoded-image cache over a manifest; resized pixels held as uint8."""

    def __init__(self, manifest: DatasetManifest, root: str | None = None):
        self.manifest = manifest
        self.root = root if root is not None else manifest.source_root
        self._cache: dict[str, np.ndarray] = {}

    def load(self, sample_id: str) -> PreprocessedImage:
        cached = self._cache.get(sample_id)
        if cached is None:
            entry = self.manifest._index()[sample_id]
            path = f"{self.root}/{entry.relative_path}"
            with open(path, "rb") as fh:
                img = load_and_resize(fh.read(), source_id=sample_id)
            cached = np.round(img.pixels * 255.0).astype(np.uint8)
            self._cache[sample_id] = cached
        return PreprocessedImage(pixels=cached.astype(np.float32) / 255.0, source_id=sample_id)

    def label(self, sample_id: str) -> int:
        return self.manifest.category_of(sample_id)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (run seed, epoch, sample id...)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def make_batches(
    store: ImageStore,
    ids: Sequence[str],
    batch_size: int = DEFAULT_BATCH_SIZE,
    shuffle_seed: int | None = None,
    augment_cfg: AugmentationConfig | None = None,
    augment_seed: int = 0,
) -> Iterator[ImageBatch]:
    """Yield batches over ``ids`` in a deterministic order.

    With a ``shuffle_seed`` the id order is a seeded permutation (identical
    seed, identical order); without it the given order is kept. The final
    partial batch is retained. Augmentation, when configured, is applied
    per image with a seed derived from (augment_seed, sample_id).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(ids)
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        order = [order[i] for i in rng.permutation(len(order))]
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        images = []
        for sid in chunk:
            img = store.load(sid)
            if augment_cfg is not None and augment_cfg.enabled:
                img = augment(img, augment_cfg, derive_seed(augment_seed, sid))
            images.append(img.pixels)
        labels = one_hot([store.label(sid) for sid in chunk])
        yield ImageBatch(images=np.stack(images), labels=labels, sample_ids=tuple(chunk))


def batches_for_partition(
    store: ImageStore,
    split: SplitAssignment,
    partition: str,
    batch_size: int = DEFAULT_BATCH_SIZE,
    shuffle_seed: int | None = None,
    augment_cfg: AugmentationConfig | None = None,
    augment_seed: int = 0,
) -> Iterator[ImageBatch]:
    """Partition-aware batching: augmentation only ever reaches train batches."""
    ids = sorted(split.ids(partition))
    if partition != "train":
        augment_cfg = None
        shuffle_seed = None
    return make_batches(
        store,
        ids,
        batch_size=batch_size,
        shuffle_seed=shuffle_seed,
        augment_cfg=augment_cfg,
        augment_seed=augment_seed,
    )
