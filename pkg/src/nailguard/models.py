"""Classifier abstraction: backbone + softmax head with gradient and activation access."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import jsonschema
import numpy as np
import torch
from torch import nn

from .backbones import BACKBONES, BackboneError, BackboneSpec, make_backbone
from .dataset import LabelTaxonomy
from .pipeline import ImageBatch, PreprocessedImage

LOG_CLAMP = 1e-12
N_CATEGORIES = 6


class NumericError(Exception):
    """NaN/Inf escaped a forward or gradient computation."""


class CheckpointError(Exception):
    pass


class ClassifierNet(nn.Module):
    def __init__(self, backbone: nn.Module, n_classes: int = N_CATEGORIES):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(backbone.feature_dim, n_classes)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone.features(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = self.features(x).mean(dim=(2, 3))
        return self.head(pooled)


class Classifier:
    """Backbone feature extractor + 6-way softmax head over numpy HWC arrays."""

    def __init__(
        self,
        spec: BackboneSpec,
        taxonomy: LabelTaxonomy,
        net: ClassifierNet,
        fine_tune: bool = True,
    ):
        self.spec = spec
        self.taxonomy = taxonomy
        self.net = net.to(memory_format=torch.channels_last)
        self.set_fine_tune(fine_tune)

    # -- plumbing ---------------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def set_dtype(self, dtype: torch.dtype) -> "Classifier":
        self.net.to(dtype)
        return self

    def set_fine_tune(self, flag: bool) -> None:
        self.fine_tune = flag
        for p in self.net.backbone.parameters():
            p.requires_grad_(flag)

    def trainable_parameters(self):
        return [p for p in self.net.parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def _to_tensor(self, images: np.ndarray, requires_grad: bool = False) -> torch.Tensor:
        np_dtype = np.float64 if self.dtype == torch.float64 else np.float32
        arr = np.ascontiguousarray(images, dtype=np_dtype)
        if arr.ndim == 3:
            arr = arr[None]
        t = torch.from_numpy(arr).permute(0, 3, 1, 2).to(self.dtype)
        t = t.contiguous(memory_format=torch.channels_last)
        t.requires_grad_(requires_grad)
        return t

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = {k: torch.from_numpy(np.asarray(v)).to(self.dtype) for k, v in arrays.items()}
        self.net.load_state_dict(state)
        self.net.to(memory_format=torch.channels_last)

    # -- core operations ---------------------------------------------------

    def forward(self, batch: ImageBatch | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (logits, probs), each (N, 6); probs rows sum to 1."""
        images = batch.images if isinstance(batch, ImageBatch) else batch
        self.net.eval()
        with torch.no_grad():
            logits = self.net(self._to_tensor(images))
            if not torch.isfinite(logits).all():
                raise NumericError("non-finite logits in forward pass")
            probs = torch.softmax(logits, dim=1)
        return logits.detach().numpy(), probs.detach().numpy()

    def _loss_tensor(self, x: torch.Tensor, labels: np.ndarray) -> torch.Tensor:
        y = torch.from_numpy(np.asarray(labels)).to(self.dtype)
        logits = self.net(x)
        p = torch.softmax(logits, dim=1)
        return -(y * torch.log(p + LOG_CLAMP)).sum(dim=1).mean()

    @staticmethod
    def _check_one_hot(labels: np.ndarray) -> None:
        lab = np.asarray(labels)
        ok = (
            lab.ndim == 2
            and lab.shape[1] == N_CATEGORIES
            and np.all((lab == 0.0) | (lab == 1.0))
            and np.all(lab.sum(axis=1) == 1.0)
        )
        if not ok:
            raise ValueError("labels must be one-hot rows of width 6")

    def loss_and_grads(
        self,
        batch: ImageBatch,
        wrt: Literal["params", "input", "both"] = "params",
    ) -> tuple[float, dict[str, np.ndarray] | np.ndarray | tuple]:
        """Mean clamped cross-entropy and its exact gradients.

        ``wrt="params"`` returns {param_name: grad}, ``"input"`` returns an
        (N, 224, 224, 3) array, ``"both"`` returns the pair.
        """
        if wrt not in ("params", "input", "both"):
            raise ValueError(f"wrt must be params|input|both, not {wrt!r}")
        self._check_one_hot(batch.labels)
        self.net.eval()
        need_input = wrt in ("input", "both")
        need_params = wrt in ("params", "both")
        x = self._to_tensor(batch.images, requires_grad=need_input)
        named = [(n, p) for n, p in self.net.named_parameters() if p.requires_grad]
        params = [p for _, p in named] if need_params else []
        loss = self._loss_tensor(x, batch.labels)
        if not torch.isfinite(loss):
            raise NumericError("non-finite loss")
        targets = ([x] if need_input else []) + params
        grads = torch.autograd.grad(loss, targets, allow_unused=True)
        out_input = None
        if need_input:
            g = grads[0]
            out_input = g.permute(0, 2, 3, 1).detach().numpy().copy()
            grads = grads[1:]
        out_params = None
        if need_params:
            out_params = {
                n: (g.detach().numpy().copy() if g is not None else None)
                for (n, _), g in zip(named, grads)
            }
        loss_val = float(loss.detach())
        if wrt == "params":
            return loss_val, out_params
        if wrt == "input":
            return loss_val, out_input
        return loss_val, (out_params, out_input)

    def activations_and_grads(
        self, image: PreprocessedImage | np.ndarray, target_category: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Tap-layer feature map A (h, w, k) and d(target logit)/dA, same shape."""
        if not 0 <= int(target_category) < N_CATEGORIES:
            raise ValueError(f"target_category must be in 0..5, got {target_category}")
        pixels = image.pixels if isinstance(image, PreprocessedImage) else np.asarray(image)
        self.net.eval()
        # input grad keeps the tap in the autograd graph even with a frozen backbone
        x = self._to_tensor(pixels, requires_grad=True)
        feats = self.net.features(x)
        logits = self.net.head(feats.mean(dim=(2, 3)))
        (grad,) = torch.autograd.grad(logits[0, int(target_category)], feats)
        a = feats[0].permute(1, 2, 0).detach().numpy().copy()
        g = grad[0].permute(1, 2, 0).detach().numpy().copy()
        return a, g

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Argmax category indices for an (N, 224, 224, 3) array."""
        _, probs = self.forward(images)
        return probs.argmax(axis=1)


def build(
    backbone_id: str | BackboneSpec,
    taxonomy: LabelTaxonomy | None = None,
    seed: int = 0,
    pretrained: bool = True,
    fine_tune: bool = True,
) -> Classifier:
    """Construct a classifier for a backbone id; unknown ids raise BackboneError."""
    spec = backbone_id if isinstance(backbone_id, BackboneSpec) else BACKBONES.get(backbone_id)
    if spec is None:
        raise BackboneError(f"unknown backbone id {backbone_id!r}; known: {sorted(BACKBONES)}")
    taxonomy = taxonomy or LabelTaxonomy()
    backbone = make_backbone(spec.id, pretrained=pretrained, seed=seed)
    net = ClassifierNet(backbone)
    return Classifier(spec=spec, taxonomy=taxonomy, net=net, fine_tune=fine_tune)


# -- checkpointing ----------------------------------------------------------

CHECKPOINT_METADATA_SCHEMA = {
    "type": "object",
    "required": ["backbone_id", "taxonomy", "preprocess", "training_config", "metrics", "epoch"],
    "properties": {
        "backbone_id": {"type": "string"},
        "taxonomy": {
            "type": "array",
            "items": {"type": "string"},
            "minItems": 6,
            "maxItems": 6,
        },
        "preprocess": {"type": "object"},
        "training_config": {"type": ["object", "null"]},
        "metrics": {"type": ["object", "null"]},
        "epoch": {"type": "integer"},
    },
    "additionalProperties": True,
}

WEIGHTS_FILE = "weights.npz"
METADATA_FILE = "metadata.json"


@dataclass
class Checkpoint:
    """Weights blob + metadata; load(save(c)) reproduces predictions exactly."""

    weights: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        try:
            jsonschema.validate(self.metadata, CHECKPOINT_METADATA_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise CheckpointError(f"invalid checkpoint metadata: {exc.message}") from exc

    def save(self, path: str | Path) -> Path:
        self.validate()
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        np.savez(out / WEIGHTS_FILE, **self.weights)
        (out / METADATA_FILE).write_text(json.dumps(self.metadata, indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        src = Path(path)
        meta_file = src / METADATA_FILE
        weights_file = src / WEIGHTS_FILE
        if not meta_file.exists() or not weights_file.exists():
            raise CheckpointError(f"{src} is not a checkpoint directory")
        metadata = json.loads(meta_file.read_text())
        with np.load(weights_file) as npz:
            weights = {k: npz[k] for k in npz.files}
        ckpt = cls(weights=weights, metadata=metadata)
        ckpt.validate()
        return ckpt


def checkpoint_of(
    classifier: Classifier,
    preprocess: dict | None = None,
    training_config: dict | None = None,
    metrics: dict | None = None,
    epoch: int = 0,
) -> Checkpoint:
    metadata = {
        "backbone_id": classifier.spec.id,
        "taxonomy": list(classifier.taxonomy.categories),
        "preprocess": preprocess if preprocess is not None else {"image_size": 224, "scale": "unit_interval"},
        "training_config": training_config,
        "metrics": metrics,
        "epoch": epoch,
    }
    return Checkpoint(weights=classifier.state_arrays(), metadata=metadata)


def save(classifier: Classifier, path: str | Path, **metadata_fields) -> Checkpoint:
    ckpt = checkpoint_of(classifier, **metadata_fields)
    ckpt.save(path)
    return ckpt


def classifier_from_checkpoint(ckpt: Checkpoint, taxonomy: LabelTaxonomy | None = None) -> Classifier:
    meta_taxonomy = LabelTaxonomy(tuple(ckpt.metadata["taxonomy"]))
    if taxonomy is not None and tuple(taxonomy.categories) != tuple(meta_taxonomy.categories):
        raise CheckpointError(
            f"taxonomy mismatch: checkpoint has {meta_taxonomy.categories}, expected {taxonomy.categories}"
        )
    backbone_id = ckpt.metadata["backbone_id"]
    if backbone_id not in BACKBONES:
        raise CheckpointError(f"checkpoint references unknown backbone {backbone_id!r}")
    # architecture only; every parameter is overwritten from the weights blob
    backbone = make_backbone(backbone_id, pretrained=False)
    classifier = Classifier(BACKBONES[backbone_id], meta_taxonomy, ClassifierNet(backbone))
    classifier.load_state_arrays(ckpt.weights)
    return classifier


def load(path: str | Path, taxonomy: LabelTaxonomy | None = None) -> Classifier:
    return classifier_from_checkpoint(Checkpoint.load(path), taxonomy=taxonomy)
