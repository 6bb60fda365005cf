"""Backbone feature extractors: the desk-scale test net and pretrained trunks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

IMAGE_SIZE = 224

# High-gain init for the test net: GAP features need enough energy that the
# default 1e-4 learning rate separates classes within a desk-scale epoch budget.
TINY_INIT_GAIN = 32.0


class BackboneError(Exception):
    """Unknown backbone id or unresolved tap layer."""


class WeightsUnavailableError(Exception):
    """Pretrained weights are not present locally and cannot be fetched."""


@dataclass(frozen=True)
class BackboneSpec:
    id: str
    gradcam_tap: str
    provenance: str
    input_shape: tuple[int, int, int] = (IMAGE_SIZE, IMAGE_SIZE, 3)


BACKBONES: dict[str, BackboneSpec] = {
    "tiny_test": BackboneSpec(
        id="tiny_test",
        gradcam_tap="pool2",
        provenance="random init, no pretrained weights (desk-scale test net)",
    ),
    "inception_v3": BackboneSpec(
        id="inception_v3",
        gradcam_tap="Mixed_7c",
        provenance="torchvision inception_v3 IMAGENET1K_V1",
    ),
    "densenet201": BackboneSpec(
        id="densenet201",
        gradcam_tap="features",
        provenance="torchvision densenet201 IMAGENET1K_V1",
    ),
    "efficientnet_v2": BackboneSpec(
        id="efficientnet_v2",
        gradcam_tap="features.7",
        provenance="torchvision efficientnet_v2_s IMAGENET1K_V1 (smallest variant)",
    ),
    "resnet50": BackboneSpec(
        id="resnet50",
        gradcam_tap="layer4",
        provenance="torchvision resnet50 IMAGENET1K_V1",
    ),
}


class TinyTestBackbone(nn.Module):
    """conv3x3x8 -> pool2 -> conv3x3x16 -> pool2; tap is the pooled 56x56x16 map."""

    feature_dim = 16

    def __init__(self, init_gain: float = TINY_INIT_GAIN):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, kernel_size=3, stride=1, padding=1)
        self.conv2 = nn.Conv2d(8, 16, kernel_size=3, stride=1, padding=1)
        self.pool = nn.MaxPool2d(2)
        with torch.no_grad():
            self.conv1.weight.mul_(init_gain)
            self.conv2.weight.mul_(init_gain)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(torch.relu(self.conv1(x)))
        x = self.pool(torch.relu(self.conv2(x)))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


class _TorchvisionBackbone(nn.Module):
    """Adapter exposing a torchvision trunk's last conv feature map."""

    def __init__(self, backbone_id: str, trunk: nn.Module, feature_dim: int):
        super().__init__()
        self.backbone_id = backbone_id
        self.trunk = trunk
        self.feature_dim = feature_dim

    def features(self, x: torch.Tensor) -> torch.Tensor:
        t = self.trunk
        if self.backbone_id == "resnet50":
            x = t.maxpool(t.relu(t.bn1(t.conv1(x))))
            x = t.layer4(t.layer3(t.layer2(t.layer1(x))))
            return x
        if self.backbone_id == "densenet201":
            return torch.relu(t.features(x))
        if self.backbone_id == "efficientnet_v2":
            return t.features(x)
        if self.backbone_id == "inception_v3":
            for name in (
                "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1",
                "Conv2d_3b_1x1", "Conv2d_4a_3x3", "maxpool2",
                "Mixed_5b", "Mixed_5c", "Mixed_5d",
                "Mixed_6a", "Mixed_6b", "Mixed_6c", "Mixed_6d", "Mixed_6e",
                "Mixed_7a", "Mixed_7b", "Mixed_7c",
            ):
                x = getattr(t, name)(x)
            return x
        raise BackboneError(f"no feature path for backbone {self.backbone_id!r}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


def _cached_weights_path(weights_enum) -> str | None:
    import os

    from torch import hub

    filename = os.path.basename(weights_enum.url)
    path = os.path.join(hub.get_dir(), "checkpoints", filename)
    return path if os.path.exists(path) else None


def _load_torchvision(backbone_id: str, pretrained: bool) -> _TorchvisionBackbone:
    from torchvision import models as tvm

    registry = {
        "inception_v3": (tvm.inception_v3, tvm.Inception_V3_Weights.IMAGENET1K_V1, 2048, {"aux_logits": True}),
        "densenet201": (tvm.densenet201, tvm.DenseNet201_Weights.IMAGENET1K_V1, 1920, {}),
        "efficientnet_v2": (tvm.efficientnet_v2_s, tvm.EfficientNet_V2_S_Weights.IMAGENET1K_V1, 1280, {}),
        "resnet50": (tvm.resnet50, tvm.ResNet50_Weights.IMAGENET1K_V1, 2048, {}),
    }
    ctor, weights, feature_dim, kwargs = registry[backbone_id]
    if pretrained:
        cached = _cached_weights_path(weights)
        if cached is None:
            raise WeightsUnavailableError(
                f"pretrained weights for {backbone_id!r} are not in the local cache. "
                f"Download {weights.url} into $TORCH_HOME/hub/checkpoints/ "
                f"(or run `torch.hub.load_state_dict_from_url(...)` on a machine with "
                f"network access and copy the file over); refusing to fall back to "
                f"random initialization."
            )
        trunk = ctor(weights=weights, **kwargs)
    else:
        trunk = ctor(weights=None, **kwargs)
    return _TorchvisionBackbone(backbone_id, trunk, feature_dim)


def make_backbone(backbone_id: str, pretrained: bool = True, seed: int = 0) -> nn.Module:
    """Instantiate a backbone by id; ``tiny_test`` is seeded random init."""
    if backbone_id not in BACKBONES:
        raise BackboneError(f"unknown backbone id {backbone_id!r}; known: {sorted(BACKBONES)}")
    if backbone_id == "tiny_test":
        torch.manual_seed(seed)
        return TinyTestBackbone()
    return _load_torchvision(backbone_id, pretrained=pretrained)
