"""Backbone factory: torchvision CNNs exposing penultimate activations."""

from __future__ import annotations

import torch
from torch import nn
from torchvision import models

# ImageNet statistics, the standard preprocessing for these backbones
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)

_FACTORIES = {
    "alexnet": models.alexnet,
    "resnet18": models.resnet18,
    "resnet34": models.resnet34,
}


def available_backbones() -> list[str]:
    return sorted(_FACTORIES)


def build_backbone(name: str, seed: int = 0,
                   pretrained: bool = False) -> tuple[nn.Module, int]:
    """Return the backbone with its classifier removed plus feature width.

    With `pretrained` the torchvision weight cache must already hold the
    weights (this tool never downloads); otherwise initialization is
    seeded so repeated runs export identical features.
    """
    if name not in _FACTORIES:
        raise ValueError(f"unknown backbone {name!r}; "
                         f"choose from {available_backbones()}")
    torch.manual_seed(seed)
    weights = "IMAGENET1K_V1" if pretrained else None
    model = _FACTORIES[name](weights=weights)
    if name == "alexnet":
        width = model.classifier[-1].in_features
        model.classifier[-1] = nn.Identity()
    else:
        width = model.fc.in_features
        model.fc = nn.Identity()
    model.eval()
    return model, width
