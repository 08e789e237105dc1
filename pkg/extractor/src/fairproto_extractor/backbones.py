"""Frozen backbone feature extractors.

Each builder returns (module, feature width, identifier). Models run in eval
mode with no gradient; weights are either the published pretrained
checkpoints (default; requires model-zoo access) or a seeded random
initialization with the same architecture ("none", for offline use; feature
widths are unchanged).
"""

from __future__ import annotations

import torch

VIT_BACKBONES = ("swin", "deit", "vt")


class CheckpointUnavailable(RuntimeError):
    def __init__(self, backbone: str, cause: Exception):
        super().__init__(f"could not obtain pretrained weights for backbone "
                         f"{backbone!r}: {cause}")
        self.backbone = backbone


def _weights_id(weights: str, seed: int, pretrained_name: str) -> str:
    return pretrained_name if weights == "pretrained" else f"random{seed}"


def build_vit(name: str, weights: str, seed: int):
    if name not in VIT_BACKBONES:
        raise ValueError(f"backbone must be one of {VIT_BACKBONES}, got {name!r}")
    torch.manual_seed(seed)
    if name == "swin":
        from torchvision import models as tvm
        try:
            w = tvm.Swin_T_Weights.IMAGENET1K_V1 if weights == "pretrained" else None
            model = tvm.swin_t(weights=w)
        except Exception as exc:
            raise CheckpointUnavailable("swin", exc)
        width = model.head.in_features
        model.head = torch.nn.Identity()
        tag = f"swin_t@{_weights_id(weights, seed, 'IMAGENET1K_V1')}"
    elif name == "vt":
        from torchvision import models as tvm
        try:
            w = tvm.ViT_B_16_Weights.IMAGENET1K_V1 if weights == "pretrained" else None
            model = tvm.vit_b_16(weights=w)
        except Exception as exc:
            raise CheckpointUnavailable("vt", exc)
        width = model.heads.head.in_features
        model.heads = torch.nn.Identity()  # class-token output
        tag = f"vit_b_16@{_weights_id(weights, seed, 'IMAGENET1K_V1')}"
    else:  # deit
        from transformers import DeiTConfig, DeiTModel
        checkpoint = "facebook/deit-base-distilled-patch16-224"
        if weights == "pretrained":
            try:
                model = DeiTModel.from_pretrained(checkpoint, add_pooling_layer=False)
            except Exception as exc:
                raise CheckpointUnavailable("deit", exc)
        else:
            model = DeiTModel(DeiTConfig(), add_pooling_layer=False)
        width = model.config.hidden_size
        tag = f"deit_b_distilled@{_weights_id(weights, seed, checkpoint)}"
        model = _DeiTPooled(model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, width, tag


class _DeiTPooled(torch.nn.Module):
    """Mean over the final hidden tokens (the HF pooler head is an extra
    randomly initialized layer, so it is not used)."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner

    def forward(self, pixel_values):
        return self.inner(pixel_values=pixel_values).last_hidden_state.mean(dim=1)


def build_resnet(weights: str, seed: int):
    from torchvision import models as tvm
    torch.manual_seed(seed + 1)
    try:
        w = tvm.ResNet18_Weights.IMAGENET1K_V1 if weights == "pretrained" else None
        model = tvm.resnet18(weights=w)
    except Exception as exc:
        raise CheckpointUnavailable("resnet18", exc)
    width = model.fc.in_features  # global average pool output, 512
    model.fc = torch.nn.Identity()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    tag = f"resnet18@{_weights_id(weights, seed, 'IMAGENET1K_V1')}"
    return model, width, tag
