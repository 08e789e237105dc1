"""Image preprocessing: 224x224 resize, tensor conversion, ImageNet
normalization, and the optional training-time augmentation stack."""

from __future__ import annotations

from torchvision import transforms

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
TARGET_SIZE = (224, 224)

# Jitter strengths are unspecified upstream; moderate defaults.
_AUGMENT_OPS = [
    transforms.RandomRotation(30),
    transforms.RandomHorizontalFlip(0.5),
    transforms.RandomVerticalFlip(0.5),
    transforms.ColorJitter(brightness=0.2, contrast=0.2, saturation=0.2, hue=0.1),
    transforms.RandomAffine(degrees=0, translate=(0.1, 0.1)),
]


def build_transform(augment: bool = False) -> transforms.Compose:
    ops = [transforms.Resize(TARGET_SIZE)]
    if augment:
        ops.extend(_AUGMENT_OPS)
    ops.append(transforms.ToTensor())
    ops.append(transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD))
    return transforms.Compose(ops)


def preprocess(image, augment: bool = False):
    """PIL image -> normalized float tensor of shape (3, 224, 224)."""
    return build_transform(augment)(image.convert("RGB"))
