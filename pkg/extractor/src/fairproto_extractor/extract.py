"""Batch feature extraction: walk a folder of class subdirectories, run the
frozen backbones, and emit (or extend) a manifest file."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .backbones import build_resnet, build_vit
from .manifest import Manifest, Record, SPLITS, read_manifest, write_manifest
from .preprocess import build_transform

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}


@dataclass
class ExtractorConfig:
    image_root: str
    backbone: str = "swin"
    include_resnet: bool = True
    split: str = "support"
    augment: bool = False
    seed: int = 0
    weights: str = "pretrained"  # or "none" (seeded random init, offline)
    out: str = "embeddings.fpem"
    append: bool = False
    batch_size: int = 8
    min_per_class: int = 0  # exclude classes with fewer images (0 = keep all)
    max_per_class: int = 0  # cap images per class (0 = unlimited)


def list_classes(root: Path, min_per_class: int, max_per_class: int):
    """Sorted class subdirectories with their (sorted, capped) image paths."""
    if not root.is_dir():
        raise FileNotFoundError(f"image root not found: {root}")
    classes = []
    for child in sorted(root.iterdir()):
        if not child.is_dir():
            continue
        images = sorted(p for p in child.iterdir()
                        if p.suffix.lower() in IMAGE_SUFFIXES)
        if len(images) < max(min_per_class, 1):
            if images and len(images) < min_per_class:
                print(f"skipping class {child.name!r}: only {len(images)} images "
                      f"(minimum {min_per_class})", file=sys.stderr)
            continue
        if max_per_class > 0:
            images = images[:max_per_class]
        classes.append((child.name, images))
    if not classes:
        raise FileNotFoundError(f"no class subdirectories with images under {root}")
    return classes


def extract(config: ExtractorConfig) -> Manifest:
    if config.split not in SPLITS:
        raise ValueError(f"split must be one of {sorted(SPLITS)}, got {config.split!r}")
    if config.weights not in ("pretrained", "none"):
        raise ValueError(f"weights must be 'pretrained' or 'none', got {config.weights!r}")
    augment = config.augment and config.split == "train"
    if config.augment and not augment:
        print(f"augmentation is train-only; exporting split {config.split!r} "
              f"unaugmented", file=sys.stderr)

    vit, dim_vit, vit_tag = build_vit(config.backbone, config.weights, config.seed)
    if config.include_resnet:
        resnet, dim_resnet, resnet_tag = build_resnet(config.weights, config.seed)
        tag = f"{vit_tag}+{resnet_tag}"
    else:
        resnet, dim_resnet = None, 0
        tag = vit_tag

    classes = list_classes(Path(config.image_root), config.min_per_class,
                           config.max_per_class)
    class_table = {cid: name for cid, (name, _) in enumerate(classes)}
    transform = build_transform(augment)
    split_byte = SPLITS[config.split]

    records = []
    batch, meta = [], []

    def flush():
        if not batch:
            return
        x = torch.stack(batch)
        with torch.no_grad():
            vit_feat = vit(x)
            parts = [vit_feat]
            if resnet is not None:
                parts.append(resnet(x))
            fused = torch.cat(parts, dim=1)
        arr = fused.to(torch.float32).numpy()
        for row, (rec_id, cid) in zip(arr, meta):
            records.append(Record(rec_id, cid, split_byte, np.ascontiguousarray(row)))
        batch.clear()
        meta.clear()

    for cid, (name, images) in enumerate(classes):
        for path in images:
            try:
                with Image.open(path) as img:
                    tensor = transform(img.convert("RGB"))
            except (UnidentifiedImageError, OSError) as exc:
                print(f"skipping undecodable image {path}: {exc}", file=sys.stderr)
                continue
            batch.append(tensor)
            meta.append((f"{config.split}:{name}/{path.name}", cid))
            if len(batch) >= config.batch_size:
                flush()
    flush()

    manifest = Manifest(dim_vit, dim_resnet, tag, class_table, records)
    if config.append and Path(config.out).exists():
        manifest = merge_into_existing(config.out, manifest)
    write_manifest(manifest, config.out)
    return manifest


def merge_into_existing(path, new: Manifest) -> Manifest:
    """Extend an existing manifest; dims, tag, and class table must match."""
    existing = read_manifest(path)
    if (existing.dim_vit, existing.dim_resnet) != (new.dim_vit, new.dim_resnet):
        raise ValueError(f"cannot append: existing dims "
                         f"({existing.dim_vit}, {existing.dim_resnet}) differ from "
                         f"({new.dim_vit}, {new.dim_resnet})")
    if existing.backbone_tag != new.backbone_tag:
        raise ValueError(f"cannot append: existing backbone {existing.backbone_tag!r} "
                         f"differs from {new.backbone_tag!r}")
    if existing.class_table != new.class_table:
        raise ValueError("cannot append: class tables differ (same subdirectory "
                         "layout is required)")
    seen = {rec.id for rec in existing.records}
    duplicates = [rec.id for rec in new.records if rec.id in seen]
    if duplicates:
        raise ValueError(f"cannot append: duplicate record ids {duplicates[:3]}")
    return Manifest(new.dim_vit, new.dim_resnet, new.backbone_tag,
                    new.class_table, existing.records + new.records)
