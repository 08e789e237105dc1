"""`extract` command: images in class subfolders -> embedding manifest."""

from __future__ import annotations

import argparse
import sys

from .backbones import CheckpointUnavailable
from .extract import ExtractorConfig, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extract",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        description="Export fused transformer+ResNet embeddings from an image "
                    "folder (one subdirectory per class) into a manifest file.")
    parser.add_argument("--root", required=True, help="directory of class subfolders")
    parser.add_argument("--backbone", choices=("swin", "deit", "vt"), default="swin")
    parser.add_argument("--resnet", action=argparse.BooleanOptionalAction, default=True,
                        help="append the ResNet-18 pooled feature block")
    parser.add_argument("--split", choices=("train", "val", "support", "query"),
                        default="support", help="split tag for the exported records")
    parser.add_argument("--out", required=True, help="output manifest path")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--augment", action=argparse.BooleanOptionalAction,
                        default=False, help="train-split only; other splits export "
                                            "deterministically")
    parser.add_argument("--weights", choices=("pretrained", "none"), default="pretrained",
                        help="'none' = seeded random init (offline; same widths)")
    parser.add_argument("--append", action="store_true",
                        help="extend an existing manifest (dims/tag/classes must match)")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--min-per-class", type=int, default=0,
                        help="exclude classes with fewer images (0 = keep all)")
    parser.add_argument("--max-per-class", type=int, default=0,
                        help="cap images per class (0 = unlimited)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ExtractorConfig(
        image_root=args.root, backbone=args.backbone, include_resnet=args.resnet,
        split=args.split, augment=args.augment, seed=args.seed, weights=args.weights,
        out=args.out, append=args.append, batch_size=args.batch_size,
        min_per_class=args.min_per_class, max_per_class=args.max_per_class)
    try:
        manifest = extract(config)
    except CheckpointUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {config.out}: {len(manifest.records)} records, "
          f"{len(manifest.class_table)} classes, dims "
          f"{manifest.dim_vit}+{manifest.dim_resnet}, tag {manifest.backbone_tag}")
    return 0


def entrypoint() -> None:
    sys.exit(main())
