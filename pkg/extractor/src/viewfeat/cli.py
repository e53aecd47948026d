"""Command line front end: `viewfeat extract` and `viewfeat finetune`.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

import torch

from .backbone import available_backbones
from .pipeline import ExtractorConfig, extract, finetune


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, f"error: {message}\n")


def _common_args(p):
    p.add_argument("--images", required=True, help="view image root directory")
    p.add_argument("--labels", required=True, help="tab-separated labels file")
    p.add_argument("--backbone", default="resnet18",
                   choices=available_backbones())
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pretrained", action="store_true",
                   help="load cached torchvision weights instead of seeded "
                        "random initialization")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viewfeat",
                     description="Export per-view CNN features for the "
                                 "view-set classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="write feature file + manifest")
    _common_args(p)
    p.add_argument("--out-features", required=True)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--dataset-name", default="views")
    p.add_argument("--weights", help="fine-tuned weights from `finetune`")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("finetune",
                       help="single-view classification fine-tuning")
    _common_args(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--out", required=True, help="weights output path")
    p.set_defaults(func=cmd_finetune)
    return parser


def _config(args) -> ExtractorConfig:
    return ExtractorConfig(
        backbone=args.backbone, image_size=args.image_size,
        batch_size=args.batch_size, seed=args.seed,
        pretrained=args.pretrained,
        epochs=getattr(args, "epochs", 30), lr=getattr(args, "lr", 0.01),
        weights_path=getattr(args, "weights", None))


def cmd_extract(args) -> int:
    if args.image_size < 32:
        print("error: --image-size must be >= 32", file=sys.stderr)
        return 1
    rows = extract(args.images, args.labels, args.out_features,
                   args.out_manifest, _config(args),
                   dataset_name=args.dataset_name)
    print(f"rows\t{rows}")
    return 0


def cmd_finetune(args) -> int:
    if args.epochs < 0:
        print("error: --epochs must be >= 0", file=sys.stderr)
        return 1
    result = finetune(args.images, args.labels, _config(args),
                      progress=lambda e, l: print(f"{e}\t{l:.6f}"))
    torch.save(result.state, args.out)
    print(f"train_accuracy\t{result.train_accuracy:.4f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
