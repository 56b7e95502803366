"""Bridge CLI: export-features | train-refiner | serve-refine.

``serve-refine CHECKPOINT`` is designed to be used as the main pipeline's
PNI_BRIDGE_CMD: the pipeline appends the bridge directory as the final
argument.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backbones import BackboneSpec, export_features
from .refiner import new_identity_checkpoint, serve_refine, train_refiner


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pni-bridge",
        description="backbone feature export and map refinement bridge",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-features",
                       help="write per-level PNIT features for a directory of images")
    p.add_argument("image_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--backbone", default="wide_resnet101_2")
    p.add_argument("--levels", default="2,3")
    p.add_argument("--resize", type=int, default=512)
    p.add_argument("--crop", type=int, default=480)
    p.add_argument("--no-pretrained", action="store_true",
                   help="randomly initialized backbone (shape/contract runs)")
    p.add_argument("--weights", type=Path, help="local state-dict file")

    p = sub.add_parser("train-refiner",
                       help="fit the refiner on refine-data defect triples")
    p.add_argument("samples_dir", type=Path)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base", type=int, default=16)
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("init-refiner",
                       help="write an untrained pass-through checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--base", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve-refine",
                       help="answer one bridge-directory refinement request")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("bridge_dir", type=Path)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export-features":
            spec = BackboneSpec(
                name=args.backbone,
                levels=tuple(int(v) for v in args.levels.split(",")),
                resize_to=args.resize, crop_to=args.crop,
                pretrained=not args.no_pretrained,
                weights_path=str(args.weights) if args.weights else None,
            )
            exported, errors = export_features(spec, args.image_dir, args.out_dir)
            for name, message in errors.items():
                print(f"skipped {name}: {message}", file=sys.stderr)
            print(f"exported {len(exported)} images to {args.out_dir} "
                  f"({len(errors)} skipped)")
        elif args.command == "train-refiner":
            history = train_refiner(
                args.samples_dir, args.checkpoint, epochs=args.epochs,
                lr=args.lr, batch_size=args.batch, seed=args.seed,
                augment=not args.no_augment, base=args.base,
            )
            losses = ", ".join(f"{v:.5f}" for v in history)
            print(f"trained refiner -> {args.checkpoint} (epoch losses: {losses})")
        elif args.command == "init-refiner":
            new_identity_checkpoint(args.checkpoint, base=args.base, seed=args.seed)
            print(f"wrote pass-through checkpoint {args.checkpoint}")
        elif args.command == "serve-refine":
            serve_refine(args.checkpoint, args.bridge_dir)
            print(f"refined map written to {args.bridge_dir}/refined_map.pnit")
        return 0
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
