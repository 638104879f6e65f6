"""Command line: pretrain a backbone, fine-tune, emit prediction files."""

from __future__ import annotations

import argparse
import sys

import torch

from . import classify, contrastive, data
from .config import AugmentationPolicy, load_config


def _cmd_pretrain(args) -> int:
    cfg = load_config(args.config, encoder=args.encoder, seed=args.seed,
                      pretrain_epochs=args.epochs, learning_rate=args.lr,
                      variant=args.variant)
    crops = data.read_manifest(args.manifest)
    images = data.load_images(crops, args.crops_root)
    policy = AugmentationPolicy(seed=cfg.seed)
    encoder, history = contrastive.pretrain_backbone(images, cfg, policy,
                                                     max_steps=args.max_steps)
    torch.save({"encoder": cfg.encoder, "state": encoder.state_dict()}, args.out)
    print(f"pretrained {cfg.encoder} on {len(images)} crops: "
          f"loss {history[0]:.4f} -> {history[-1]:.4f} ({len(history)} steps)")
    return 0


def _cmd_fit(args) -> int:
    cfg = load_config(args.config, encoder=args.encoder, seed=args.seed,
                      epochs=args.epochs, learning_rate=args.lr,
                      variant=args.variant, grouping=args.group)
    manifest = data.read_manifest(args.manifest)
    split = data.read_split(args.plan)
    if args.balanced:
        train_crops = data.read_manifest(args.balanced)
    else:
        train_crops, _ = classify.select_sides(manifest, split)
    _, test_crops = classify.select_sides(manifest, split)

    backbone = None
    if cfg.needs_pretrained:
        if not args.backbone:
            print("error: OODp variants need --backbone", file=sys.stderr)
            return 2
        saved = torch.load(args.backbone, weights_only=True)
        from .models import build_encoder
        backbone = build_encoder(saved["encoder"])
        backbone.load_state_dict(saved["state"])

    result = classify.train_classifier(train_crops, test_crops, args.crops_root,
                                       cfg, backbone=backbone)
    data.write_predictions(args.out, result.test_crops, result.test_scores,
                           class_space=cfg.grouping, seed=split.seed,
                           model_tag=cfg.variant)
    print(f"trained {cfg.variant} ({cfg.grouping}-class) on "
          f"{len(train_crops)} crops, train F1 {result.train_f1:.3f}; "
          f"wrote {len(result.test_crops)} predictions")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="croptrain",
        description="contrastive pretraining + multi-label fine-tuning "
                    "on lesion crop datasets",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("pretrain", help="self-supervised encoder pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--crops-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--encoder", default=None)
    p.add_argument("--variant", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("fit", help="fine-tune and emit a prediction file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--balanced", default=None,
                   help="balanced train manifest (JSONL)")
    p.add_argument("--crops-root", required=True)
    p.add_argument("--backbone", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--encoder", default=None)
    p.add_argument("--variant", default=None)
    p.add_argument("--group", type=int, choices=(5, 3), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_fit)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
