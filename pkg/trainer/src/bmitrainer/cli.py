"""Trainer command line: train, finetune, export, make-fixtures.

Consumes the curation pipeline's artifacts (curated manifest, split file,
crop directories) and produces eager checkpoints, exported .pt2 artifacts
and per-epoch metrics CSVs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import CropDataset
from .export import export_model, read_artifact_metadata
from .finetune import STRATEGIES, finetune
from .model import BACKBONES, ModelSpec, build_model
from .train import TrainConfig, load_checkpoint, save_checkpoint, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bmitrainer",
                                     description="Train and export BMI regression models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--manifest", required=True, help="curated manifest (JSON Lines)")
        p.add_argument("--split-file", required=True)
        p.add_argument("--crops-dir", required=True)
        p.add_argument("--perspective", default="full_body")

    def add_train_flags(p):
        p.add_argument("--epochs", type=int, default=40)
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--learning-rate", type=float, default=1e-3)
        p.add_argument("--weight-decay", type=float, default=1e-4)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train from scratch (or pretrained init)")
    add_data_flags(p)
    add_train_flags(p)
    p.add_argument("--backbone", default="densenet201", choices=list(BACKBONES))
    p.add_argument("--se-reduction", type=int, default=16)
    p.add_argument("--pretrained", action="store_true",
                   help="initialize the backbone from pretrained weights "
                        "(requires download access)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("finetune", help="fine-tune a checkpoint under a freeze strategy")
    add_data_flags(p)
    add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--strategy", required=True, choices=list(STRATEGIES))
    p.add_argument("--out", required=True)

    p = sub.add_parser("export", help="export a checkpoint to a .pt2 artifact")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--artifact", required=True)

    p = sub.add_parser("inspect", help="print artifact metadata")
    p.add_argument("--artifact", required=True)

    p = sub.add_parser("make-fixtures", help="regenerate the inference-parity fixtures")
    p.add_argument("--out", required=True)

    return parser


def _datasets(args):
    train_ds = CropDataset(args.manifest, args.split_file, args.crops_dir,
                           args.perspective, "train")
    val_ds = CropDataset(args.manifest, args.split_file, args.crops_dir,
                         args.perspective, "val")
    if len(train_ds) == 0:
        raise SystemExit("no training samples found; check the crops directory and split file")
    return train_ds, (val_ds if len(val_ds) else None)


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.learning_rate,
                       weight_decay=args.weight_decay, seed=args.seed)


def _cmd_train(args) -> int:
    train_ds, val_ds = _datasets(args)
    model = build_model(ModelSpec(backbone=args.backbone, se_reduction=args.se_reduction,
                                  pretrained=args.pretrained))
    out = Path(args.out)
    result = train(model, train_ds, val_ds, _train_config(args),
                   metrics_csv=out / "epoch_metrics.csv")
    best = result.load_best()
    save_checkpoint(best, out / "checkpoint.pth")
    export_model(best, out / "model.pt2",
                 metadata={"best_epoch": result.best_epoch,
                           "best_val_loss": result.best_val_loss})
    last = result.history[-1]
    print(f"trained {args.backbone}: best val loss {result.best_val_loss:.4f} "
          f"(epoch {result.best_epoch}); final val MAPE {last.val_mape:.2f}%")
    return 0


def _cmd_finetune(args) -> int:
    train_ds, val_ds = _datasets(args)
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    result = finetune(model, train_ds, val_ds, args.strategy, _train_config(args),
                      metrics_csv=out / "epoch_metrics.csv")
    best = result.load_best()
    save_checkpoint(best, out / "checkpoint.pth")
    export_model(best, out / "model.pt2",
                 metadata={"finetune_strategy": args.strategy,
                           "best_epoch": result.best_epoch})
    print(f"finetuned ({args.strategy}): best val loss {result.best_val_loss:.4f}")
    return 0


def _cmd_export(args) -> int:
    model = load_checkpoint(args.checkpoint)
    export_model(model, args.artifact)
    print(f"exported {args.artifact}")
    return 0


def _cmd_inspect(args) -> int:
    import json

    print(json.dumps(read_artifact_metadata(args.artifact), indent=2))
    return 0


def _cmd_make_fixtures(args) -> int:
    from .fixtures import make_parity_fixtures

    info = make_parity_fixtures(args.out)
    print(f"wrote fixtures under {args.out}: {info}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    commands = {
        "train": _cmd_train,
        "finetune": _cmd_finetune,
        "export": _cmd_export,
        "inspect": _cmd_inspect,
        "make-fixtures": _cmd_make_fixtures,
    }
    return commands[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
