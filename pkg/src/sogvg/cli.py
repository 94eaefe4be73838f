"""Command-line entry point.

Commands: gen-data, train, eval, infer, visualize.  Behavior comes from a
sectioned config file plus --set overrides; every command writes its fully
resolved configuration into the output directory so a run can be reproduced
from its artifacts alone.  Exit codes: 0 success, 2 user or config error,
3 numerical failure during training.
"""

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from . import dataset as data_mod
from .config import RunConfig, apply_overrides, load_config, write_config
from .errors import (
    CheckpointError,
    ConfigError,
    GenerationError,
    InvalidInputError,
    ManifestError,
    NumericalError,
    SogvgError,
)
from .head import Box, decode_boxes, select_prediction
from .training import (
    Trainer,
    batch_tensors,
    build_model,
    evaluate,
    model_from_checkpoint,
)
from .viz import save_visualization

SEED_ENV_VAR = "SOG_SEED"


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    if getattr(args, "set", None):
        apply_overrides(cfg, args.set)
    seed_override = os.environ.get(SEED_ENV_VAR)
    if seed_override is not None:
        try:
            seed = int(seed_override)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {seed_override!r}") from exc
        cfg.train.seed = seed
        cfg.data.seed = seed
    return cfg


def _echo_config(cfg: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_config(cfg, os.path.join(out_dir, "config.ini"))


def _manifest_path(data_arg: str) -> str:
    if os.path.isdir(data_arg):
        return os.path.join(data_arg, "manifest.json")
    return data_arg


def _load_manifest(data_arg: str):
    path = _manifest_path(data_arg)
    if not os.path.exists(path):
        raise ManifestError(f"dataset manifest not found at {path}")
    return data_mod.read_manifest(path), os.path.dirname(path)


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    for flag, key in (
        ("seed", "seed"),
        ("n_train", "n_train"),
        ("n_val", "n_val"),
        ("n_test", "n_test"),
        ("image_size", "image_size"),
        ("hard_fraction", "hard_fraction"),
    ):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg.data, key, value)
    cfg.validate()
    _echo_config(cfg, args.out_dir)
    manifest = data_mod.generate_corpus(cfg.data, args.out_dir)
    n_hard = sum(1 for s in manifest.samples if s.hard)
    print(
        f"generated {len(manifest.samples)} samples "
        f"({cfg.data.n_train}/{cfg.data.n_val}/{cfg.data.n_test} train/val/test, "
        f"{n_hard} hard) under {args.out_dir}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.validate()
    manifest, root = _load_manifest(args.data)
    train_data = data_mod.load_split(manifest, root, "train")
    val_data = data_mod.load_split(manifest, root, "val")
    _echo_config(cfg, args.out_dir)

    meta = {
        "vocabulary": manifest.vocabulary,
        "anchors": manifest.anchors.to_json(),
        "image_size": manifest.image_size,
    }
    if args.resume:
        trainer = Trainer.from_checkpoint(
            args.resume,
            train_data,
            manifest.anchors,
            manifest.image_size,
            val_data=val_data,
            out_dir=args.out_dir,
        )
    else:
        model = build_model(cfg, vocab_size=len(manifest.vocabulary))
        trainer = Trainer(
            cfg,
            model,
            train_data,
            manifest.anchors,
            manifest.image_size,
            val_data=val_data,
            out_dir=args.out_dir,
            meta=meta,
        )
    records = trainer.fit()
    if records:
        last = records[-1]
        val = f" val Pr@0.5 {last.val_pr05:.4f}" if last.val_pr05 is not None else ""
        print(f"trained {trainer.epoch} epochs, final loss {last.loss_total:.4f}{val}")
    return 0


def cmd_eval(args) -> int:
    if args.erc_strategy != "original":
        raise ConfigError(
            f"evaluation requires --erc-strategy original, got {args.erc_strategy!r} "
            "(stochastic edges would make the metric irreproducible)"
        )
    model, cfg, meta = model_from_checkpoint(args.checkpoint)
    manifest, root = _load_manifest(args.data)
    if manifest.vocabulary != meta["vocabulary"]:
        raise ConfigError("checkpoint vocabulary does not match the dataset manifest")
    if manifest.image_size != meta["image_size"]:
        raise ConfigError(
            f"checkpoint expects {meta['image_size']}px images, "
            f"manifest has {manifest.image_size}px"
        )
    split_data = data_mod.load_split(manifest, root, args.split)
    _echo_config(cfg, args.out_dir)
    result = evaluate(model, split_data, manifest.anchors, manifest.image_size)
    with open(os.path.join(args.out_dir, "results.jsonl"), "w", encoding="utf-8") as f:
        for record in result.records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"Pr@0.5 = {result.pr05:.4f}")
    return 0


def cmd_infer(args) -> int:
    model, _, meta = model_from_checkpoint(args.checkpoint)
    try:
        image = Image.open(args.image).convert("RGB")
    except OSError as exc:
        raise InvalidInputError(f"cannot read image {args.image}: {exc}") from exc
    size = meta["image_size"]
    orig_w, orig_h = image.size
    resized = image.resize((size, size), Image.NEAREST)
    pixels = torch.from_numpy(
        np.asarray(resized, dtype=np.float32) / 255.0
    ).permute(2, 0, 1).unsqueeze(0)

    ids = data_mod.tokenize(args.expression, meta["vocabulary"])
    tokens = torch.tensor([ids], dtype=torch.int64)
    mask = torch.ones_like(tokens, dtype=torch.bool)
    from .head import AnchorSet

    anchors = AnchorSet.from_json(meta["anchors"])
    with torch.no_grad():
        out = model(pixels, tokens, mask)
    selected = select_prediction(decode_boxes(out.predictions, anchors))
    sx, sy = orig_w / size, orig_h / size
    print(
        f"x_min={selected.box.x_min * sx:.2f} y_min={selected.box.y_min * sy:.2f} "
        f"x_max={selected.box.x_max * sx:.2f} y_max={selected.box.y_max * sy:.2f} "
        f"confidence={selected.confidence:.6f}"
    )
    return 0


def cmd_visualize(args) -> int:
    model, cfg, meta = model_from_checkpoint(args.checkpoint)
    if model.sog is None:
        raise ConfigError("this checkpoint was trained without the graph; nothing to visualize")
    manifest, root = _load_manifest(args.data)
    record = next((s for s in manifest.samples if s.index == args.index), None)
    if record is None:
        raise InvalidInputError(f"no sample with index {args.index} in the manifest")

    from .head import AnchorSet

    anchors = AnchorSet.from_json(meta["anchors"])
    image = np.asarray(Image.open(os.path.join(root, record.image_path)).convert("RGB"))
    ids = data_mod.tokenize(record.expression, manifest.vocabulary)
    tokens = torch.tensor([ids], dtype=torch.int64)
    mask = torch.ones_like(tokens, dtype=torch.bool)
    pixels = torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        out = model(pixels, tokens, mask)
    selected = select_prediction(decode_boxes(out.predictions, anchors))
    diag_record = out.diagnostics.sample_record(0)
    diag_record["expression"] = record.expression
    diag_record["sample_index"] = record.index
    written = save_visualization(
        args.out_dir,
        image,
        out.state.c_bar[0, 0].numpy(),
        diag_record,
        record.expression.split(),
        selected.box,
        record.gt_box,
    )
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sogvg", description="visual grounding with a suspected-object graph"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--config", help="config file; [dataset] section applies")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--hard-fraction", dest="hard_fraction", type=float)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--data", required=True, help="corpus directory or manifest path")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--erc-strategy", default="original")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="ground one expression in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--expression", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("visualize", help="render diagnostics for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        out_dir = getattr(args, "out_dir", None)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            dump_path = os.path.join(out_dir, "failure.json")
            with open(dump_path, "w", encoding="utf-8") as f:
                json.dump(exc.diagnostics, f, indent=1, sort_keys=True)
            print(f"diagnostics written to {dump_path}", file=sys.stderr)
        return 3
    except SogvgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
