"""Command-line interface for the plate-image classification pipeline.

Subcommands: ``generate`` (synthetic dataset to disk), ``train`` (two-model
mean-teacher ensemble, checkpoints + logs), ``evaluate`` (test-split
predictions and accuracy files), ``postprocess`` (plate-balanced assignment
CSV from a predictions file), ``ablation`` (staged pipeline report), and
``config`` (resolved configuration dump). Exit codes: 0 success, 2 missing
file, 3 malformed configuration or usage, 4 violated data/shape/numeric
invariant. Log lines go to stderr as ``ISO8601 LEVEL message``; results are
written to files only.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import assignment
from . import backbone as bb
from . import config as config_mod
from . import data
from . import ensemble
from . import metrics
from . import trainer
from .errors import ConfigError, DataFormatError, PlatescopeError

log = logging.getLogger("platescope.cli")

CONFIG_NAME = "config.json"
STATS_NAME = "stats.json"
HISTORY_NAME = "history.json"
PSEUDO_NAME = "pseudo_labels.json"
PREDICTIONS_NAME = "predictions.json"
EVAL_NAME = "eval.json"


def _member_name(k: int) -> str:
    return f"member_{k}.ckpt"


class _Parser(argparse.ArgumentParser):
    """argparse that exits with code 3 on usage errors (unknown flags etc.)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(3, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="platescope", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_config_options(p):
        p.add_argument("--config", help="JSON config file (defaults used when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", dest="overrides", help="dotted config override, e.g. train.base_lr=1e-3")

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    add_config_options(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the ensemble; writes checkpoints and logs")
    add_config_options(p)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained model directory on the test split")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--out-dir", help="defaults to the model directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("postprocess", help="plate-balance a predictions file into a CSV")
    p.add_argument("--predictions", required=True, help="JSON map image_index -> probability row")
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("ablation", help="run the staged pipeline ladder and write reports")
    add_config_options(p)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("config", help="print or write the fully resolved configuration")
    add_config_options(p)
    p.add_argument("--dump-defaults", action="store_true", help="print resolved config to stdout")
    p.add_argument("--out", help="write resolved config to a file")
    p.set_defaults(func=cmd_config)
    return parser


def _resolve_config(args) -> config_mod.RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    else:
        raw = config_mod.default_config().to_dict()
    raw = config_mod.apply_overrides(raw, getattr(args, "overrides", None))
    return config_mod.from_dict(raw)


def _backbone_config(cfg: config_mod.RunConfig, manifest: data.DatasetManifest) -> bb.BackboneConfig:
    return bb.BackboneConfig(num_classes=manifest.num_classes, input_channels=manifest.channels, **cfg.backbone)


def _member_configs(cfg: config_mod.RunConfig, manifest: data.DatasetManifest):
    base = _backbone_config(cfg, manifest)
    pairs = []
    for k, wm in enumerate(cfg.width_multipliers):
        bcfg = bb.BackboneConfig(**{**base.to_dict(), "width_multiplier": float(wm)})
        tcfg = trainer.TrainConfig(**{**cfg.train.to_dict(), "seed": cfg.train.seed + k})
        pairs.append((bcfg, tcfg))
    return pairs


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    manifest, images = data.generate_synthetic(cfg.synthetic)
    data.write_dataset(args.out_dir, manifest, images)
    log.info(
        "generated %d images (%d classes, %d plates) into %s",
        manifest.num_images,
        manifest.num_classes,
        len(manifest.plate_keys()),
        args.out_dir,
    )
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest, images = data.read_dataset(args.dataset_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    stats = data.compute_norm_stats(manifest, images, cfg.normalization)
    data.write_norm_stats(out / STATS_NAME, stats)
    normed = data.normalize_all(manifest, images, stats)
    td = trainer.assemble_training_data(
        manifest, normed, hide_label_fraction=cfg.train.hide_label_fraction, seed=cfg.train.seed
    )
    state = ensemble.init_ensemble(_backbone_config(cfg, manifest), cfg.train, cfg.width_multipliers)
    history = ensemble.run_training(state, td, epochs=cfg.train.total_epochs, pseudo_dump_path=out / PSEUDO_NAME)

    for k, member in enumerate(state.members):
        trainer.save_checkpoint(out / _member_name(k), member)
    _write_json(out / HISTORY_NAME, history)
    config_mod.dump(out / CONFIG_NAME, cfg)
    log.info("trained %d epochs; best validation accuracy %.4f", cfg.train.total_epochs, state.best_val_accuracy)
    return 0


def _load_members(model_dir: Path, cfg: config_mod.RunConfig, manifest: data.DatasetManifest):
    members = []
    for k, (bcfg, tcfg) in enumerate(_member_configs(cfg, manifest)):
        members.append(trainer.load_checkpoint(model_dir / _member_name(k), bcfg, tcfg))
    return members


def cmd_evaluate(args) -> int:
    model_dir = Path(args.model_dir)
    cfg = config_mod.load(model_dir / CONFIG_NAME)
    manifest, images = data.read_dataset(args.dataset_dir)
    stats = data.read_norm_stats(model_dir / STATS_NAME)
    normed = data.normalize_all(manifest, images, stats)
    members = _load_members(model_dir, cfg, manifest)

    records = manifest.split_records("test")
    test_idx = np.array([r.image_index for r in records], dtype=np.intp)
    probs = ensemble.ensemble_predict(members, normed, test_idx)
    result = metrics.evaluate(
        np.argmax(probs, axis=1),
        np.array([r.class_label for r in records]),
        np.array([r.cell_type for r in records]),
        num_classes=manifest.num_classes,
    )

    out = Path(args.out_dir) if args.out_dir else model_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / PREDICTIONS_NAME, {str(int(i)): probs[row].tolist() for row, i in enumerate(test_idx)})
    _write_json(out / EVAL_NAME, result.to_dict())
    log.info("test accuracy %.4f over %d wells", result.multiclass_accuracy, result.num_samples)
    return 0


def _read_manifest(dataset_dir) -> data.DatasetManifest:
    path = Path(dataset_dir) / data.MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file: {path}")
    try:
        return data.DatasetManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc}") from exc


def cmd_postprocess(args) -> int:
    predictions_path = Path(args.predictions)
    if not predictions_path.exists():
        raise FileNotFoundError(f"predictions file not found: {predictions_path}")
    manifest = _read_manifest(args.dataset_dir)
    try:
        raw = json.loads(predictions_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{predictions_path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataFormatError(f"{predictions_path}: expected an object mapping image_index to probabilities")
    try:
        predictions = {int(k): np.asarray(v, dtype=np.float64) for k, v in raw.items()}
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"{predictions_path}: {exc}") from exc

    mapping = assignment.apply_postprocess(predictions, manifest, split=args.split)
    assignment.write_assignment_csv(args.out, mapping)
    records = manifest.split_records(args.split)
    if records and all(r.class_label is not None for r in records):
        result = metrics.evaluate_mapping(mapping, manifest, split=args.split)
        log.info("balanced accuracy %.4f over %d wells", result.multiclass_accuracy, result.num_samples)
    log.info("wrote %d assignments to %s", len(mapping), args.out)
    return 0


def cmd_ablation(args) -> int:
    cfg = _resolve_config(args)
    manifest, images = data.read_dataset(args.dataset_dir)
    ladder = cfg.ablation
    epochs = ladder["epochs"] if ladder["epochs"] is not None else cfg.train.total_epochs
    report = metrics.run_ablation_ladder(
        manifest,
        images,
        _backbone_config(cfg, manifest),
        cfg.train,
        stages=tuple(ladder["stages"]),
        normalizations=tuple(ladder["normalizations"]),
        seeds=tuple(ladder["seeds"]),
        hide_label_fraction=ladder["hide_label_fraction"],
        epochs=epochs,
    )
    metrics.write_report(args.out_dir, report)
    log.info("ablation report written to %s", args.out_dir)
    return 0


def cmd_config(args) -> int:
    cfg = _resolve_config(args)
    text = config_mod.dumps(cfg)
    wrote = False
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        wrote = True
    if args.dump_defaults or not wrote:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"platescope: error: missing-file: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"platescope: error: config: {exc}", file=sys.stderr)
        return 3
    except PlatescopeError as exc:
        print(f"platescope: error: invariant: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
