"""Multi-class accuracy, evaluation results, and the ablation ladder runner.

The ladder trains the pipeline in five cumulative stages (plain softmax,
additive-margin classifier, mean teacher, two-model ensemble with
pseudo-labels, plate-balanced post-processing) across normalization groupings
and seeds, then reports per-stage accuracies and pairwise ordering verdicts
as JSON, plain text, and an SVG bar chart.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from . import assignment
from . import backbone as bb
from . import data
from . import ensemble
from . import trainer
from .errors import ConfigError, DataFormatError, ShapeError

log = logging.getLogger("platescope.metrics")

STAGES = ("softmax", "arcface", "mean_teacher", "ensemble_pseudo", "post_processed")

# Published full-scale accuracies (percent) of the five pipeline stages on the
# original 1,108-class screening benchmark. Shown in report banners for
# orientation only; desk-scale synthetic runs do not reproduce them.
REFERENCE_FULL_SCALE_PERCENT = {
    "softmax": 74.580,
    "arcface": 85.542,
    "mean_teacher": 90.145,
    "ensemble_pseudo": 95.535,
    "post_processed": 99.596,
}

REPORT_JSON_NAME = "report.json"
REPORT_TEXT_NAME = "report.txt"
REPORT_SVG_NAME = "report.svg"


def multiclass_accuracy(preds, labels) -> float:
    """Fraction of positions where prediction equals label."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.ndim != 1 or labels.ndim != 1:
        raise ShapeError(f"predictions and labels must be 1-d, got {list(preds.shape)} and {list(labels.shape)}")
    if preds.shape[0] != labels.shape[0]:
        raise ShapeError(f"length mismatch: {preds.shape[0]} predictions vs {labels.shape[0]} labels")
    if preds.shape[0] == 0:
        raise ShapeError("accuracy of an empty prediction set is undefined")
    return float(np.mean(preds == labels))


@dataclass
class EvalResult:
    """Accuracy plus its per-cell-type and confusion-count breakdown."""

    multiclass_accuracy: float
    per_cell_type: dict[int, float]
    confusion: np.ndarray  # [num_classes, num_classes]; rows true, cols predicted
    num_samples: int

    def to_dict(self) -> dict:
        return {
            "multiclass_accuracy": self.multiclass_accuracy,
            "per_cell_type": {str(ct): acc for ct, acc in sorted(self.per_cell_type.items())},
            "num_samples": self.num_samples,
            "confusion": self.confusion.tolist(),
        }


def evaluate(preds, labels, cell_types=None, num_classes: int | None = None) -> EvalResult:
    """Score integer predictions against labels, broken down by cell type."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    accuracy = multiclass_accuracy(preds, labels)
    if num_classes is None:
        num_classes = int(max(preds.max(), labels.max())) + 1
    if preds.min() < 0 or labels.min() < 0 or max(preds.max(), labels.max()) >= num_classes:
        raise ShapeError(f"class ids must lie in [0, {num_classes})")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    per_cell_type = {}
    if cell_types is not None:
        cell_types = np.asarray(cell_types, dtype=np.int64)
        if cell_types.shape != labels.shape:
            raise ShapeError("cell_types must align with labels")
        for ct in np.unique(cell_types):
            mask = cell_types == ct
            per_cell_type[int(ct)] = float(np.mean(preds[mask] == labels[mask]))
    return EvalResult(
        multiclass_accuracy=accuracy,
        per_cell_type=per_cell_type,
        confusion=confusion,
        num_samples=int(labels.shape[0]),
    )


def evaluate_mapping(mapping: dict[int, int], manifest: data.DatasetManifest, split: str = "test") -> EvalResult:
    """Score an image_index -> class map against a split's ground truth."""
    records = manifest.split_records(split)
    if not records:
        raise DataFormatError(f"no records in split '{split}'")
    missing = [r.image_index for r in records if r.image_index not in mapping]
    if missing:
        raise DataFormatError(f"missing predictions for image_index {missing[:4]}")
    if any(r.class_label is None for r in records):
        raise DataFormatError(f"split '{split}' has records without ground-truth labels")
    preds = np.array([mapping[r.image_index] for r in records])
    labels = np.array([r.class_label for r in records])
    cell_types = np.array([r.cell_type for r in records])
    return evaluate(preds, labels, cell_types, num_classes=manifest.num_classes)


# --- ablation ladder ---------------------------------------------------------


def _stage_train_config(base: trainer.TrainConfig, stage: str, seed: int) -> trainer.TrainConfig:
    over: dict = {"seed": seed}
    if stage == "softmax":
        over.update(classifier="softmax", consistency_weight_max=0.0, pseudo_label_weight=0.0, ema_decay=0.0)
    elif stage == "arcface":
        over.update(classifier="arcface", consistency_weight_max=0.0, pseudo_label_weight=0.0, ema_decay=0.0)
    elif stage == "mean_teacher":
        over.update(classifier="arcface", pseudo_label_weight=0.0)
    elif stage in ("ensemble_pseudo", "post_processed"):
        over.update(classifier="arcface")
    else:
        raise ConfigError(f"unknown ladder stage '{stage}'")
    return trainer.TrainConfig(**{**base.to_dict(), **over})


def _test_truth(manifest: data.DatasetManifest):
    records = manifest.split_records("test")
    idx = np.array([r.image_index for r in records], dtype=np.intp)
    labels = np.array([r.class_label for r in records], dtype=np.int64)
    cell_types = np.array([r.cell_type for r in records], dtype=np.int64)
    return idx, labels, cell_types


def _run_ladder_cell(
    manifest: data.DatasetManifest,
    normed: np.ndarray,
    backbone_config: bb.BackboneConfig,
    base_config: trainer.TrainConfig,
    stages,
    seed: int,
    hide_label_fraction: float,
    epochs: int,
) -> dict[str, EvalResult]:
    """Train every requested stage once on one normalized dataset + seed."""
    results: dict[str, EvalResult] = {}
    test_idx, test_labels, test_cells = _test_truth(manifest)
    single_stages = [s for s in stages if s in ("softmax", "arcface", "mean_teacher")]
    for stage in single_stages:
        cfg = _stage_train_config(base_config, stage, seed)
        td = trainer.assemble_training_data(manifest, normed, hide_label_fraction=hide_label_fraction, seed=seed)
        state = trainer.init_trainer(backbone_config, cfg)
        for _ in range(epochs):
            trainer.train_epoch(state, td)
        probs = trainer.predict_probs(state.teacher, td.images, test_idx, cfg)
        results[stage] = evaluate(np.argmax(probs, axis=1), test_labels, test_cells, manifest.num_classes)
        log.info("ladder stage=%s seed=%d accuracy=%.4f", stage, seed, results[stage].multiclass_accuracy)
    if "ensemble_pseudo" in stages or "post_processed" in stages:
        cfg = _stage_train_config(base_config, "ensemble_pseudo", seed)
        td = trainer.assemble_training_data(manifest, normed, hide_label_fraction=hide_label_fraction, seed=seed)
        ens = ensemble.init_ensemble(backbone_config, cfg)
        ensemble.run_training(ens, td, epochs=epochs)
        probs = ensemble.ensemble_predict(ens.members, td.images, test_idx)
        if "ensemble_pseudo" in stages:
            results["ensemble_pseudo"] = evaluate(np.argmax(probs, axis=1), test_labels, test_cells, manifest.num_classes)
            log.info("ladder stage=ensemble_pseudo seed=%d accuracy=%.4f", seed, results["ensemble_pseudo"].multiclass_accuracy)
        if "post_processed" in stages:
            predictions = {int(i): probs[row] for row, i in enumerate(test_idx)}
            mapping = assignment.apply_postprocess(predictions, manifest, split="test")
            results["post_processed"] = evaluate_mapping(mapping, manifest, split="test")
            log.info("ladder stage=post_processed seed=%d accuracy=%.4f", seed, results["post_processed"].multiclass_accuracy)
    return results


def run_ablation_ladder(
    manifest: data.DatasetManifest,
    images: np.ndarray,
    backbone_config: bb.BackboneConfig,
    train_config: trainer.TrainConfig,
    stages=STAGES,
    normalizations=("plate",),
    seeds=(0, 1, 2, 3, 4),
    hide_label_fraction: float = 0.3,
    epochs: int | None = None,
) -> dict:
    """Run the staged pipeline per normalization and seed; return the report.

    The report dict carries per-run accuracy rows, per-stage means, pairwise
    stage verdicts (how many seeds preserved each consecutive ordering), and
    normalization-ordering verdicts for the first stage when several
    groupings are swept.
    """
    stages = tuple(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown ladder stages {unknown}")
    if epochs is None:
        epochs = train_config.total_epochs
    rows = []
    cells: dict[tuple[str, int], dict[str, EvalResult]] = {}
    for grouping in normalizations:
        stats = data.compute_norm_stats(manifest, images, grouping)
        normed = data.normalize_all(manifest, images, stats)
        for seed in seeds:
            results = _run_ladder_cell(
                manifest, normed, backbone_config, train_config, stages, seed, hide_label_fraction, epochs
            )
            cells[(grouping, seed)] = results
            for stage in stages:
                res = results[stage]
                rows.append(
                    {
                        "normalization": grouping,
                        "seed": seed,
                        "stage": stage,
                        "accuracy": res.multiclass_accuracy,
                        "per_cell_type": {str(ct): acc for ct, acc in sorted(res.per_cell_type.items())},
                        "num_samples": res.num_samples,
                    }
                )
    stage_means = {
        grouping: {
            stage: float(np.mean([cells[(grouping, seed)][stage].multiclass_accuracy for seed in seeds]))
            for stage in stages
        }
        for grouping in normalizations
    }
    verdicts = {}
    for grouping in normalizations:
        pairs = []
        for lower, upper in zip(stages, stages[1:]):
            wins = sum(
                cells[(grouping, seed)][upper].multiclass_accuracy
                >= cells[(grouping, seed)][lower].multiclass_accuracy
                for seed in seeds
            )
            pairs.append({"pair": f"{upper} >= {lower}", "wins": int(wins), "seeds": len(seeds)})
        verdicts[grouping] = pairs
    normalization_verdicts = []
    if len(normalizations) > 1:
        first = stages[0]
        for weaker, stronger in zip(normalizations, normalizations[1:]):
            wins = sum(
                cells[(stronger, seed)][first].multiclass_accuracy
                > cells[(weaker, seed)][first].multiclass_accuracy
                for seed in seeds
            )
            normalization_verdicts.append(
                {"pair": f"{stronger} > {weaker}", "stage": first, "wins": int(wins), "seeds": len(seeds)}
            )
    return {
        "reference_full_scale_percent": dict(REFERENCE_FULL_SCALE_PERCENT),
        "stages": list(stages),
        "normalizations": list(normalizations),
        "seeds": list(seeds),
        "hide_label_fraction": hide_label_fraction,
        "epochs": epochs,
        "rows": rows,
        "stage_means": stage_means,
        "stage_verdicts": verdicts,
        "normalization_verdicts": normalization_verdicts,
    }


# --- report writers ----------------------------------------------------------


def write_report_json(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def format_report_text(report: dict) -> str:
    lines = ["pipeline stage ladder", ""]
    lines.append("full-scale reference accuracies (percent, original benchmark, not reproduced here):")
    for stage in report["stages"]:
        ref = report["reference_full_scale_percent"].get(stage)
        if ref is not None:
            lines.append(f"  {stage:<16} {ref:7.3f}")
    lines.append("")
    header = f"{'normalization':<14} {'stage':<16} " + " ".join(f"seed{seed:<3}" for seed in report["seeds"]) + "   mean"
    lines.append(header)
    lines.append("-" * len(header))
    by_key = {(r["normalization"], r["seed"], r["stage"]): r["accuracy"] for r in report["rows"]}
    for grouping in report["normalizations"]:
        for stage in report["stages"]:
            accs = [by_key[(grouping, seed, stage)] for seed in report["seeds"]]
            cells = " ".join(f"{a:7.4f}" for a in accs)
            lines.append(f"{grouping:<14} {stage:<16} {cells} {report['stage_means'][grouping][stage]:7.4f}")
    lines.append("")
    for grouping in report["normalizations"]:
        for pair in report["stage_verdicts"][grouping]:
            holds = "holds" if pair["wins"] * 2 > pair["seeds"] else "FAILS"
            lines.append(f"[{grouping}] {pair['pair']}: {pair['wins']}/{pair['seeds']} seeds ({holds})")
    for pair in report["normalization_verdicts"]:
        holds = "holds" if pair["wins"] * 2 > pair["seeds"] else "FAILS"
        lines.append(f"[stage {pair['stage']}] {pair['pair']}: {pair['wins']}/{pair['seeds']} seeds ({holds})")
    return "\n".join(lines) + "\n"


def write_report_text(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report_text(report))


def format_report_svg(report: dict) -> str:
    """Hand-rolled grouped bar chart of per-stage mean accuracy."""
    stages = report["stages"]
    groupings = report["normalizations"]
    margin, bar_w, gap, group_gap, chart_h = 40, 34, 6, 24, 240
    group_w = len(groupings) * (bar_w + gap) - gap
    width = margin * 2 + len(stages) * (group_w + group_gap) - group_gap
    height = chart_h + 2 * margin + 20
    palette = ("#4878a8", "#e49444", "#5fa052")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{margin + chart_h}" x2="{width - margin}" y2="{margin + chart_h}" stroke="black"/>',
    ]
    for i, stage in enumerate(stages):
        gx = margin + i * (group_w + group_gap)
        for g, grouping in enumerate(groupings):
            acc = report["stage_means"][grouping][stage]
            h = int(round(acc * chart_h))
            x = gx + g * (bar_w + gap)
            y = margin + chart_h - h
            color = palette[g % len(palette)]
            parts.append(f'<rect x="{x}" y="{y}" width="{bar_w}" height="{h}" fill="{color}"/>')
            parts.append(
                f'<text x="{x + bar_w // 2}" y="{y - 4}" font-size="10" text-anchor="middle">{acc:.3f}</text>'
            )
        parts.append(
            f'<text x="{gx + group_w // 2}" y="{margin + chart_h + 16}" font-size="11" '
            f'text-anchor="middle">{escape(stage)}</text>'
        )
    for g, grouping in enumerate(groupings):
        x = margin + g * 120
        y = height - 12
        parts.append(f'<rect x="{x}" y="{y - 9}" width="10" height="10" fill="{palette[g % len(palette)]}"/>')
        parts.append(f'<text x="{x + 14}" y="{y}" font-size="11">{escape(grouping)} normalization</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report_svg(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report_svg(report))


def write_report(out_dir, report: dict) -> None:
    """Write report.json, report.txt, and report.svg into a directory."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    write_report_json(os.path.join(out_dir, REPORT_JSON_NAME), report)
    write_report_text(os.path.join(out_dir, REPORT_TEXT_NAME), report)
    write_report_svg(os.path.join(out_dir, REPORT_SVG_NAME), report)
