"""Two-model teacher ensemble with validation-gated pseudo-label refresh.

Two mean-teacher trainers (base width and a widened variant by default) run
side by side. Predictions average the members' teacher softmax outputs.
Whenever ensemble validation accuracy strictly improves on the best seen so
far, the unlabeled pool is re-predicted, balanced per plate so every class is
used exactly once, and the resulting hard labels become the pseudo-label set
the members train against from then on.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import assignment
from . import backbone as bb
from . import trainer
from .errors import ConfigError, DataFormatError

log = logging.getLogger("platescope.ensemble")

DEFAULT_WIDTH_MULTIPLIERS = (1.0, 2.0)


@dataclass
class EnsembleState:
    """Member trainers plus the shared pseudo-label pool and its gate."""

    members: list[trainer.TrainerState]
    pseudo_labels: dict[int, tuple[int, bool]] = field(default_factory=dict)
    best_val_accuracy: float = float("-inf")

    def num_classes(self) -> int:
        counts = {m.backbone_config.num_classes for m in self.members}
        if len(counts) != 1:
            raise ConfigError(f"ensemble members disagree on class count: {sorted(counts)}")
        return counts.pop()


def init_ensemble(
    backbone_config: bb.BackboneConfig,
    train_config: trainer.TrainConfig,
    width_multipliers=DEFAULT_WIDTH_MULTIPLIERS,
) -> EnsembleState:
    """Build one trainer per width multiplier with distinct member seeds."""
    if not width_multipliers:
        raise ConfigError("ensemble needs at least one member")
    members = []
    for k, wm in enumerate(width_multipliers):
        bcfg = bb.BackboneConfig(**{**backbone_config.to_dict(), "width_multiplier": float(wm)})
        tcfg = trainer.TrainConfig(**{**train_config.to_dict(), "seed": train_config.seed + k})
        members.append(trainer.init_trainer(bcfg, tcfg))
    return EnsembleState(members=members)


def ensemble_predict(
    members: list[trainer.TrainerState],
    images: np.ndarray,
    idx: np.ndarray,
    batch_size: int | None = None,
) -> np.ndarray:
    """Arithmetic mean of every member teacher's softmax probabilities."""
    if not members:
        raise ConfigError("ensemble needs at least one member")
    counts = {m.backbone_config.num_classes for m in members}
    if len(counts) != 1:
        raise ConfigError(f"ensemble members disagree on class count: {sorted(counts)}")
    total = None
    for m in members:
        probs = trainer.predict_probs(m.teacher, images, idx, m.train_config, batch_size=batch_size)
        total = probs if total is None else total + probs
    return total / len(members)


def _validation_truth(data: trainer.TrainingData) -> np.ndarray:
    if data.val_idx.size == 0:
        raise DataFormatError("no validation wells to score against")
    truth = np.empty(data.val_idx.size, dtype=np.int64)
    for row, image_index in enumerate(data.val_idx):
        label = data.manifest.records[int(image_index)].class_label
        if label is None:
            raise DataFormatError(f"validation image {int(image_index)} has no ground-truth label")
        truth[row] = label
    return truth


def validation_accuracy(state: EnsembleState, data: trainer.TrainingData) -> float:
    """Fraction of validation wells whose averaged-teacher argmax is correct."""
    truth = _validation_truth(data)
    probs = ensemble_predict(state.members, data.images, data.val_idx, batch_size=state.members[0].train_config.batch_size)
    return float(np.mean(np.argmax(probs, axis=1) == truth))


def maybe_refresh_pseudo_labels(
    state: EnsembleState,
    data: trainer.TrainingData,
    dump_path=None,
    accuracy: float | None = None,
) -> bool:
    """Refresh pseudo-labels iff validation accuracy strictly improved.

    On refresh the unlabeled pool is predicted by the ensemble, balanced per
    plate, and stored as confident hard labels; ``dump_path`` additionally
    receives a JSON audit map image_index -> class. Returns whether a refresh
    happened. ``accuracy`` short-circuits the validation forward pass when the
    caller already computed it.
    """
    if accuracy is None:
        accuracy = validation_accuracy(state, data)
    if not accuracy > state.best_val_accuracy:
        return False
    state.best_val_accuracy = accuracy
    if data.unlabeled_idx.size:
        probs = ensemble_predict(state.members, data.images, data.unlabeled_idx, batch_size=state.members[0].train_config.batch_size)
        predictions = {int(image_index): probs[row] for row, image_index in enumerate(data.unlabeled_idx)}
        mapping = assignment.apply_postprocess(predictions, data.manifest, wells=data.unlabeled_idx)
    else:
        mapping = {}
    state.pseudo_labels = {image_index: (label, True) for image_index, label in sorted(mapping.items())}
    if dump_path is not None:
        payload = {str(image_index): label for image_index, label in sorted(mapping.items())}
        with open(dump_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    log.info("pseudo-labels refreshed: val_accuracy=%.4f pool=%d", accuracy, len(mapping))
    return True


def train_ensemble_epoch(state: EnsembleState, data: trainer.TrainingData) -> list[dict]:
    """Advance every member one epoch against the current pseudo-labels."""
    return [trainer.train_epoch(m, data, pseudo_labels=state.pseudo_labels) for m in state.members]


def run_training(
    state: EnsembleState,
    data: trainer.TrainingData,
    epochs: int,
    pseudo_dump_path=None,
) -> list[dict]:
    """Epoch loop: refresh gate after each epoch, members share pseudo-labels."""
    history = []
    for _ in range(epochs):
        stats = train_ensemble_epoch(state, data)
        accuracy = validation_accuracy(state, data)
        refreshed = maybe_refresh_pseudo_labels(state, data, dump_path=pseudo_dump_path, accuracy=accuracy)
        history.append(
            {
                "epoch": state.members[0].epoch,
                "members": stats,
                "val_accuracy": accuracy,
                "best_val_accuracy": state.best_val_accuracy,
                "refreshed": refreshed,
            }
        )
    return history
