"""Scikit-learn style facade over the training pipeline.

Three estimators cover the workflow: ``GroupStandardizer`` learns per-group
per-channel statistics from the training split and standardizes images;
``MeanTeacherClassifier`` trains the two-model mean-teacher ensemble and
predicts class probabilities; ``PlateBalancer`` converts probabilities into
plate-balanced hard assignments. All follow the fit/transform/predict and
``get_params`` conventions so they compose with standard tooling; the plate
structure travels through the ``manifest`` keyword because it cannot be
expressed as columns of ``X``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import assignment
from . import backbone as bb
from . import data
from . import ensemble
from . import trainer
from ._validation import check_images, check_labels, check_manifest_alignment
from .errors import ConfigError


class GroupStandardizer(BaseEstimator, TransformerMixin):
    """Standardize images with statistics pooled per cell type, batch, or plate.

    Statistics come from training-split pixels only. The manifest given to
    ``fit`` is remembered so ``transform`` can route each image to its group;
    pass a different manifest to ``transform`` to standardize other layouts
    with the learned statistics.
    """

    def __init__(self, grouping: str = "plate"):
        self.grouping = grouping

    def fit(self, X, y=None, *, manifest: data.DatasetManifest):
        X = check_images(X)
        check_manifest_alignment(manifest, X)
        self.stats_ = data.compute_norm_stats(manifest, X, self.grouping)
        self.manifest_ = manifest
        return self

    def transform(self, X, manifest: data.DatasetManifest | None = None) -> np.ndarray:
        if not hasattr(self, "stats_"):
            raise ConfigError("GroupStandardizer.transform called before fit")
        manifest = self.manifest_ if manifest is None else manifest
        X = check_images(X)
        check_manifest_alignment(manifest, X)
        return data.normalize_all(manifest, X, self.stats_)


class MeanTeacherClassifier(BaseEstimator, ClassifierMixin):
    """Two-model mean-teacher ensemble behind a fit/predict interface.

    ``fit`` expects images aligned with a dataset manifest; labels default to
    the manifest's own (with ``hide_label_fraction`` optionally hiding a seeded
    portion of the training labels as unlabeled data). Passing ``y`` with -1
    entries overrides which training wells count as labeled. Prediction always
    reads the averaged teachers.
    """

    def __init__(
        self,
        stem_channels: int = 16,
        num_blocks: int = 4,
        embedding_dim: int = 64,
        width_multipliers: tuple = (1.0, 2.0),
        epochs: int = 10,
        batch_size: int = 64,
        base_lr: float = 3e-4,
        weight_decay: float = 2e-4,
        ema_decay: float = 0.99,
        consistency_weight_max: float = 1.0,
        consistency_rampup_epochs: int = 10,
        pseudo_label_weight: float = 0.5,
        classifier: str = "arcface",
        arcface_s: float = 30.0,
        arcface_m: float = 0.1,
        hide_label_fraction: float = 0.0,
        seed: int = 0,
    ):
        self.stem_channels = stem_channels
        self.num_blocks = num_blocks
        self.embedding_dim = embedding_dim
        self.width_multipliers = width_multipliers
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.consistency_weight_max = consistency_weight_max
        self.consistency_rampup_epochs = consistency_rampup_epochs
        self.pseudo_label_weight = pseudo_label_weight
        self.classifier = classifier
        self.arcface_s = arcface_s
        self.arcface_m = arcface_m
        self.hide_label_fraction = hide_label_fraction
        self.seed = seed

    def _configs(self, manifest: data.DatasetManifest):
        backbone_config = bb.BackboneConfig(
            num_classes=manifest.num_classes,
            input_channels=manifest.channels,
            stem_channels=self.stem_channels,
            num_blocks=self.num_blocks,
            embedding_dim=self.embedding_dim,
        )
        train_config = trainer.TrainConfig(
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            total_epochs=self.epochs,
            weight_decay=self.weight_decay,
            ema_decay=self.ema_decay,
            consistency_weight_max=self.consistency_weight_max,
            consistency_rampup_epochs=self.consistency_rampup_epochs,
            pseudo_label_weight=self.pseudo_label_weight,
            classifier=self.classifier,
            arcface_s=self.arcface_s,
            arcface_m=self.arcface_m,
            hide_label_fraction=self.hide_label_fraction,
            seed=self.seed,
        )
        return backbone_config, train_config

    def _training_data(self, X, y, manifest):
        td = trainer.assemble_training_data(
            manifest, X, hide_label_fraction=self.hide_label_fraction, seed=self.seed
        )
        if y is None:
            return td
        y = check_labels(y, X.shape[0], manifest.num_classes)
        labels = np.full(X.shape[0], -1, dtype=np.int64)
        train_idx = np.array([r.image_index for r in manifest.split_records("train")], dtype=np.intp)
        labels[train_idx] = y[train_idx]
        labeled_idx = train_idx[labels[train_idx] >= 0]
        if labeled_idx.size == 0:
            raise ConfigError("no labeled training wells after applying y")
        test_idx = [r.image_index for r in manifest.split_records("test")]
        unlabeled_idx = np.array(sorted(set(train_idx[labels[train_idx] < 0]) | set(test_idx)), dtype=np.intp)
        return trainer.TrainingData(
            manifest=manifest,
            images=X,
            labels=labels,
            labeled_idx=labeled_idx,
            unlabeled_idx=unlabeled_idx,
            val_idx=td.val_idx,
        )

    def fit(self, X, y=None, *, manifest: data.DatasetManifest):
        X = check_images(X)
        check_manifest_alignment(manifest, X)
        backbone_config, train_config = self._configs(manifest)
        td = self._training_data(X, y, manifest)
        state = ensemble.init_ensemble(backbone_config, train_config, self.width_multipliers)
        self.history_ = ensemble.run_training(state, td, epochs=self.epochs)
        self.ensemble_ = state
        self.manifest_ = manifest
        self.classes_ = np.arange(manifest.num_classes)
        return self

    def _require_fitted(self):
        if not hasattr(self, "ensemble_"):
            raise ConfigError("MeanTeacherClassifier used before fit")

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        X = check_images(X, channels=self.manifest_.channels)
        return ensemble.ensemble_predict(
            self.ensemble_.members, X, np.arange(X.shape[0]), batch_size=self.batch_size
        )

    def predict(self, X) -> np.ndarray:
        self._require_fitted()
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def predict_balanced(self, X, manifest: data.DatasetManifest | None = None, split: str = "test", wells=None) -> dict[int, int]:
        """Plate-balanced assignment for a well subset; X aligns with manifest."""
        self._require_fitted()
        manifest = self.manifest_ if manifest is None else manifest
        X = check_images(X)
        check_manifest_alignment(manifest, X)
        probs = self.predict_proba(X)
        predictions = {r.image_index: probs[r.image_index] for r in manifest.records}
        return assignment.apply_postprocess(predictions, manifest, split=split, wells=wells)


class PlateBalancer(BaseEstimator):
    """Turns per-well class probabilities into plate-balanced assignments."""

    def __init__(self, split: str = "test"):
        self.split = split

    def fit(self, X=None, y=None, *, manifest: data.DatasetManifest):
        self.manifest_ = manifest
        return self

    def predict(self, proba, wells=None) -> np.ndarray:
        """Balance probability rows; rows align with ``wells`` (default: split wells).

        Returns the assigned class per row, in row order.
        """
        if not hasattr(self, "manifest_"):
            raise ConfigError("PlateBalancer.predict called before fit")
        if wells is None:
            wells = [r.image_index for r in self.manifest_.split_records(self.split)]
        wells = [int(w) for w in wells]
        proba = np.asarray(proba, dtype=np.float64)
        if proba.ndim != 2 or proba.shape[0] != len(wells):
            raise ConfigError(f"proba must be 2-d with {len(wells)} rows, got {list(proba.shape)}")
        predictions = {w: proba[row] for row, w in enumerate(wells)}
        mapping = assignment.apply_postprocess(predictions, self.manifest_, wells=wells)
        return np.array([mapping[w] for w in wells], dtype=np.int64)
