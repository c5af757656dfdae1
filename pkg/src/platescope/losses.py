"""The four training losses: angular-margin, plain softmax CE, consistency,
and pseudo-label CE. All return scalar tensors with exact gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ShapeError

COS_CLAMP = 1e-7  # keeps arccos differentiable at the boundary


@dataclass
class ArcFaceConfig:
    num_classes: int
    s: float = 30.0
    m: float = 0.1

    def __post_init__(self):
        if self.s <= 0:
            raise ShapeError(f"feature scale s must be positive, got {self.s}")
        if not 0 <= self.m < np.pi / 2:
            raise ShapeError(f"margin m must lie in [0, pi/2), got {self.m}")


def arcface_loss(embeddings: Tensor, class_weights: Tensor, labels, cfg: ArcFaceConfig) -> Tensor:
    """Additive-angular-margin softmax loss, averaged over the batch.

    Cosines come from row-normalized embeddings against column-normalized
    class weights; the target-class logit is cos(theta + m), everything is
    scaled by s, and the result is the mean negative log-softmax.
    """
    embeddings = ad.as_tensor(embeddings)
    class_weights = ad.as_tensor(class_weights)
    labels = np.asarray(labels, dtype=np.intp)
    n = embeddings.data.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"arcface_loss: {n} embedding rows but labels shape {list(labels.shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        raise ShapeError(f"arcface_loss: labels must lie in [0, {cfg.num_classes})")
    norms = np.sqrt((embeddings.data**2).sum(axis=1))
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise NumericError(f"arcface_loss: embedding row {bad[0]} has zero norm")

    xn = ad.l2_normalize_rows(embeddings)
    wn = ad.transpose(ad.l2_normalize_rows(ad.transpose(class_weights)))
    cosines = ad.clip(ad.matmul(xn, wn), -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    theta_target = ad.acos(ad.pick_per_row(cosines, labels))
    margined = ad.cos(ad.add_scalar(theta_target, cfg.m))
    logits = ad.scale(ad.set_per_row(cosines, labels, margined), cfg.s)
    return ad.neg(ad.tmean(ad.pick_per_row(ad.log_softmax_rows(logits), labels)))


def softmax_ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the target entries."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(f"softmax_ce_loss: got logits {logits.shape} and labels {list(labels.shape)}")
    return ad.neg(ad.tmean(ad.pick_per_row(ad.log_softmax_rows(logits), labels)))


def consistency_loss(student_out: Tensor, teacher_out: Tensor) -> Tensor:
    """Mean over rows of the squared Euclidean distance between predictions.

    The teacher side is treated as a constant: no gradient ever flows into
    ``teacher_out``.
    """
    student_out = ad.as_tensor(student_out)
    teacher_out = ad.as_tensor(teacher_out)
    if student_out.data.shape != teacher_out.data.shape:
        raise ShapeError(f"consistency_loss: shapes {student_out.shape} and {teacher_out.shape} differ")
    n = student_out.data.shape[0] if student_out.data.ndim else 1
    diff = ad.sub(student_out, Tensor(teacher_out.data.copy()))
    return ad.scale(ad.tsum(ad.mul(diff, diff)), 1.0 / n)


def pseudo_label_loss(student_logits: Tensor, pseudo_labels, mask) -> Tensor:
    """Softmax CE averaged over masked rows; a constant zero when none are."""
    student_logits = ad.as_tensor(student_logits)
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(pseudo_labels, dtype=np.intp)
    n, k = student_logits.data.shape
    if mask.shape != (n,) or labels.shape != (n,):
        raise ShapeError(f"pseudo_label_loss: logits {student_logits.shape}, labels {list(labels.shape)}, mask {list(mask.shape)}")
    count = int(mask.sum())
    if count == 0:
        return Tensor(0.0)
    safe = np.where(mask, labels, 0)
    if safe.min() < 0 or safe.max() >= k:
        raise ShapeError(f"pseudo_label_loss: masked labels must lie in [0, {k})")
    picked = ad.pick_per_row(ad.log_softmax_rows(student_logits), safe)
    masked = ad.mul(picked, Tensor(mask.astype(np.float64)))
    return ad.neg(ad.scale(ad.tsum(masked), 1.0 / count))
