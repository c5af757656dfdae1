"""Mean-teacher training loop.

Each step draws one labeled and one unlabeled batch, augments every image
twice (the student sees one view, the teacher the other), and optimizes

    L = L_cls(labeled) + w(t) * L_consist(labeled + unlabeled)
        + pseudo_label_weight * L_pseudo(unlabeled with confident labels)

with Adam on the student only; the teacher is an exponential moving average
of the student and is the network used for all prediction. w(t) ramps up as
w_max * exp(-5 * (1 - min(t / T, 1))^2) with t in epochs. Setting w_max,
pseudo_label_weight, and ema_decay all to zero degenerates the loop into
plain supervised training with the teacher mirroring the student.

Checkpoints are a flat binary tensor table (see ``save_checkpoint``) that
captures student, teacher, Adam moments, epoch counter, PRNG state, and the
best validation accuracy, so a resumed run reproduces the uninterrupted
trajectory bitwise.
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import losses
from .autodiff import Tape, Tensor, backward
from .data import DatasetManifest
from .errors import BadMagicError, ChecksumError, ConfigError, DataFormatError, NumericError, ShapeError, TruncatedFileError

log = logging.getLogger("platescope.trainer")

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CLASSIFIERS = ("arcface", "softmax")

# seed domain for the one-off choice of which training labels to hide
_D_HIDE = 101


@dataclass
class TrainConfig:
    """Optimization and semi-supervision knobs.

    ``lr_schedule`` holds (epoch_fraction, lr) pairs applied once the epoch
    index passes fraction * total_epochs, so shortened desk runs keep the
    same relative breakpoints as full-length ones.
    """

    batch_size: int = 64
    base_lr: float = 3e-4
    lr_schedule: list = field(default_factory=lambda: [(100 / 160, 1e-4), (140 / 160, 1e-5)])
    total_epochs: int = 30
    weight_decay: float = 2e-4
    ema_decay: float = 0.99
    consistency_weight_max: float = 1.0
    consistency_rampup_epochs: int = 10
    pseudo_label_weight: float = 0.5
    classifier: str = "arcface"
    arcface_s: float = 30.0
    arcface_m: float = 0.1
    hide_label_fraction: float = 0.0
    finetune_epochs: int = 5
    finetune_lr: float | None = None
    augment_flips: bool = True
    augment_erase: bool = True
    augment_scale: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        fractions = [f for f, _ in self.lr_schedule]
        if any(not 0 < f <= 1 for f in fractions) or fractions != sorted(set(fractions)):
            raise ConfigError("lr_schedule fractions must be strictly increasing within (0, 1]")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigError("lr_schedule learning rates must be positive")
        for name in ("weight_decay", "consistency_weight_max", "pseudo_label_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.consistency_rampup_epochs < 0:
            raise ConfigError("consistency_rampup_epochs must be >= 0")
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(f"classifier must be one of {CLASSIFIERS}, got '{self.classifier}'")
        if not 0.0 <= self.hide_label_fraction < 1.0:
            raise ConfigError(f"hide_label_fraction must lie in [0, 1), got {self.hide_label_fraction}")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        lr = self.base_lr
        for fraction, value in self.lr_schedule:
            if epoch >= fraction * self.total_epochs:
                lr = value
        return lr

    def consistency_weight(self, epoch: int) -> float:
        if self.consistency_weight_max == 0.0:
            return 0.0
        if self.consistency_rampup_epochs <= 0:
            return self.consistency_weight_max
        r = min(epoch / self.consistency_rampup_epochs, 1.0)
        return self.consistency_weight_max * math.exp(-5.0 * (1.0 - r) ** 2)

    def arcface(self, num_classes: int) -> losses.ArcFaceConfig:
        return losses.ArcFaceConfig(num_classes=num_classes, s=self.arcface_s, m=self.arcface_m)

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "lr_schedule": [[f, lr] for f, lr in self.lr_schedule],
            "total_epochs": self.total_epochs,
            "weight_decay": self.weight_decay,
            "ema_decay": self.ema_decay,
            "consistency_weight_max": self.consistency_weight_max,
            "consistency_rampup_epochs": self.consistency_rampup_epochs,
            "pseudo_label_weight": self.pseudo_label_weight,
            "classifier": self.classifier,
            "arcface_s": self.arcface_s,
            "arcface_m": self.arcface_m,
            "hide_label_fraction": self.hide_label_fraction,
            "finetune_epochs": self.finetune_epochs,
            "finetune_lr": self.finetune_lr,
            "augment_flips": self.augment_flips,
            "augment_erase": self.augment_erase,
            "augment_scale": self.augment_scale,
            "seed": self.seed,
        }


def _bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resampling of a [C,H,W] image."""
    c, h, w = image.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def augment(image: np.ndarray, rng: np.random.Generator, flips: bool = True, erase: bool = True, scale: bool = True) -> np.ndarray:
    """One random label-preserving view of a [C,H,W] image.

    Each transform fires independently with probability 0.5: horizontal
    flip, vertical flip, 90-degree rotation, one erased rectangle (area
    fraction in [0.02, 0.2], aspect in [0.3, 3.3], filled with 0), and a
    bilinear rescale by a factor in [0.9, 1.1] cropped or zero-padded back.
    """
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    if h != w:
        raise ShapeError(f"augment requires square images, got {h}x{w}")
    out = image
    if flips:
        if rng.random() < 0.5:
            out = out[:, :, ::-1]
        if rng.random() < 0.5:
            out = out[:, ::-1, :]
        if rng.random() < 0.5:
            out = np.rot90(out, k=1, axes=(1, 2))
    if erase and rng.random() < 0.5:
        out = out.copy()
        area = rng.uniform(0.02, 0.2) * h * w
        aspect = rng.uniform(0.3, 3.3)
        eh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
        ew = min(w, max(1, int(round(math.sqrt(area / aspect)))))
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out[:, top : top + eh, left : left + ew] = 0.0
    if scale and rng.random() < 0.5:
        factor = rng.uniform(0.9, 1.1)
        nh = max(1, int(round(h * factor)))
        nw = max(1, int(round(w * factor)))
        resized = _bilinear_resize(out, nh, nw)
        if nh >= h:
            top = (nh - h) // 2
            left = (nw - w) // 2
            out = resized[:, top : top + h, left : left + w]
        else:
            canvas = np.zeros((c, h, w))
            top = (h - nh) // 2
            left = (w - nw) // 2
            canvas[:, top : top + nh, left : left + nw] = resized
            out = canvas
    return np.ascontiguousarray(out)


def ema_update(teacher: bb.ModelParams, student: bb.ModelParams, alpha: float) -> bb.ModelParams:
    """In place: teacher <- alpha * teacher + (1 - alpha) * student."""
    if teacher.names() != student.names():
        raise ShapeError("ema_update: teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.data.shape != s.data.shape:
            raise ShapeError(f"ema_update: parameter '{name}' shapes differ")
        t.data *= alpha
        t.data += (1.0 - alpha) * s.data
    return teacher


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def for_params(params: bb.ModelParams) -> "AdamState":
        return AdamState(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
        )


def adam_step(params: bb.ModelParams, adam: AdamState, lr: float, weight_decay: float) -> None:
    """One coupled-weight-decay Adam update; missing grads count as zero."""
    adam.t += 1
    bc1 = 1.0 - ADAM_BETA1**adam.t
    bc2 = 1.0 - ADAM_BETA2**adam.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter '{name}'")
        if weight_decay != 0.0:
            g = g + weight_decay * p.data
        m = adam.m[name]
        v = adam.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


@dataclass
class TrainingData:
    """Index views into one normalized image store.

    ``labels`` carries -1 wherever the trainer must not see the class:
    hidden training labels, validation, and the test split. Ground truth for
    those stays in the manifest for evaluation code only.
    """

    manifest: DatasetManifest
    images: np.ndarray
    labels: np.ndarray
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    val_idx: np.ndarray

    def subset_for_cell_type(self, cell_type: int) -> "TrainingData":
        keep = {r.image_index for r in self.manifest.records if r.cell_type == cell_type}
        pick = lambda idx: np.asarray([i for i in idx if i in keep], dtype=np.intp)
        return TrainingData(
            manifest=self.manifest,
            images=self.images,
            labels=self.labels,
            labeled_idx=pick(self.labeled_idx),
            unlabeled_idx=pick(self.unlabeled_idx),
            val_idx=pick(self.val_idx),
        )


def assemble_training_data(manifest: DatasetManifest, images: np.ndarray, hide_label_fraction: float = 0.0, seed: int = 0) -> TrainingData:
    """Split the store into labeled/unlabeled/validation index pools.

    A seeded fraction of training labels can be hidden; hidden wells join
    the test wells in the unlabeled pool (the consistency and pseudo-label
    losses see them, the classification loss never does).
    """
    train_idx = sorted(r.image_index for r in manifest.split_records("train"))
    n_hide = int(round(hide_label_fraction * len(train_idx)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, _D_HIDE]))
    hidden = set(np.asarray(train_idx, dtype=np.intp)[rng.permutation(len(train_idx))[:n_hide]].tolist())
    labels = np.full(manifest.num_images, -1, dtype=np.int64)
    for r in manifest.records:
        if r.split == "train" and r.image_index not in hidden and r.class_label is not None:
            labels[r.image_index] = r.class_label
    labeled = np.asarray([i for i in train_idx if i not in hidden], dtype=np.intp)
    test_idx = [r.image_index for r in manifest.split_records("test")]
    unlabeled = np.asarray(sorted(hidden | set(test_idx)), dtype=np.intp)
    val = np.asarray(sorted(r.image_index for r in manifest.split_records("val")), dtype=np.intp)
    if labeled.size == 0:
        raise ConfigError("no labeled training images left after hiding")
    return TrainingData(manifest=manifest, images=np.asarray(images, dtype=np.float64), labels=labels, labeled_idx=labeled, unlabeled_idx=unlabeled, val_idx=val)


@dataclass
class TrainerState:
    """Everything one mean-teacher run needs to continue from a point."""

    backbone_config: bb.BackboneConfig
    train_config: TrainConfig
    student: bb.ModelParams
    teacher: bb.ModelParams
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    best_val_accuracy: float = float("-inf")
    history: list = field(default_factory=list)


def init_trainer(backbone_config: bb.BackboneConfig, train_config: TrainConfig, init_seed: int | None = None) -> TrainerState:
    seed = train_config.seed if init_seed is None else init_seed
    student = bb.build(backbone_config, seed=seed)
    return TrainerState(
        backbone_config=backbone_config,
        train_config=train_config,
        student=student,
        teacher=student.copy(),
        adam=AdamState.for_params(student),
        rng=np.random.default_rng(np.random.SeedSequence([seed, 0])),
    )


def _augment_batch(data: TrainingData, idx: np.ndarray, rng: np.random.Generator, cfg: TrainConfig, views: int) -> list[np.ndarray]:
    """``views`` stacked augmentations per item; draw order is per item."""
    stacks = [np.empty((len(idx),) + data.images.shape[1:]) for _ in range(views)]
    for row, i in enumerate(idx):
        for view in range(views):
            stacks[view][row] = augment(
                data.images[i], rng, flips=cfg.augment_flips, erase=cfg.augment_erase, scale=cfg.augment_scale
            )
    return stacks


def _probs(params: bb.ModelParams, batch, cfg: TrainConfig) -> Tensor:
    emb = bb.forward(params, batch)
    scale = cfg.arcface_s if cfg.classifier == "arcface" else None
    return ad.softmax_rows(bb.class_logits(emb, params, feature_scale=scale))


def predict_probs(params: bb.ModelParams, images: np.ndarray, idx, cfg: TrainConfig, batch_size: int | None = None) -> np.ndarray:
    """Plain (no-tape) prediction probabilities for the given image indices."""
    idx = np.asarray(idx, dtype=np.intp)
    bs = batch_size or cfg.batch_size
    rows = []
    for start in range(0, len(idx), bs):
        chunk = images[idx[start : start + bs]]
        rows.append(_probs(params, np.asarray(chunk, dtype=np.float64), cfg).data)
    if not rows:
        return np.zeros((0, params.config.num_classes))
    return np.concatenate(rows, axis=0)


def train_epoch(state: TrainerState, data: TrainingData, pseudo_labels: dict | None = None) -> dict:
    """One pass over the labeled pool; returns the epoch's mean loss parts.

    The unlabeled pool is cycled through reshuffled permutations so each
    step pairs a labeled batch with an equally sized unlabeled batch. The
    teacher is only ever run outside the tape, so it cannot receive
    gradients; it moves exclusively through ``ema_update``.
    """
    cfg = state.train_config
    pseudo_labels = pseudo_labels or {}
    rng = state.rng
    w = cfg.consistency_weight(state.epoch)
    lr = cfg.lr_at(state.epoch)
    need_unlabeled = (w > 0.0 or cfg.pseudo_label_weight > 0.0) and data.unlabeled_idx.size > 0
    arc_cfg = cfg.arcface(state.backbone_config.num_classes)

    order = data.labeled_idx[rng.permutation(data.labeled_idx.size)]
    steps = max(1, math.ceil(order.size / cfg.batch_size))
    if need_unlabeled:
        u_batch = min(cfg.batch_size, data.unlabeled_idx.size)
        stream = []
        while len(stream) < steps * u_batch:
            stream.extend(data.unlabeled_idx[rng.permutation(data.unlabeled_idx.size)].tolist())
        stream = np.asarray(stream[: steps * u_batch], dtype=np.intp)

    feature_scale = cfg.arcface_s if cfg.classifier == "arcface" else None
    totals = {"loss": 0.0, "cls": 0.0, "consistency": 0.0, "pseudo": 0.0}
    for step in range(steps):
        idx_l = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
        view_a_l, view_b_l = _augment_batch(data, idx_l, rng, cfg, views=2)
        mask = np.zeros(0, dtype=bool)
        hard = np.zeros(0, dtype=np.int64)
        if need_unlabeled:
            idx_u = stream[step * u_batch : (step + 1) * u_batch]
            view_a_u, view_b_u = _augment_batch(data, idx_u, rng, cfg, views=2)
            mask = np.asarray([bool(pseudo_labels.get(int(i), (0, False))[1]) for i in idx_u])
            hard = np.asarray([int(pseudo_labels.get(int(i), (0, False))[0]) for i in idx_u], dtype=np.int64)

        # teacher views run outside the tape: plain forwards, no gradients
        if w > 0.0:
            teacher_probs_l = _probs(state.teacher, view_b_l, cfg).data
            if need_unlabeled:
                teacher_probs_u = _probs(state.teacher, view_b_u, cfg).data
        want_pseudo = cfg.pseudo_label_weight > 0.0 and bool(mask.any())
        forward_unlabeled = need_unlabeled and (w > 0.0 or want_pseudo)

        with Tape():
            student_emb_l = bb.forward(state.student, view_a_l)
            if cfg.classifier == "arcface":
                cls = losses.arcface_loss(student_emb_l, state.student[bb.CLASS_WEIGHT_NAME], data.labels[idx_l], arc_cfg)
            else:
                cls = losses.softmax_ce_loss(bb.class_logits(student_emb_l, state.student), data.labels[idx_l])
            loss = cls
            consist_val = 0.0
            pseudo_val = 0.0
            if forward_unlabeled:
                student_logits_u = bb.class_logits(bb.forward(state.student, view_a_u), state.student, feature_scale=feature_scale)
            if w > 0.0:
                student_probs_l = ad.softmax_rows(bb.class_logits(student_emb_l, state.student, feature_scale=feature_scale))
                consist = losses.consistency_loss(student_probs_l, Tensor(teacher_probs_l))
                if need_unlabeled:
                    c_u = losses.consistency_loss(ad.softmax_rows(student_logits_u), Tensor(teacher_probs_u))
                    n_l, n_u = len(idx_l), len(idx_u)
                    consist = ad.scale(ad.add(ad.scale(consist, float(n_l)), ad.scale(c_u, float(n_u))), 1.0 / (n_l + n_u))
                consist_val = consist.item()
                loss = ad.add(loss, ad.scale(consist, w))
            if want_pseudo:
                pseudo = losses.pseudo_label_loss(student_logits_u, hard, mask)
                pseudo_val = pseudo.item()
                loss = ad.add(loss, ad.scale(pseudo, cfg.pseudo_label_weight))
        backward(loss)
        adam_step(state.student, state.adam, lr=lr, weight_decay=cfg.weight_decay)
        state.student.zero_grads()
        ema_update(state.teacher, state.student, cfg.ema_decay)
        totals["loss"] += loss.item()
        totals["cls"] += cls.item()
        totals["consistency"] += consist_val
        totals["pseudo"] += pseudo_val

    state.epoch += 1
    stats = {k: v / steps for k, v in totals.items()}
    stats.update({"epoch": state.epoch, "lr": lr, "consistency_weight": w, "steps": steps})
    state.history.append(stats)
    log.info(
        "epoch %d loss %.6f cls %.6f consist %.6f pseudo %.6f lr %.2e",
        state.epoch, stats["loss"], stats["cls"], stats["consistency"], stats["pseudo"], lr,
    )
    return stats


def clone_rng(rng: np.random.Generator) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = rng.bit_generator.state
    return np.random.Generator(bg)


def finetune_per_celltype(state: TrainerState, data: TrainingData, pseudo_labels: dict | None = None) -> dict:
    """Continue the finished joint run separately on each cell type.

    Every fine-tuned copy branches from the joint checkpoint: deep copies
    of student/teacher/Adam and a clone of the joint PRNG, so a screen with
    a single cell type fine-tunes into exactly the continued joint run.
    Cell types without labeled training records are skipped with a warning.
    """
    cfg = state.train_config
    out = {}
    for cell_type in data.manifest.cell_types():
        sub = data.subset_for_cell_type(cell_type)
        if sub.labeled_idx.size == 0:
            log.warning("cell type %d has no labeled training records; skipping fine-tune", cell_type)
            continue
        clone = TrainerState(
            backbone_config=state.backbone_config,
            train_config=cfg if cfg.finetune_lr is None else _with_lr(cfg, cfg.finetune_lr),
            student=state.student.copy(),
            teacher=state.teacher.copy(),
            adam=AdamState(m={n: a.copy() for n, a in state.adam.m.items()}, v={n: a.copy() for n, a in state.adam.v.items()}, t=state.adam.t),
            rng=clone_rng(state.rng),
            epoch=state.epoch,
            best_val_accuracy=state.best_val_accuracy,
        )
        for _ in range(cfg.finetune_epochs):
            train_epoch(clone, sub, pseudo_labels)
        out[cell_type] = clone
    return out


def _with_lr(cfg: TrainConfig, lr: float) -> TrainConfig:
    return TrainConfig(**{**cfg.to_dict(), "base_lr": lr, "lr_schedule": []})


# --- checkpoint format ------------------------------------------------------
# CKPT | u32 version | u32 entry count | entries | u32 CRC32
# entry: u16 name length | name UTF-8 | u8 rank | rank * u32 dims | f64 LE data
# The CRC covers every byte after the magic and before the checksum.


def _rng_digits(rng: np.random.Generator) -> np.ndarray:
    s = rng.bit_generator.state
    digits = []
    for value in (s["state"]["state"], s["state"]["inc"], int(s["has_uint32"]), int(s["uinteger"])):
        for _ in range(4):
            digits.append(value & 0xFFFFFFFF)
            value >>= 32
    return np.asarray(digits, dtype=np.float64)


def _rng_from_digits(digits: np.ndarray) -> np.random.Generator:
    if digits.shape != (16,):
        raise DataFormatError(f"PRNG state entry has shape {list(digits.shape)}, expected [16]")
    values = []
    for k in range(4):
        value = 0
        for i in reversed(range(4)):
            value = (value << 32) | int(digits[4 * k + i])
        values.append(value)
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": values[0], "inc": values[1]},
        "has_uint32": int(values[2]),
        "uinteger": int(values[3]),
    }
    return np.random.Generator(bg)


def _encode_entries(entries: dict) -> bytes:
    chunks = [struct.pack("<II", CKPT_VERSION, len(entries))]
    for name, array in entries.items():
        array = np.asarray(array, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape) if array.ndim else b"")
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(chunks)


def _decode_entries(raw: bytes, path) -> dict:
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CKPT_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 4 + 8 + 4:
        raise TruncatedFileError(f"{path}: header ends early")
    body, (stored_crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != stored_crc:
        raise ChecksumError(f"{path}: checkpoint CRC32 mismatch")
    version, count = struct.unpack_from("<II", body, 0)
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    entries = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos) if rank else ()
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            array = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
            pos += 8 * size
            entries[name] = array
    except (struct.error, ValueError) as exc:
        raise TruncatedFileError(f"{path}: checkpoint ends early: {exc}") from exc
    return entries


def save_checkpoint(path, state: TrainerState) -> None:
    entries = {}
    for prefix, params in (("student", state.student), ("teacher", state.teacher)):
        for name, p in params.items():
            entries[f"{prefix}.{name}"] = p.data
    for name in state.student.names():
        entries[f"adam.m.{name}"] = state.adam.m[name]
        entries[f"adam.v.{name}"] = state.adam.v[name]
    entries["meta.epoch"] = np.float64(state.epoch)
    entries["meta.adam_t"] = np.float64(state.adam.t)
    entries["meta.best_val_accuracy"] = np.float64(state.best_val_accuracy)
    entries["meta.rng"] = _rng_digits(state.rng)
    body = _encode_entries(entries)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, backbone_config: bb.BackboneConfig, train_config: TrainConfig) -> TrainerState:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing checkpoint file: {p}")
    entries = _decode_entries(p.read_bytes(), p)
    reference = bb.build(backbone_config, seed=0)
    nets = {}
    for prefix in ("student", "teacher"):
        tensors = {}
        for name in reference.names():
            key = f"{prefix}.{name}"
            if key not in entries:
                raise DataFormatError(f"{p}: checkpoint lacks entry '{key}'")
            if entries[key].shape != reference[name].data.shape:
                raise DataFormatError(f"{p}: entry '{key}' shape {list(entries[key].shape)} does not match the configuration")
            tensors[name] = ad.Tensor(entries[key])
        nets[prefix] = bb.ModelParams(backbone_config, tensors)
    adam = AdamState(
        m={n: entries[f"adam.m.{n}"] for n in reference.names()},
        v={n: entries[f"adam.v.{n}"] for n in reference.names()},
        t=int(entries["meta.adam_t"]),
    )
    return TrainerState(
        backbone_config=backbone_config,
        train_config=train_config,
        student=nets["student"],
        teacher=nets["teacher"],
        adam=adam,
        rng=_rng_from_digits(entries["meta.rng"]),
        epoch=int(entries["meta.epoch"]),
        best_val_accuracy=float(entries["meta.best_val_accuracy"]),
    )
