"""Plate-screen data model and persistence.

A screen is a set of experiments (batches); each experiment holds a fixed
number of plates, each plate a grid of wells, and every well carries one
class (one perturbation) and one multi-channel image. Three normalization
strategies share one implementation and differ only in how images are
grouped: per cell type, per experiment, or per plate. Group statistics are
computed from training-split pixels only and then applied to every split.

The synthetic generator mirrors that structure with controllable nuisance
factors: a deterministic per-(cell_type, class, channel) signal template is
distorted by per-experiment and per-plate gains/offsets plus pixel noise.
Gains act multiplicatively and offsets additively, so plate-grouped
statistics can correct strictly more of the distortion than experiment- or
cell-grouped ones, and the three strategies are meaningfully ordered.

On-disk layout of a dataset directory:
  manifest.json   counts + one record per well (explicit field names)
  images.bin      b"PLT1", u32 LE N C H W, N*C*H*W float32 LE, CRC32(payload)
  stats.json      optional; normalization statistics keyed by group
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    DataFormatError,
    TruncatedFileError,
)

MAGIC = b"PLT1"
MANIFEST_NAME = "manifest.json"
IMAGES_NAME = "images.bin"
STATS_NAME = "stats.json"
SPLITS = ("train", "val", "test")
GROUPINGS = ("cell", "batch", "plate")
STD_FLOOR = 1e-6

# sub-stream domains for the hierarchical generator seeds
_D_TEMPLATE, _D_BATCH, _D_PLATE, _D_LAYOUT, _D_NOISE, _D_SPLIT = range(6)


def _stream(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


@dataclass
class WellRecord:
    """One well: where it sits, what it contains, which image shows it."""

    experiment_id: int
    plate_index: int
    well_position: tuple[int, int]
    cell_type: int
    class_label: int | None
    image_index: int
    split: str

    @property
    def plate_key(self) -> tuple[int, int]:
        return (self.experiment_id, self.plate_index)

    def group_key(self, grouping: str):
        if grouping == "cell":
            return self.cell_type
        if grouping == "batch":
            return self.experiment_id
        if grouping == "plate":
            return self.plate_key
        raise ConfigError(f"unknown grouping '{grouping}', expected one of {GROUPINGS}")

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "plate_index": self.plate_index,
            "well_position": list(self.well_position),
            "cell_type": self.cell_type,
            "class_label": self.class_label,
            "image_index": self.image_index,
            "split": self.split,
        }

    @staticmethod
    def from_dict(d: dict) -> "WellRecord":
        try:
            return WellRecord(
                experiment_id=int(d["experiment_id"]),
                plate_index=int(d["plate_index"]),
                well_position=(int(d["well_position"][0]), int(d["well_position"][1])),
                cell_type=int(d["cell_type"]),
                class_label=None if d["class_label"] is None else int(d["class_label"]),
                image_index=int(d["image_index"]),
                split=str(d["split"]),
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed well record: {exc}") from exc


@dataclass
class DatasetManifest:
    """All well records plus the shared dimensional counts."""

    records: list[WellRecord]
    num_classes: int
    num_experiments: int
    plates_per_experiment: int
    channels: int
    height: int
    width: int

    @property
    def num_images(self) -> int:
        return len(self.records)

    def plate_keys(self) -> list[tuple[int, int]]:
        return sorted({r.plate_key for r in self.records})

    def plate_records(self, plate_key: tuple[int, int]) -> list[WellRecord]:
        return [r for r in self.records if r.plate_key == plate_key]

    def split_records(self, split: str) -> list[WellRecord]:
        if split not in SPLITS:
            raise ConfigError(f"unknown split '{split}', expected one of {SPLITS}")
        return [r for r in self.records if r.split == split]

    def cell_types(self) -> list[int]:
        return sorted({r.cell_type for r in self.records})

    def validate(self) -> None:
        indices = sorted(r.image_index for r in self.records)
        if indices != list(range(len(self.records))):
            raise DataFormatError("image_index values must be unique and dense from 0")
        plates = {r.plate_key for r in self.records}
        expected = self.num_experiments * self.plates_per_experiment
        if len(plates) != expected:
            raise DataFormatError(f"{len(plates)} plates in records, counts promise {expected}")
        per_experiment_cell: dict[int, int] = {}
        per_plate_labels: dict[tuple[int, int], set] = {}
        for r in self.records:
            if r.split not in SPLITS:
                raise DataFormatError(f"record {r.image_index}: unknown split '{r.split}'")
            if r.class_label is not None and not 0 <= r.class_label < self.num_classes:
                raise DataFormatError(f"record {r.image_index}: class_label {r.class_label} out of range")
            if not 0 <= r.experiment_id < self.num_experiments:
                raise DataFormatError(f"record {r.image_index}: experiment_id {r.experiment_id} out of range")
            if not 0 <= r.plate_index < self.plates_per_experiment:
                raise DataFormatError(f"record {r.image_index}: plate_index {r.plate_index} out of range")
            seen_cell = per_experiment_cell.setdefault(r.experiment_id, r.cell_type)
            if seen_cell != r.cell_type:
                raise DataFormatError(f"experiment {r.experiment_id} mixes cell types {seen_cell} and {r.cell_type}")
            if r.class_label is not None:
                labels = per_plate_labels.setdefault(r.plate_key, set())
                if r.class_label in labels:
                    raise DataFormatError(f"plate {r.plate_key}: class {r.class_label} occurs twice")
                labels.add(r.class_label)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "num_experiments": self.num_experiments,
            "plates_per_experiment": self.plates_per_experiment,
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "records": [r.to_dict() for r in self.records],
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        try:
            manifest = DatasetManifest(
                records=[WellRecord.from_dict(r) for r in d["records"]],
                num_classes=int(d["num_classes"]),
                num_experiments=int(d["num_experiments"]),
                plates_per_experiment=int(d["plates_per_experiment"]),
                channels=int(d["channels"]),
                height=int(d["height"]),
                width=int(d["width"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed manifest: {exc}") from exc
        manifest.validate()
        return manifest


@dataclass
class NormStats:
    """Per-group, per-channel population mean/std, training pixels only."""

    grouping: str
    groups: dict = field(default_factory=dict)  # group key -> (mean[C], std[C])

    def lookup(self, record: WellRecord) -> tuple[np.ndarray, np.ndarray]:
        key = record.group_key(self.grouping)
        if key not in self.groups:
            raise DataFormatError(f"{self.grouping}-grouped stats have no entry for group {key}")
        return self.groups[key]

    @staticmethod
    def _key_str(grouping: str, key) -> str:
        return f"{key[0]}/{key[1]}" if grouping == "plate" else str(key)

    @staticmethod
    def _key_parse(grouping: str, text: str):
        if grouping == "plate":
            j, k = text.split("/")
            return (int(j), int(k))
        return int(text)

    def to_dict(self) -> dict:
        return {
            "grouping": self.grouping,
            "groups": {
                self._key_str(self.grouping, key): {"mean": mean.tolist(), "std": std.tolist()}
                for key, (mean, std) in sorted(self.groups.items())
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "NormStats":
        try:
            grouping = d["grouping"]
            if grouping not in GROUPINGS:
                raise DataFormatError(f"unknown grouping '{grouping}' in stats")
            groups = {}
            for text, entry in d["groups"].items():
                key = NormStats._key_parse(grouping, text)
                mean = np.asarray(entry["mean"], dtype=np.float64)
                std = np.asarray(entry["std"], dtype=np.float64)
                if mean.shape != std.shape or mean.ndim != 1:
                    raise DataFormatError(f"stats group {text}: mean/std shapes disagree")
                if np.any(std < 0):
                    raise DataFormatError(f"stats group {text}: negative std")
                groups[key] = (mean, std)
            return NormStats(grouping=grouping, groups=groups)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed stats: {exc}") from exc


@dataclass
class SyntheticConfig:
    """Knobs for the synthetic screen; all randomness derives from ``seed``.

    Nuisance stds control how strongly experiments and plates distort the
    class templates; gains are log-normal (exp of a scaled standard normal)
    and offsets are plain normals. Splits are drawn within each plate so
    every plate contributes pixels to every split.
    """

    num_classes: int
    num_experiments: int = 4
    plates_per_experiment: int = 2
    num_cell_types: int = 2
    channels: int = 6
    height: int = 32
    width: int = 32
    wells_per_plate: int | None = None
    batch_gain_std: float = 0.1
    batch_offset_std: float = 0.1
    plate_gain_std: float = 0.1
    plate_offset_std: float = 0.1
    pixel_noise_std: float = 0.05
    val_fraction: float = 0.15
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.wells_per_plate is None:
            self.wells_per_plate = self.num_classes
        if self.wells_per_plate != self.num_classes:
            raise ConfigError("wells_per_plate must equal num_classes (every class once per plate)")
        for name in ("batch_gain_std", "batch_offset_std", "plate_gain_std", "plate_offset_std", "pixel_noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("num_experiments", "plates_per_experiment", "num_cell_types", "channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0 <= self.val_fraction < 1 and 0 <= self.test_fraction < 1):
            raise ConfigError("val_fraction and test_fraction must lie in [0, 1)")
        k = self.num_classes
        if int(round(self.val_fraction * k)) + int(round(self.test_fraction * k)) >= k:
            raise ConfigError("val_fraction + test_fraction leave no training wells per plate")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "num_experiments": self.num_experiments,
            "plates_per_experiment": self.plates_per_experiment,
            "num_cell_types": self.num_cell_types,
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "wells_per_plate": self.wells_per_plate,
            "batch_gain_std": self.batch_gain_std,
            "batch_offset_std": self.batch_offset_std,
            "plate_gain_std": self.plate_gain_std,
            "plate_offset_std": self.plate_offset_std,
            "pixel_noise_std": self.pixel_noise_std,
            "val_fraction": self.val_fraction,
            "test_fraction": self.test_fraction,
            "seed": self.seed,
        }


def _class_template(cfg: SyntheticConfig, cell_type: int, class_label: int, channel: int) -> np.ndarray:
    """Fixed signal for one (cell type, class, channel): a few Gaussian blobs."""
    rng = _stream(cfg.seed, _D_TEMPLATE, cell_type, class_label, channel)
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    template = np.full((cfg.height, cfg.width), rng.uniform(0.2, 0.5))
    for _ in range(int(rng.integers(1, 4))):
        cy = rng.uniform(0, cfg.height)
        cx = rng.uniform(0, cfg.width)
        sigma = rng.uniform(max(cfg.height, 2) / 10.0, max(cfg.height, 2) / 4.0)
        amp = rng.uniform(0.5, 2.0)
        template += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    return template


def _grid_position(well: int, wells_per_plate: int) -> tuple[int, int]:
    cols = int(math.ceil(math.sqrt(wells_per_plate)))
    return (well // cols, well % cols)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[DatasetManifest, np.ndarray]:
    """Build a full synthetic screen; returns (manifest, float32 [N,C,H,W]).

    Pixel model per channel: plate_gain * batch_gain * template
    + batch_offset + plate_offset + noise. Every class appears exactly once
    per plate at a randomized well, and ground-truth labels are retained for
    all wells (the test split hides them behind the split flag, not by
    removing them).
    """
    k = cfg.num_classes
    records: list[WellRecord] = []
    n_images = k * cfg.plates_per_experiment * cfg.num_experiments
    images = np.empty((n_images, cfg.channels, cfg.height, cfg.width), dtype=np.float32)
    templates: dict[tuple[int, int], np.ndarray] = {}
    n_test = int(round(cfg.test_fraction * k))
    n_val = int(round(cfg.val_fraction * k))

    image_index = 0
    for j in range(cfg.num_experiments):
        cell_type = j % cfg.num_cell_types
        batch_rng = _stream(cfg.seed, _D_BATCH, j)
        batch_gain = np.exp(cfg.batch_gain_std * batch_rng.standard_normal(cfg.channels))
        batch_offset = cfg.batch_offset_std * batch_rng.standard_normal(cfg.channels)
        for p in range(cfg.plates_per_experiment):
            plate_rng = _stream(cfg.seed, _D_PLATE, j, p)
            plate_gain = np.exp(cfg.plate_gain_std * plate_rng.standard_normal(cfg.channels))
            plate_offset = cfg.plate_offset_std * plate_rng.standard_normal(cfg.channels)
            class_at_well = _stream(cfg.seed, _D_LAYOUT, j, p).permutation(k)
            split_order = _stream(cfg.seed, _D_SPLIT, j, p).permutation(k)
            split_of_well = np.full(k, "train", dtype=object)
            split_of_well[split_order[:n_test]] = "test"
            split_of_well[split_order[n_test : n_test + n_val]] = "val"
            for well in range(k):
                label = int(class_at_well[well])
                stack = np.empty((cfg.channels, cfg.height, cfg.width))
                for ch in range(cfg.channels):
                    key = (cell_type, label, ch)
                    if key not in templates:
                        templates[key] = _class_template(cfg, cell_type, label, ch)
                    stack[ch] = plate_gain[ch] * batch_gain[ch] * templates[key] + batch_offset[ch] + plate_offset[ch]
                if cfg.pixel_noise_std > 0:
                    noise_rng = _stream(cfg.seed, _D_NOISE, image_index)
                    stack += cfg.pixel_noise_std * noise_rng.standard_normal(stack.shape)
                images[image_index] = stack.astype(np.float32)
                records.append(
                    WellRecord(
                        experiment_id=j,
                        plate_index=p,
                        well_position=_grid_position(well, k),
                        cell_type=cell_type,
                        class_label=label,
                        image_index=image_index,
                        split=str(split_of_well[well]),
                    )
                )
                image_index += 1

    manifest = DatasetManifest(
        records=records,
        num_classes=k,
        num_experiments=cfg.num_experiments,
        plates_per_experiment=cfg.plates_per_experiment,
        channels=cfg.channels,
        height=cfg.height,
        width=cfg.width,
    )
    manifest.validate()
    return manifest, images


def compute_norm_stats(manifest: DatasetManifest, images: np.ndarray, grouping: str) -> NormStats:
    """Per-group per-channel population mean/std over training pixels.

    Accumulation runs in image_index order regardless of record order, so
    the result is invariant to permutations of the manifest.
    """
    if grouping not in GROUPINGS:
        raise ConfigError(f"unknown grouping '{grouping}', expected one of {GROUPINGS}")
    _check_images_match(manifest, images)
    all_keys = sorted({r.group_key(grouping) for r in manifest.records})
    train = sorted(manifest.split_records("train"), key=lambda r: r.image_index)
    sums: dict = {key: np.zeros(manifest.channels) for key in all_keys}
    sumsqs: dict = {key: np.zeros(manifest.channels) for key in all_keys}
    counts: dict = {key: 0 for key in all_keys}
    for r in train:
        pix = images[r.image_index].astype(np.float64)
        key = r.group_key(grouping)
        sums[key] += pix.sum(axis=(1, 2))
        sumsqs[key] += (pix**2).sum(axis=(1, 2))
        counts[key] += pix.shape[1] * pix.shape[2]
    groups = {}
    for key in all_keys:
        if counts[key] == 0:
            raise DataFormatError(f"{grouping}-grouped stats: group {key} has no training images")
        mean = sums[key] / counts[key]
        var = np.maximum(sumsqs[key] / counts[key] - mean**2, 0.0)
        groups[key] = (mean, np.sqrt(var))
    return NormStats(grouping=grouping, groups=groups)


def normalize(image: np.ndarray, record: WellRecord, stats: NormStats) -> np.ndarray:
    """(x - group mean) / max(group std, 1e-6), per channel, float64."""
    mean, std = stats.lookup(record)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != mean.shape[0]:
        raise DataFormatError(f"normalize: image shape {list(image.shape)} does not match {mean.shape[0]} channels")
    denom = np.maximum(std, STD_FLOOR)
    return (image - mean[:, None, None]) / denom[:, None, None]


def normalize_all(manifest: DatasetManifest, images: np.ndarray, stats: NormStats) -> np.ndarray:
    """Normalize every image in the store; returns float64 [N,C,H,W]."""
    _check_images_match(manifest, images)
    out = np.empty(images.shape, dtype=np.float64)
    for r in manifest.records:
        out[r.image_index] = normalize(images[r.image_index], r, stats)
    return out


def _check_images_match(manifest: DatasetManifest, images: np.ndarray) -> None:
    expected = (manifest.num_images, manifest.channels, manifest.height, manifest.width)
    if tuple(images.shape) != expected:
        raise DataFormatError(f"image store shape {list(images.shape)} does not match manifest {list(expected)}")


def write_dataset(path, manifest: DatasetManifest, images: np.ndarray) -> None:
    """Write manifest.json + images.bin into directory ``path``."""
    _check_images_match(manifest, images)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
    (root / MANIFEST_NAME).write_text(text, encoding="utf-8")
    n, c, h, w = images.shape
    payload = np.ascontiguousarray(images, dtype="<f4").tobytes()
    with open(root / IMAGES_NAME, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", n, c, h, w))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_dataset(path) -> tuple[DatasetManifest, np.ndarray]:
    """Read a dataset directory; inverse of :func:`write_dataset`."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    images_path = root / IMAGES_NAME
    for p in (manifest_path, images_path):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file: {p}")
    try:
        manifest = DatasetManifest.from_dict(json.loads(manifest_path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{manifest_path}: invalid JSON: {exc}") from exc
    raw = images_path.read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{images_path}: expected magic {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 4 + 16:
        raise TruncatedFileError(f"{images_path}: header ends early")
    n, c, h, w = struct.unpack_from("<4I", raw, 4)
    payload_len = n * c * h * w * 4
    if len(raw) < 20 + payload_len + 4:
        raise TruncatedFileError(f"{images_path}: payload ends early")
    payload = raw[20 : 20 + payload_len]
    (stored_crc,) = struct.unpack_from("<I", raw, 20 + payload_len)
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError(f"{images_path}: payload CRC32 mismatch")
    images = np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w).copy()
    if n != manifest.num_images:
        raise DataFormatError(f"{images_path}: {n} images but manifest lists {manifest.num_images}")
    if (c, h, w) != (manifest.channels, manifest.height, manifest.width):
        raise DataFormatError(f"{images_path}: image dims do not match manifest")
    return manifest, images


def write_norm_stats(path, stats: NormStats) -> None:
    text = json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_norm_stats(path) -> NormStats:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing stats file: {p}")
    try:
        return NormStats.from_dict(json.loads(p.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{p}: invalid JSON: {exc}") from exc
