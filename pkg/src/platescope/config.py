"""Run configuration: one strict JSON document drives every CLI command.

The document has four sections (``synthetic``, ``backbone``, ``train``,
``ablation``) plus top-level keys for the normalization grouping and the
ensemble width multipliers. Unknown keys anywhere are rejected with the full
key path, so typos fail loudly instead of silently running defaults.
``--set section.key=value`` overrides parse values as JSON first and fall
back to raw strings.
"""

from __future__ import annotations

import dataclasses
import json

from . import data
from . import trainer
from .errors import ConfigError

BACKBONE_KEYS = ("stem_channels", "num_blocks", "embedding_dim")
BACKBONE_DEFAULTS = {"stem_channels": 16, "num_blocks": 4, "embedding_dim": 64}
ABLATION_DEFAULTS = {
    "stages": ["softmax", "arcface", "mean_teacher", "ensemble_pseudo", "post_processed"],
    "normalizations": ["plate"],
    "seeds": [0, 1, 2, 3, 4],
    "hide_label_fraction": 0.3,
    "epochs": None,
}


@dataclasses.dataclass
class RunConfig:
    """Parsed configuration; sub-configs hold their own validation."""

    synthetic: data.SyntheticConfig
    train: trainer.TrainConfig
    backbone: dict
    ablation: dict
    normalization: str = "plate"
    width_multipliers: tuple = (1.0, 2.0)

    def __post_init__(self):
        if self.normalization not in data.GROUPINGS:
            raise ConfigError(f"normalization must be one of {data.GROUPINGS}, got '{self.normalization}'")
        if not self.width_multipliers:
            raise ConfigError("width_multipliers must not be empty")

    def to_dict(self) -> dict:
        synthetic = self.synthetic.to_dict()
        synthetic["wells_per_plate"] = None  # always derived from num_classes
        return {
            "synthetic": synthetic,
            "train": self.train.to_dict(),
            "backbone": dict(self.backbone),
            "ablation": dict(self.ablation),
            "normalization": self.normalization,
            "width_multipliers": list(self.width_multipliers),
        }


def default_config() -> RunConfig:
    return RunConfig(
        synthetic=data.SyntheticConfig(num_classes=8),
        train=trainer.TrainConfig(),
        backbone=dict(BACKBONE_DEFAULTS),
        ablation=json.loads(json.dumps(ABLATION_DEFAULTS)),
    )


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"config section '{path}' must be an object, got {type(value).__name__}")
    return value


def _check_keys(section: dict, allowed, path: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key '{path}.{unknown[0]}'" if path else f"unknown config key '{unknown[0]}'")


def from_dict(raw: dict) -> RunConfig:
    """Parse a config document; every unknown key is an error."""
    raw = _require_mapping(raw, "<root>")
    _check_keys(raw, ("synthetic", "train", "backbone", "ablation", "normalization", "width_multipliers"), "")

    synthetic_raw = _require_mapping(raw.get("synthetic", {}), "synthetic")
    synthetic_fields = {f.name for f in dataclasses.fields(data.SyntheticConfig)}
    _check_keys(synthetic_raw, synthetic_fields, "synthetic")
    merged = {**data.SyntheticConfig(num_classes=8).to_dict(), **synthetic_raw}
    if synthetic_raw.get("wells_per_plate") is None:
        merged["wells_per_plate"] = None  # re-derive from num_classes
    try:
        synthetic = data.SyntheticConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad synthetic config: {exc}") from exc

    train_raw = _require_mapping(raw.get("train", {}), "train")
    train_fields = set(trainer.TrainConfig().to_dict())
    _check_keys(train_raw, train_fields, "train")
    if "lr_schedule" in train_raw:
        schedule = train_raw["lr_schedule"]
        if not isinstance(schedule, list) or not all(isinstance(p, (list, tuple)) and len(p) == 2 for p in schedule):
            raise ConfigError("train.lr_schedule must be a list of [fraction, lr] pairs")
        train_raw = {**train_raw, "lr_schedule": [tuple(p) for p in schedule]}
    try:
        train = trainer.TrainConfig(**{**trainer.TrainConfig().to_dict(), **train_raw})
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc

    backbone_raw = _require_mapping(raw.get("backbone", {}), "backbone")
    _check_keys(backbone_raw, BACKBONE_KEYS, "backbone")
    backbone = {**BACKBONE_DEFAULTS, **backbone_raw}

    ablation_raw = _require_mapping(raw.get("ablation", {}), "ablation")
    _check_keys(ablation_raw, ABLATION_DEFAULTS, "ablation")
    ablation = {**json.loads(json.dumps(ABLATION_DEFAULTS)), **ablation_raw}

    width = raw.get("width_multipliers", [1.0, 2.0])
    if not isinstance(width, (list, tuple)):
        raise ConfigError("width_multipliers must be a list")
    return RunConfig(
        synthetic=synthetic,
        train=train,
        backbone=backbone,
        ablation=ablation,
        normalization=raw.get("normalization", "plate"),
        width_multipliers=tuple(float(w) for w in width),
    )


def loads(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(raw)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def dump(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings onto a raw config dict."""
    out = json.loads(json.dumps(raw))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        dotted, _, text = item.partition("=")
        parts = dotted.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override '{item}' has an empty key segment")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{item}' descends into non-object '{part}'")
        node[parts[-1]] = value
    return out
