import pytest

from platescope import config as config_mod
from platescope.errors import ConfigError


def test_defaults_round_trip():
    cfg = config_mod.default_config()
    text = config_mod.dumps(cfg)
    again = config_mod.loads(text)
    assert config_mod.dumps(again) == text


def test_partial_document_fills_defaults():
    cfg = config_mod.from_dict({"train": {"base_lr": 0.001}})
    assert cfg.train.base_lr == 0.001
    assert cfg.train.batch_size == 64
    assert cfg.synthetic.num_classes == 8
    assert cfg.normalization == "plate"
    assert cfg.width_multipliers == (1.0, 2.0)


def test_wells_per_plate_rederives_from_num_classes():
    cfg = config_mod.from_dict({"synthetic": {"num_classes": 16}})
    assert cfg.synthetic.wells_per_plate == 16
    explicit = config_mod.from_dict({"synthetic": {"num_classes": 16, "wells_per_plate": 16}})
    assert explicit.synthetic.wells_per_plate == 16
    with pytest.raises(ConfigError):
        config_mod.from_dict({"synthetic": {"num_classes": 16, "wells_per_plate": 8}})


@pytest.mark.parametrize(
    "raw,needle",
    [
        ({"bogus": 1}, "bogus"),
        ({"train": {"learning_rate": 1}}, "train.learning_rate"),
        ({"synthetic": {"classes": 4}}, "synthetic.classes"),
        ({"backbone": {"width": 2}}, "backbone.width"),
        ({"ablation": {"stage": []}}, "ablation.stage"),
    ],
)
def test_unknown_keys_rejected_with_path(raw, needle):
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        config_mod.from_dict(raw)


def test_sections_must_be_objects():
    with pytest.raises(ConfigError):
        config_mod.from_dict({"train": [1, 2]})
    with pytest.raises(ConfigError):
        config_mod.loads("[]")


def test_lr_schedule_shape_checked():
    cfg = config_mod.from_dict({"train": {"lr_schedule": [[0.5, 0.0001]]}})
    assert cfg.train.lr_schedule == [(0.5, 0.0001)]
    with pytest.raises(ConfigError):
        config_mod.from_dict({"train": {"lr_schedule": [0.5, 0.0001]}})


def test_top_level_validation():
    with pytest.raises(ConfigError):
        config_mod.from_dict({"normalization": "well"})
    with pytest.raises(ConfigError):
        config_mod.from_dict({"width_multipliers": []})
    with pytest.raises(ConfigError):
        config_mod.from_dict({"width_multipliers": 2})


def test_overrides_parse_json_then_string():
    raw = config_mod.default_config().to_dict()
    out = config_mod.apply_overrides(
        raw,
        [
            "train.base_lr=0.001",
            "train.lr_schedule=[[0.5, 1e-4]]",
            "normalization=batch",
            "ablation.stages=[\"softmax\"]",
        ],
    )
    cfg = config_mod.from_dict(out)
    assert cfg.train.base_lr == 0.001
    assert cfg.train.lr_schedule == [(0.5, 1e-4)]
    assert cfg.normalization == "batch"
    assert cfg.ablation["stages"] == ["softmax"]
    # original input is untouched
    assert raw["normalization"] == "plate"


def test_override_errors():
    raw = config_mod.default_config().to_dict()
    with pytest.raises(ConfigError):
        config_mod.apply_overrides(raw, ["no_equals"])
    with pytest.raises(ConfigError):
        config_mod.apply_overrides(raw, ["a..b=1"])
    with pytest.raises(ConfigError):
        config_mod.apply_overrides(raw, ["normalization.sub=1"])
