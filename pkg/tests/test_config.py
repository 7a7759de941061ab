import json

import pytest

from pointcell.config import (
    RunConfig,
    apply_overrides,
    generator_config_to_dict,
    load_config_file,
    parse_generator_config,
    parse_run_config,
    run_config_to_dict,
)
from pointcell.errors import ConfigError


def test_empty_config_gives_defaults():
    cfg = parse_run_config({})
    assert cfg.seed == 0
    assert cfg.batch_size == 1
    assert cfg.eval_radius == 12.0
    assert cfg.match_mode == "greedy"
    assert cfg.loss.q == 0.4
    assert cfg.loss.lam == 2e-3
    assert cfg.optimizer.lr == 1e-4
    assert cfg.backbone.stage_channels == (32, 64, 128, 256)
    assert cfg.density.kernel_size == 7


def test_nested_values_applied():
    cfg = parse_run_config(
        {
            "dataset": "runs/data",
            "epochs": 3,
            "loss": {"q": 0.9, "lambda": 0.01},
            "backbone": {"stage_channels": [8, 16, 24, 32], "pfa_enabled": False},
            "optimizer": {"lr": 0.001},
            "density": {"min_distance": 12},
        }
    )
    assert cfg.dataset == "runs/data"
    assert cfg.epochs == 3
    assert cfg.loss.q == 0.9
    assert cfg.loss.lam == 0.01
    assert cfg.backbone.stage_channels == (8, 16, 24, 32)
    assert not cfg.backbone.pfa_enabled
    assert cfg.optimizer.lr == 0.001
    assert cfg.density.min_distance == 12


@pytest.mark.parametrize(
    "raw,fragment",
    [
        ({"typo_key": 1}, "typo_key"),
        ({"loss": {"lambda_": 1}}, "loss.lambda_"),
        ({"loss": {"lam": 0.1}}, "loss.lam"),
        ({"backbone": {"stages": [1, 2, 3, 4]}}, "backbone.stages"),
        ({"optimizer": {"momentum": 0.9}}, "optimizer.momentum"),
        ({"density": {"threshold": 0.5}}, "density.threshold"),
        ({"augmentation": {"rotate": True}}, "augmentation.rotate"),
    ],
)
def test_unknown_keys_rejected_with_path(raw, fragment):
    with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
        parse_run_config(raw)


def test_type_errors_rejected():
    with pytest.raises(ConfigError):
        parse_run_config({"seed": "zero"})
    with pytest.raises(ConfigError):
        parse_run_config({"epochs": 1.5})
    with pytest.raises(ConfigError):
        parse_run_config({"loss": {"q": "big"}})
    with pytest.raises(ConfigError):
        parse_run_config({"backbone": {"pfa_enabled": 1}})
    with pytest.raises(ConfigError):
        parse_run_config({"loss": []})


def test_semantic_validation():
    with pytest.raises(ConfigError):
        parse_run_config({"batch_size": 2})
    with pytest.raises(ConfigError):
        parse_run_config({"match_mode": "hungarian"})
    with pytest.raises(ConfigError):
        parse_run_config({"epochs": -1})
    with pytest.raises(ConfigError):
        parse_run_config({"detection_threshold": 1.5})
    with pytest.raises(ConfigError):
        parse_run_config({"optimizer": {"lr": -0.1}})
    # constraint checks from the nested dataclasses surface as ConfigError
    with pytest.raises(ConfigError):
        parse_run_config({"loss": {"q": 0.0}})
    with pytest.raises(ConfigError):
        parse_run_config({"backbone": {"stage_channels": [8, 16]}})


def test_lr_zero_is_allowed():
    cfg = parse_run_config({"optimizer": {"lr": 0.0}})
    assert cfg.optimizer.lr == 0.0


def test_round_trip_echo():
    raw = {
        "dataset": "d",
        "out_dir": "o",
        "seed": 7,
        "loss": {"q": 0.25, "lambda": 0.5},
        "backbone": {"independent_classifier_enabled": False},
        "augmentation": {"output_size": [48, 48]},
    }
    cfg = parse_run_config(raw)
    echoed = run_config_to_dict(cfg)
    again = parse_run_config(echoed)
    assert again == cfg
    assert echoed["loss"]["lambda"] == 0.5
    assert "lam" not in echoed["loss"]
    # every echoed value is JSON-serializable
    json.dumps(echoed)


def test_round_trip_of_defaults():
    cfg = RunConfig()
    assert parse_run_config(run_config_to_dict(cfg)) == cfg


def test_overrides_parse_json_then_string():
    raw = apply_overrides({}, ["loss.q=0.15", "match_mode=assignment", "backbone.pfa_enabled=false", "epochs=4"])
    cfg = parse_run_config(raw)
    assert cfg.loss.q == 0.15
    assert cfg.match_mode == "assignment"
    assert not cfg.backbone.pfa_enabled
    assert cfg.epochs == 4


def test_overrides_deep_merge_preserves_siblings():
    base = {"loss": {"q": 0.3, "beta": 0.5}}
    raw = apply_overrides(base, ["loss.q=0.9"])
    assert raw["loss"] == {"q": 0.9, "beta": 0.5}
    assert base["loss"]["q"] == 0.3  # input untouched


def test_overrides_list_values():
    raw = apply_overrides({}, ["backbone.stage_channels=[4, 8, 12, 16]"])
    assert parse_run_config(raw).backbone.stage_channels == (4, 8, 12, 16)


def test_override_errors():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals_sign"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["=5"])
    with pytest.raises(ConfigError):
        apply_overrides({"loss": 3}, ["loss.q=0.5"])


def test_load_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 9}))
    assert load_config_file(p) == {"seed": 9}
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config_file(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config_file(arr)


def test_generator_config_parsing():
    gen, count = parse_generator_config(
        {"count": 50, "image_size": [64, 64], "min_separation": 14.0, "num_classes": 2, "seed": 3}
    )
    assert count == 50
    assert gen.image_size == (64, 64)
    assert gen.min_separation == 14.0
    assert gen.num_classes == 2
    assert gen.seed == 3
    with pytest.raises(ConfigError):
        parse_generator_config({"images": 10})
    with pytest.raises(ConfigError):
        parse_generator_config({"count": -1})
    echoed = generator_config_to_dict(gen, count)
    gen2, count2 = parse_generator_config(echoed)
    assert gen2 == gen and count2 == count


def test_anchor_offsets_round_trip():
    raw = {"backbone": {"anchor_offsets": [[0, 0], [-4, -4], [-4, 4], [4, 4], [4, -4]]}}
    cfg = parse_run_config(raw)
    assert cfg.backbone.anchor_offsets[1] == (-4.0, -4.0)
    assert parse_run_config(run_config_to_dict(cfg)) == cfg
