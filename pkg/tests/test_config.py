import json

import pytest

from advart.config import ConfigError, RunConfig, apply_overrides, config_from_dict, load_config
from advart.losses import LossWeights
from advart.patchops import EOTConfig


def test_empty_document_gives_defaults():
    cfg = config_from_dict({})
    assert cfg == RunConfig()
    assert cfg.weights == LossWeights(1.0, 8.0, 0.5)
    assert cfg.eot == EOTConfig()


def test_round_trip_through_json(tmp_path):
    cfg = config_from_dict({"seed": 3, "weights": {"beta": 2.0, "sim_metric": "mse"},
                            "eot": {"rotation": False, "scale_range": [0.9, 1.1]}})
    (tmp_path / "c.json").write_text(cfg.to_json())
    again = load_config(tmp_path / "c.json")
    assert again == cfg
    assert again.eot.scale_range == (0.9, 1.1) and not again.eot.rotation


@pytest.mark.parametrize(
    "raw, match",
    [
        ({"sed": 1}, "unknown config key"),
        ({"weights": {"betta": 1}}, "weights: unknown"),
        ({"eot": {"blur": True}}, "eot: unknown"),
        ({"seed": 1.5}, "seed must be an integer"),
        ({"iters": True}, "iters must be an integer"),
        ({"ratio": "big"}, "ratio must be a number"),
        ({"ratio": 1.5}, "ratio"),
        ({"patch_size": 8}, "patch_size"),
        ({"lr": 0}, "lr"),
        ({"init": "noise"}, "init"),
        ({"target": None}, "target"),
        ({"weights": {"alpha": -1}}, "weights"),
        ({"weights": "heavy"}, "expected an object"),
        ([], "JSON object"),
    ],
)
def test_validation_errors(raw, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(raw)


def test_target_optional_without_similarity():
    cfg = config_from_dict({"target": None, "weights": {"beta": 0}})
    assert cfg.target is None


def test_overrides():
    cfg = apply_overrides(RunConfig(), {"weights.beta": 0.0, "iters": 7, "seed": None})
    assert cfg.weights.beta == 0.0 and cfg.iters == 7 and cfg.seed == 0
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(RunConfig(), {"weights.delta": 1})
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(RunConfig(), {"seed.x": 1})


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")


def test_schema_doc_lists_every_key():
    import advart.config as mod

    for key in json.loads(RunConfig().to_json()):
        assert f'"{key}"' in mod.__doc__
