import json

import pytest

from mixsup.config import (ConfigError, ExperimentConfig, apply_overrides, field_docs, from_mapping,
                           load_config, parse_value)


def test_defaults_are_valid():
    cfg = ExperimentConfig().validate()
    assert cfg.weights().lambda_kd == 50.0
    assert cfg.seeds == [0, 1, 2]


def test_toml_and_json_agree(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('name = "x"\nvariant = "kl"\n[weights]\nlambda_kd = 10.0\n[data]\nsetting = "set5"\n'
                    'noise_sigma = 0.05\n')
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"name": "x", "variant": "kl", "weights": {"lambda_kd": 10.0},
                              "data": {"setting": "set5", "noise_sigma": 0.05}}))
    a, b = load_config(toml), load_config(js)
    assert a == b
    assert a.lambda_kd == 10.0 and a.setting == "set5" and a.constants.noise_sigma == 0.05


def test_round_trip_through_to_dict():
    cfg = ExperimentConfig(name="r", variant="kl", lambda_kd=3.0, ratio=2.0)
    assert from_mapping(cfg.to_dict()) == cfg


def test_every_problem_is_reported():
    raw = {"bogus": 1, "epochs": 0, "lambda_kd": 5, "weights": {"divergence": "cosine", "nope": 2},
           "data": {"setting": "set4", "size": 30}}
    with pytest.raises(ConfigError) as info:
        from_mapping(raw)
    text = "\n".join(info.value.errors)
    for needle in ("bogus", "epochs", "lambda_kd: belongs in the [weights]", "divergence", "weights.nope",
                   "setting", "size"):
        assert needle in text
    assert len(info.value.errors) >= 7


def test_variant_constraints():
    with pytest.raises(ConfigError, match="lambda_kd > 0"):
        ExperimentConfig(variant="kl", lambda_kd=0.0).validate()
    with pytest.raises(ConfigError, match="lambda_ent > 0"):
        ExperimentConfig(variant="kl_ent", lambda_ent=0.0).validate()
    with pytest.raises(ConfigError, match="ent_start"):
        ExperimentConfig(variant="kl_ent", epochs=10, ent_start=10).validate()
    ExperimentConfig(variant="kl", lambda_ent=0.0).validate()


def test_effective_weights_per_variant():
    cfg = ExperimentConfig()
    assert cfg.effective_weights("decoupled") == {"lambda_w": 0.001, "lambda_kd": 0.0, "lambda_ent": 0.0}
    assert cfg.effective_weights("kl")["lambda_ent"] == 0.0
    assert cfg.effective_weights("single") == {"lambda_w": 1.0, "lambda_kd": 0.0, "lambda_ent": 0.0}
    assert cfg.effective_weights("lower_bound") == {"lambda_w": 0.0, "lambda_kd": 0.0, "lambda_ent": 0.0}


def test_overrides():
    raw = apply_overrides({}, ["lambda_kd=10", "data.ratio=2", "variant=kl", "seeds=[4, 5]",
                               "smooth=false", "noise_sigma=0.2"])
    cfg = from_mapping(raw)
    assert cfg.lambda_kd == 10 and cfg.ratio == 2 and cfg.variant == "kl" and cfg.seeds == [4, 5]
    assert cfg.smooth is False and cfg.constants.noise_sigma == 0.2
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["model.depth=3"])


def test_parse_value():
    assert parse_value("1e-3") == 1e-3
    assert parse_value("kl") == "kl"
    assert parse_value("True") is True
    assert parse_value("[1, 2]") == [1, 2]


def test_bad_files(tmp_path):
    bad = tmp_path / "c.toml"
    bad.write_text("name = \n")
    with pytest.raises(ConfigError):
        load_config(bad)
    yaml = tmp_path / "c.yaml"
    yaml.write_text("a: 1\n")
    with pytest.raises(ConfigError):
        load_config(yaml)
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.toml")


def test_field_docs_cover_every_key():
    keys = {k for k, _, _ in field_docs()}
    assert {"lambda_kd", "setting", "noise_sigma", "epochs", "ent_start"} <= keys
    assert "constants" not in keys
