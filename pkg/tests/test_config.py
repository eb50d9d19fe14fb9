import json

import pytest

from chronorisk.config import DATA_DIR_ENV, ExperimentConfig, load_config
from chronorisk.errors import ConfigError
from chronorisk.featurize import StudyDesign


def test_roundtrip_lossless():
    cfg = ExperimentConfig()
    cfg.designs = [StudyDesign(5, 1), StudyDesign(3, 2, "concat")]
    cfg.models = {"gbt": {"n_rounds": 7}, "lr": {"C": 0.5}}
    back = ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back.to_json() == cfg.to_json()
    assert back.hash == cfg.hash


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"sead": 3})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"cohort": {"sample_fractoin": 0.5}})


@pytest.mark.parametrize("patch", [
    {"models": {"gbt": {"n_rounds": -1}}},
    {"models": {"highway": {"dropout": 1.5}}},
    {"models": {"lr": {"C": -1}}},
    {"models": {"svm": {}}},
    {"evaluation": {"skew_prevalence": 1.5}},
    {"threads": 0},
    {"attribution": {"ig_baseline": "median"}},
])
def test_out_of_range(patch):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(patch)


def test_hash_ignores_locations():
    a = ExperimentConfig()
    b = ExperimentConfig.from_json({"data_dir": "/x", "out_dir": "/y", "threads": 4})
    assert a.hash == b.hash
    assert a.with_seed(5).hash != a.hash


def test_with_seed_propagates():
    cfg = ExperimentConfig().with_seed(99)
    assert cfg.seed == 99 and cfg.generator.seed == 99


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")


def test_env_data_dir(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text("{}")
    monkeypatch.setenv(DATA_DIR_ENV, "/data/here")
    assert load_config(p).data_dir == "/data/here"
    p.write_text(json.dumps({"data_dir": "mine"}))
    assert load_config(p).data_dir == "mine"


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("default.json", "small.json"):
        cfg = load_config(root / name)
        assert 5000 <= cfg.generator.n_individuals <= 20000 or name == "small.json"
