from pathlib import Path

import pytest

from config import ExperimentConfig, config_hash, load_experiment, read_experiment_file
from errors import ConfigError

CONFIGS = Path(__file__).parent / "configs"


def test_defaults_match_desk_file():
    desk = load_experiment(CONFIGS / "desk.env")
    assert desk.train.q_lower == 7 and desk.train.q_upper == 10
    assert desk.train.ema_decay == 0.999
    assert desk.cqa_train.lambda_scl == 0.01


def test_smoke_includes_desk():
    cfg = load_experiment(CONFIGS / "smoke.env")
    assert cfg.geometry.image_size == 64
    assert cfg.cqa_net.embed_dims == [16, 32, 64]
    assert cfg.cli.spectrum_id == "spec-b"
    assert cfg.output_dir == "runs/smoke"


def test_ablation_files():
    no_cqa = load_experiment(CONFIGS / "no_cqa.env")
    assert no_cqa.train.no_cqa and (no_cqa.train.q_lower, no_cqa.train.q_upper) == (1, 10)
    assert load_experiment(CONFIGS / "no_ema.env").train.no_ema
    assert load_experiment(CONFIGS / "supervised.env").train.no_cli_loss
    assert load_experiment(CONFIGS / "li_concat.env").train.input_mode == "concat"


def test_overrides_win():
    cfg = load_experiment(CONFIGS / "smoke.env", ["train.q_lower=9", "sim.photon_count=5e5"])
    assert cfg.train.q_lower == 9
    assert cfg.sim.photon_count == 5e5
    assert cfg.sim.spectrum_id == "spec-a"


@pytest.mark.parametrize("overrides", [
    ["train.q_lower=8", "train.q_upper=7"],
    ["train.ema_decay=1.0"],
    ["train.unknown=1"],
    ["sim.spectrum_id=spec-z"],
    ["cqa_net.image_size=96"],
    ["no-equals-sign"],
])
def test_invalid_config(overrides):
    with pytest.raises(ConfigError):
        load_experiment(None, overrides)


def test_include_cycle(tmp_path):
    (tmp_path / "a.env").write_text("include=b.env\n")
    (tmp_path / "b.env").write_text("include=a.env\n")
    with pytest.raises(ConfigError):
        read_experiment_file(tmp_path / "a.env")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "nope.env")


def test_config_hash():
    a = ExperimentConfig()
    assert config_hash(a) == config_hash(ExperimentConfig())
    assert len(config_hash(a)) == 16
    assert config_hash(a) != config_hash(load_experiment(None, ["train.q_lower=9"]))
    assert config_hash(a) == config_hash(a.model_dump(mode="json"))
