import pytest

from nyoforge.config import load_config, parse_config
from nyoforge.errors import ConfigError
from nyoforge.model import PRESETS

from conftest import write_run_config


def test_load_resolves_relative_paths(tmp_path, tokenizer):
    cfg = load_config(write_run_config(tmp_path, tokenizer))
    assert [d.name for d in cfg.datasets] == ["A", "B"]
    assert cfg.datasets[0].root == tmp_path / "data/A"
    assert cfg.tokenizer.path == tmp_path / "tok.txt"
    assert cfg.runtime.checkpoint_dir == tmp_path / "ckpt"
    assert cfg.weights == {"A": 0.6, "B": 0.4}
    assert cfg.model.d_model == 16 and cfg.optim.max_lr == 1e-2
    assert cfg.validate() == []


def test_defaults_follow_pretraining_recipe():
    cfg = parse_config({})
    assert cfg.optim.beta1 == 0.9 and cfg.optim.beta2 == 0.95
    assert cfg.optim.weight_decay == 0.1 and cfg.optim.clip_norm == 1.0
    assert cfg.optim.warmup_steps == 2000 and cfg.optim.final_lr_ratio == 0.1
    assert cfg.optim.max_lr == 3.0e-4
    assert cfg.sft.lr == 2e-5
    assert cfg.model.loss.mode == "maxz"


def test_preset_with_overrides():
    cfg = parse_config({"model": {"preset": "wonton7b", "n_layers": 2, "loss": {"mode": "auxz"}}})
    assert cfg.model.d_model == PRESETS["wonton7b"].d_model
    assert cfg.model.n_layers == 2
    assert cfg.model.loss.mode == "auxz"


@pytest.mark.parametrize(
    "data",
    [
        {"bogus": {}},
        {"model": {"preset": "nope"}},
        {"model": {"width": 3}},
        {"model": {"d_model": 10, "n_heads": 4}},
        {"optim": {"warmup_steps": 10, "total_steps": 5}},
        {"runtime": {"rank": 2, "world_size": 2}},
        {"runtime": {"exhaustion": "loop"}},
        {"datasets": [{"name": "a"}]},
        {"datasets": [{"name": "a", "path": "x", "weight": -1}]},
        {"datasets": [{"name": "a", "path": "x"}, {"name": "a", "path": "y"}]},
    ],
)
def test_bad_configs(data):
    with pytest.raises(ConfigError):
        parse_config(data)


def test_validate_reports_missing_paths(tmp_path):
    cfg = parse_config({"datasets": [{"name": "a", "path": "missing"}], "tokenizer": {"vocab_size": 300}}, tmp_path)
    problems = cfg.validate()
    assert any("does not exist" in p for p in problems)
    assert any("vocab_size" in p for p in problems)


def test_unparseable_file(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[runtime\nseed = 1")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
