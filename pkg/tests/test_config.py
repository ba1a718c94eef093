import json

import pytest

from omnifield.config import ConfigError, RunConfig, apply_overrides, load_config, preset


@pytest.mark.parametrize("name", ["desk-synthetic", "climsim-thw", "epa-aqs"])
def test_presets_round_trip(name):
    cfg = preset(name)
    again = RunConfig.from_json(cfg.to_json())
    assert again.to_dict() == cfg.to_dict()
    cfg.validate()


def test_climsim_preset_values():
    cfg = preset("climsim-thw")
    m, t = cfg.model, cfg.train
    assert m.modalities == ["T", "H", "W"] and m.n_stages == 3
    assert (m.dim, m.n_latents, m.space_bands, m.space_scale, m.time_bands, m.time_scale) == (128, 128, 32, 15.0, 16, 10.0)
    assert (t.steps, t.batch_size, t.max_lr, t.min_lr, t.warmup_steps, t.weight_decay, t.horizon) == (
        100_000, 8, 8e-5, 8e-6, 1000, 1e-4, 6)


def test_epa_preset_values():
    cfg = preset("epa-aqs")
    assert len(cfg.model.modalities) == 6
    assert cfg.model.query_combine == "sum" and cfg.train.horizon == 5


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"preset": "desk-synthetic", "trian": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"width": 3}})
    with pytest.raises(ConfigError):
        RunConfig.from_json("{not json")
    with pytest.raises(ConfigError):
        preset("nope")


def test_file_settings_override_preset(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "desk-synthetic", "train": {"steps": 7, "warmup_steps": 2}}))
    cfg = load_config(p)
    assert cfg.train.steps == 7
    assert cfg.model.space_norm == preset("desk-synthetic").model.space_norm


def test_overrides_and_seed():
    cfg = apply_overrides(preset("desk-synthetic"), ["train.steps=12", "train.warmup_steps=3", "model.fusion=mid_fusion", "data.sparsity=~30"])
    assert cfg.train.steps == 12 and cfg.model.fusion == "mid_fusion" and cfg.data.sparsity == "~30"
    assert cfg.preset == "desk-synthetic"
    s = cfg.seeded(5)
    assert s.data.seed == s.model.seed == s.train.seed == 5
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["train.nosuch=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["train.steps"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["model.dim=7"])


def test_validate_catches_unknown_modalities():
    cfg = apply_overrides(preset("desk-synthetic"), ['train.input_modalities=["S3"]'])
    with pytest.raises(ConfigError):
        cfg.validate()
