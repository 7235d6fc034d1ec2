import pytest

from d2v.config import RunConfig, env_overrides, preset, preset_path
from d2v.errors import ConfigError


def write(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return p


def test_speech_preset_values():
    rc = preset("speech", environ={})
    assert (rc["ema"]["tau0"], rc["ema"]["tau_e"], rc["ema"]["tau_n"]) == (0.999, 0.9999, 30000)
    assert rc["target"]["k"] == 8
    assert (rc["masking"]["p"], rc["masking"]["span"]) == (0.065, 10)
    assert rc["loss"]["kind"] == "l2"
    lr = rc["lr"]
    assert (lr["peak"], lr["warmup_frac"], lr["hold_frac"], lr["decay_frac"]) == (5e-4, 0.03, 0.90, 0.07)
    assert rc["frontend"]["strides"] == [5, 2, 2, 2, 2, 2, 2]
    assert rc["optim"]["grad_clip"] == 2.0


def test_text_and_vision_preset_values():
    text = preset("text", environ={})
    assert (text["target"]["k"], text["loss"]["beta"]) == (10, 4.0)
    assert (text["ema"]["tau_n"], text["lr"]["peak"], text["masking"]["rate"]) == (100000, 2e-4, 0.15)
    vision = preset("vision", environ={})
    assert (vision["target"]["k"], vision["loss"]["beta"], vision["ema"]["tau0"]) == (6, 2.0, 0.9998)
    assert vision["lr"]["kind"] == "cosine" and vision["masking"]["ratio"] == 0.6


def test_k_larger_than_layers_rejected(tmp_path):
    p = write(tmp_path, '[run]\nmodality = "vision"\n[model]\nlayers = 2\n[target]\nk = 3\n')
    with pytest.raises(ConfigError, match="target.k=3 exceeds model.layers=2"):
        RunConfig.load(p, environ={})


def test_unknown_keys_and_sections_rejected(tmp_path):
    with pytest.raises(ConfigError, match="model.depth"):
        RunConfig.load(write(tmp_path, "[model]\ndepth = 3\n"), environ={})
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.load(write(tmp_path, "[bogus]\nx = 1\n"), environ={})


def test_cross_field_rules(tmp_path):
    with pytest.raises(ConfigError, match="does not fit modality"):
        RunConfig.load(write(tmp_path, '[run]\nmodality = "speech"\n[masking]\nkind = "block"\n'), environ={})
    with pytest.raises(ConfigError):
        RunConfig.load(write(tmp_path, '[loss]\nkind = "l2"\nbeta = 1.0\n'), environ={})
    rc = RunConfig.load(write(tmp_path, '[loss]\nkind = "smooth_l1"\n'), environ={})
    assert rc["loss"]["beta"] == 1.0
    with pytest.raises(ConfigError, match="modality"):
        RunConfig.load(write(tmp_path, '[run]\nmodality = "video"\n'), environ={})


def test_missing_file_and_bad_syntax(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        RunConfig.load(tmp_path / "none.toml")
    with pytest.raises(ConfigError):
        RunConfig.load(write(tmp_path, "[model\n"), environ={})


def test_env_overrides():
    env = {"D2V_TARGET_K": "2", "D2V_LR_PEAK": "1e-3", "D2V_RUN_MODALITY": "speech", "HOME": "/x"}
    assert env_overrides(env) == {"target": {"k": 2}, "lr": {"peak": 1e-3}, "run": {"modality": "speech"}}
    rc = preset("speech", environ={"D2V_TARGET_K": "3", "D2V_TRAIN_TOTAL_STEPS": "7"})
    assert rc["target"]["k"] == 3 and rc["train"]["total_steps"] == 7
    with pytest.raises(ConfigError):
        env_overrides({"D2V_NOPE_X": "1"})
    with pytest.raises(ConfigError, match="unknown config key"):
        preset("speech", environ={"D2V_TARGET_DEPTH": "3"})


def test_fingerprint_tracks_content_not_output_dir():
    a = preset("vision", environ={})
    assert a.fingerprint() == preset("vision", environ={}).fingerprint()
    assert a.replace(run={"out": "elsewhere"}).fingerprint() == a.fingerprint()
    assert a.replace(target={"k": 1}).fingerprint() != a.fingerprint()
    assert len(a.fingerprint()) == 64


def test_typed_views():
    rc = preset("speech", environ={})
    cfg = rc.train_config(seed=5)
    assert cfg.seed == 5 and cfg.model.frontend.total_stride == 320
    assert cfg.reset_teacher_at is None
    text = preset("text", environ={})
    with pytest.raises(ConfigError, match="vocabulary"):
        text.train_config()


def test_preset_path_unknown():
    with pytest.raises(ConfigError):
        preset_path("video")
