import math

import numpy as np
import pytest

from d2v.cli import tiny
from d2v.config import preset
from d2v.distill import TargetBatch
from d2v.errors import ConfigError, NumericError
from d2v.eval import load_dataset, vocab_of
from d2v.masking import MaskPlan
from d2v.numerics import Tensor
from d2v.train import (AdamMoments, CollapseReport, CollapseTracker, LrSchedule, adam_step, clip_grads,
                       collapse_report, fit, init_state, loss_grad_check, lr_at, sample_plans, train_step)


def small(modality, precision="standard", **changes):
    changes["train"] = {"precision": precision, "total_steps": 50, **changes.get("train", {})}
    rc = tiny(preset(modality)).replace(**changes)
    ds = load_dataset(rc)
    return rc.train_config(vocab_of(rc, ds)), ds.x


def test_tri_stage_schedule():
    s = LrSchedule("tri_stage", 5e-4, 0.03, 0.90, 0.07)
    assert lr_at(150, s, 10000) == pytest.approx(2.5e-4, rel=1e-12)
    assert lr_at(5000, s, 10000) == 5e-4
    assert lr_at(10000, s, 10000) == 0.0
    assert lr_at(0, s, 10000) == 0.0
    assert lr_at(9650, s, 10000) == pytest.approx(2.5e-4, rel=1e-9)


def test_cosine_schedule():
    s = LrSchedule("cosine", 2e-3, warmup_frac=0.05)
    assert lr_at(25, s, 1000) == pytest.approx(1e-3)
    assert lr_at(50, s, 1000) == pytest.approx(2e-3)
    assert lr_at(525, s, 1000) == pytest.approx(1e-3)
    assert lr_at(1000, s, 1000) == pytest.approx(0.0, abs=1e-18)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        LrSchedule("tri_stage", 1e-3, 0.1, 0.1, 0.1)
    with pytest.raises(ConfigError):
        LrSchedule("step")
    with pytest.raises(ConfigError):
        LrSchedule(peak=0.0)


def leaf(v):
    return Tensor(np.asarray(v, dtype=np.float64), requires_grad=True, dtype=np.float64)


def test_adam_single_scalar_step_matches_hand_computation():
    p = {"w": leaf([0.5])}
    g = {"w": np.array([0.2])}
    new, m = adam_step(p, g, AdamMoments.zeros_like(p), lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    m1, v1 = 0.1 * 0.2, 0.001 * 0.04
    mhat, vhat = m1 / 0.1, v1 / 0.001
    assert new["w"].data[0] == pytest.approx(0.5 - 0.1 * mhat / (math.sqrt(vhat) + 1e-8), abs=1e-15)
    assert m.t == 1 and m.m["w"][0] == pytest.approx(m1)


def test_adam_zero_grads_and_weight_decay():
    p = {"w": leaf([1.0, -2.0])}
    mom = AdamMoments({"w": np.array([0.5, 0.5])}, {"w": np.array([0.1, 0.1])}, 3)
    new, m2 = adam_step(p, {"w": np.zeros(2)}, mom, lr=0.0, weight_decay=0.0)
    np.testing.assert_array_equal(new["w"].data, p["w"].data)
    np.testing.assert_allclose(m2.m["w"], 0.45)
    np.testing.assert_allclose(m2.v["w"], 0.0999)
    new, _ = adam_step(p, {"w": np.zeros(2)}, AdamMoments.zeros_like(p), lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(new["w"].data, p["w"].data * (1 - 0.1 * 0.01), atol=1e-15)


def test_adam_rejects_non_finite_gradients():
    p = {"w": leaf([1.0])}
    with pytest.raises(NumericError):
        adam_step(p, {"w": np.array([np.nan])}, AdamMoments.zeros_like(p), 0.1)


def test_clip_grads():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grads(g, 1.0)
    assert norm == 5.0
    assert math.hypot(clipped["a"][0], clipped["b"][0]) == pytest.approx(1.0, abs=1e-6)
    same, _ = clip_grads(g, 0.0)
    assert same is g


def test_collapse_report_and_tracker():
    rng = np.random.default_rng(0)
    const = collapse_report(np.ones((10, 4)), np.ones((10, 4)))
    assert const.target_std == 0.0 and const.flags["target_low"]
    normal = collapse_report(rng.standard_normal((10000, 3)), rng.standard_normal((10000, 3)))
    assert abs(normal.target_std - 1.0) < 0.05
    assert collapse_report(np.ones((1, 4)), np.ones((1, 4))).insufficient
    t = CollapseTracker(0.01, window=3)
    low = CollapseReport(0.0, 0.0)
    high = CollapseReport(1.0, 1.0)
    assert not t.update(0, low) and not t.update(1, low)
    assert not t.update(2, high)
    assert not t.update(3, low) and not t.update(4, low)
    assert t.update(5, low) and t.fired_at == 5
    assert t.update(6, high)


def test_collapse_report_accepts_target_batch():
    y = TargetBatch(np.arange(3), Tensor(np.eye(3), dtype=np.float64))
    assert collapse_report(y, np.eye(3)).target_std == pytest.approx(np.std([1, 0, 0]))


@pytest.mark.parametrize("modality", ["vision", "speech", "text"])
def test_train_step_smoke(modality):
    cfg, x = small(modality)
    state = init_state(cfg)
    new, metrics = train_step(state, x[:2], cfg)
    assert math.isfinite(metrics["loss"]) and metrics["loss"] > 0
    assert new.step == 1 and state.step == 0
    for key in ("step", "loss", "lr", "tau", "target_std", "pred_std", "wall_ms"):
        assert key in metrics
    # teacher moved towards the updated student with the scheduled tau
    name = "blocks.0.ffn.w1"
    tau = metrics["tau"]
    expect = tau * state.teacher[name].data + (1 - tau) * new.params[name].data.astype(np.float64)
    np.testing.assert_allclose(new.teacher[name].data, expect, atol=1e-15)


def test_empty_masks_give_zero_loss_and_pure_decay():
    cfg, x = small("vision")
    state = init_state(cfg)
    T = cfg.model.seq_len(x.shape)
    plans = [MaskPlan.empty(T) for _ in range(2)]
    new, metrics = train_step(state, x[:2], cfg, plans)
    assert metrics["loss"] == 0.0
    lr = metrics["lr"]
    for k, p in state.params.items():
        np.testing.assert_allclose(new.params[k].data, p.data * (1 - lr * cfg.optim.weight_decay), rtol=1e-6)


def test_determinism_same_seed_same_metrics():
    cfg, x = small("speech")
    _, h1 = fit(cfg, x, steps=15)
    _, h2 = fit(cfg, x, steps=15)
    strip = lambda h: [{k: v for k, v in m.items() if k != "wall_ms"} for m in h]
    assert strip(h1) == strip(h2)


def test_plans_follow_modality():
    cfg, x = small("text")
    plans = sample_plans(cfg, x[:3], np.random.default_rng(0))
    assert len(plans) == 3 and all(p.length == x.shape[1] for p in plans)
    rand = np.concatenate([p.random_ids[p.random_ids >= 0] for p in plans])
    assert np.all(rand >= 3)


@pytest.mark.parametrize("modality", ["vision", "speech", "text"])
@pytest.mark.parametrize("precision,tol", [("standard", 1e-4), ("wide", 1e-6)])
def test_full_loss_gradients(modality, precision, tol):
    cfg, x = small(modality, precision)
    errs = loss_grad_check(init_state(cfg), cfg, x[:2], per_param=1)
    assert max(errs.values()) < tol


def test_teacher_reset_hook_restarts_schedule():
    cfg, x = small("vision", train={"reset_teacher_at": 3, "total_steps": 6})
    state, hist = fit(cfg, x)
    assert hist[3]["lr"] == 0.0  # warmup restarts from zero at the reset step
    assert [m["step"] for m in hist] == list(range(6))
