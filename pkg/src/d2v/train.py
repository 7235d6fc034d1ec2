"""Optimization loop: Adam, learning-rate schedules, the student/teacher step and collapse tracking."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .distill import (EmaSchedule, LossConfig, TargetBatch, TargetConfig, build_targets, ema_update,
                      make_teacher, regression_loss, student_predict, tau_at)
from .errors import ConfigError, NumericError, StateError
from .frontends import ImageSpec, TextSpec
from .masking import MaskingConfig, stack_loss_masks
from .model import ModelSpec, init_params, student_forward, teacher_taps
from .numerics import Streams, Tensor


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "tri_stage"
    peak: float = 5e-4
    warmup_frac: float = 0.03
    hold_frac: float = 0.90
    decay_frac: float = 0.07

    def __post_init__(self):
        if self.kind not in ("tri_stage", "cosine"):
            raise ConfigError(f"lr.kind must be tri_stage or cosine, got {self.kind!r}")
        if self.peak <= 0:
            raise ConfigError("lr.peak must be positive")
        if self.kind == "tri_stage" and not math.isclose(self.warmup_frac + self.hold_frac + self.decay_frac, 1.0):
            raise ConfigError("lr.warmup_frac + lr.hold_frac + lr.decay_frac must sum to 1")
        if not 0 <= self.warmup_frac <= 1:
            raise ConfigError("lr.warmup_frac must lie in [0, 1]")


def lr_at(step: int, s: LrSchedule, total_steps: int) -> float:
    """Tri-stage (linear warmup, hold, linear decay to 0) or linear warmup + half-cosine to 0."""
    if total_steps <= 0:
        return s.peak
    step = min(max(step, 0), total_steps)
    if step == total_steps:
        return 0.0
    warm = s.warmup_frac * total_steps
    if step < warm:
        return s.peak * step / warm
    if s.kind == "cosine":
        span = total_steps - warm
        return s.peak * 0.5 * (1 + math.cos(math.pi * (step - warm) / span)) if span > 0 else 0.0
    hold_end = warm + s.hold_frac * total_steps
    if step < hold_end:
        return s.peak
    decay = s.decay_frac * total_steps
    return max(0.0, s.peak * (1 - (step - hold_end) / decay)) if decay > 0 else 0.0


@dataclass(frozen=True)
class OptimConfig:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("optim.betas must be two values in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("optim.eps must be positive; weight_decay and grad_clip non-negative")


@dataclass
class AdamMoments:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamMoments":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, moments: AdamMoments, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> tuple[dict, AdamMoments]:
    """Bias-corrected Adam with decoupled weight decay; returns fresh parameter leaves."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}; step aborted")
    b1, b2 = betas
    t = moments.t + 1
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise StateError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * moments.m[k] + (1 - b1) * g
        v = b2 * moments.v[k] + (1 - b2) * g * g
        upd = p.data * (1 - lr * weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[k] = Tensor._wrap(upd.astype(p.dtype), True)
        new_m[k], new_v[k] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, AdamMoments(new_m, new_v, t)


def clip_grads(grads: dict, max_norm: float) -> tuple[dict, float]:
    # summed in key order so the value does not depend on dict insertion order
    norm = math.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in sorted(grads)))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-6)
        grads = {k: (g * s).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


@dataclass
class CollapseReport:
    target_std: float
    pred_std: float
    flags: dict = field(default_factory=dict)
    insufficient: bool = False


def _mean_std(x: np.ndarray) -> float:
    return float(np.mean(np.std(np.asarray(x, dtype=np.float64), axis=0)))


def collapse_report(targets: TargetBatch | np.ndarray, preds, threshold: float = 0.01) -> CollapseReport:
    """Per-dimension std across masked positions, averaged over dimensions."""
    y = targets.targets.data if isinstance(targets, TargetBatch) else np.asarray(targets)
    f = preds.data if isinstance(preds, Tensor) else np.asarray(preds)
    if y.shape[0] < 2:
        return CollapseReport(0.0, 0.0, {"target_low": False, "pred_low": False}, insufficient=True)
    ts, ps = _mean_std(y), _mean_std(f)
    return CollapseReport(ts, ps, {"target_low": ts < threshold, "pred_low": ps < threshold})


@dataclass
class CollapseTracker:
    """Fires once ``target_std`` stays below ``threshold`` for ``window`` consecutive steps."""

    threshold: float = 0.01
    window: int = 50
    run: int = 0
    fired_at: int | None = None

    def update(self, step: int, report: CollapseReport) -> bool:
        if report.insufficient:
            return self.fired_at is not None
        self.run = self.run + 1 if report.target_std < self.threshold else 0
        if self.run >= self.window and self.fired_at is None:
            self.fired_at = step
        return self.fired_at is not None


@dataclass(frozen=True)
class TrainConfig:
    """Everything :func:`train_step` needs; a projection of the run config."""

    model: ModelSpec
    masking: MaskingConfig
    ema: EmaSchedule
    target: TargetConfig
    loss: LossConfig
    lr: LrSchedule
    optim: OptimConfig = OptimConfig()
    total_steps: int = 1000
    batch_size: int = 8
    seed: int = 0
    precision: str = "standard"
    reset_teacher_at: int | None = None
    collapse_threshold: float = 0.01
    collapse_window: int = 50

    def __post_init__(self):
        if self.precision not in ("standard", "wide"):
            raise ConfigError("train.precision must be standard or wide")
        if self.target.k > self.model.encoder.layers:
            raise ConfigError(f"target.k={self.target.k} exceeds model.layers={self.model.encoder.layers}")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ConfigError("train.total_steps must be >= 0 and train.batch_size >= 1")

    @property
    def dtype(self):
        return nx.WIDE if self.precision == "wide" else nx.STANDARD


@dataclass
class TrainState:
    step: int
    params: dict
    teacher: dict
    moments: AdamMoments
    collapse: CollapseTracker
    seed: int

    @property
    def streams(self) -> Streams:
        return Streams(self.seed)


def init_state(cfg: TrainConfig) -> TrainState:
    streams = Streams(cfg.seed)
    params = init_params(cfg.model, streams, cfg.dtype)
    return TrainState(0, params, make_teacher(params), AdamMoments.zeros_like(params),
                      CollapseTracker(cfg.collapse_threshold, cfg.collapse_window), cfg.seed)


def sample_plans(cfg: TrainConfig, batch, rng: np.random.Generator) -> list:
    spec = cfg.model.frontend
    batch = np.asarray(batch)
    T = cfg.model.seq_len(batch.shape)
    grid = spec.grid if isinstance(spec, ImageSpec) else None
    extra = {}
    if isinstance(spec, TextSpec):
        extra = {"vocab_size": spec.size, "n_special": len(spec.reserved_ids)}
    return [cfg.masking.plan(T, rng, grid=grid, **extra) for _ in range(batch.shape[0])]


def student_loss(params: dict, teacher: dict, cfg: TrainConfig, batch, plans, rng=None,
                 strict: bool = False):
    """Steps (1)-(4) of a training step; returns ``(loss, targets, predictions)``."""
    loss_mask = stack_loss_masks(plans)
    emb, final = student_forward(params, cfg.model, batch, plans, rng)
    shared = None if isinstance(cfg.model.frontend, TextSpec) else emb
    taps = teacher_taps(teacher, params, cfg.model, batch, cfg.dtype, shared)
    targets = build_targets(taps, cfg.target, loss_mask, strict=strict)
    pred = student_predict(final, loss_mask, params["head.w"], params["head.b"])
    return regression_loss(pred, targets.targets, cfg.loss), targets, pred


def train_step(state: TrainState, batch, cfg: TrainConfig, plans=None) -> tuple[TrainState, dict]:
    """One update: frontend, teacher targets, student prediction, loss, Adam, then EMA."""
    t0 = time.perf_counter()
    step = state.step
    streams = state.streams
    if plans is None:
        plans = sample_plans(cfg, batch, streams.generator("mask", step))
    drop_rng = streams.generator("dropout", step) if (cfg.model.encoder.dropout or cfg.model.encoder.stochastic_depth) else None

    params = state.params
    teacher = state.teacher
    schedule_origin = 0
    if cfg.reset_teacher_at is not None and step >= cfg.reset_teacher_at:
        schedule_origin = cfg.reset_teacher_at
        if step == cfg.reset_teacher_at:
            teacher = make_teacher(params)

    try:
        loss, targets, pred = student_loss(params, teacher, cfg, batch, plans, drop_rng)
        nx.zero_grad(params.values())
        nx.backward(loss)
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
        grads, gnorm = clip_grads(grads, cfg.optim.grad_clip)
        lr = lr_at(step - schedule_origin, cfg.lr, cfg.total_steps - schedule_origin)
        new_params, moments = adam_step(params, grads, state.moments, lr, cfg.optim.betas, cfg.optim.eps,
                                        cfg.optim.weight_decay)
    except NumericError as exc:
        raise NumericError(f"step {step}: {exc}") from exc

    tau = tau_at(step, cfg.ema)
    new_teacher = ema_update(teacher, new_params, tau)
    report = collapse_report(targets, pred, cfg.collapse_threshold)
    tracker = replace(state.collapse)
    collapsed = tracker.update(step, report)

    metrics = {"step": step, "loss": float(loss.item()), "lr": lr, "tau": tau,
               "target_std": report.target_std, "pred_std": report.pred_std,
               "grad_norm": gnorm, "masked": int(len(targets)), "collapsed": collapsed,
               "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
    new_state = TrainState(step + 1, new_params, new_teacher, moments, tracker, state.seed)
    return new_state, metrics


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=min(batch_size, n), replace=False)


def fit(cfg: TrainConfig, data: np.ndarray, state: TrainState | None = None, steps: int | None = None,
        log=None, stop_on_collapse: bool = False) -> tuple[TrainState, list[dict]]:
    """Run ``steps`` (default: up to ``total_steps``) updates over ``data`` sampled per step."""
    state = state or init_state(cfg)
    end = cfg.total_steps if steps is None else state.step + steps
    history = []
    data = np.asarray(data)
    while state.step < end:
        idx = batch_indices(len(data), cfg.batch_size, state.streams.generator("data", state.step))
        state, metrics = train_step(state, data[idx], cfg)
        history.append(metrics)
        if log is not None:
            log.write(json.dumps(metrics) + "\n")
        if stop_on_collapse and metrics["collapsed"]:
            break
    return state, history



def loss_grad_check(state: TrainState, cfg: TrainConfig, batch, plans=None, per_param: int = 2,
                    eps: float | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Central-difference check of the full student loss, per parameter tensor.

    Targets are built once from the unperturbed parameters and held fixed, since
    the loss treats them as constants.  ``per_param`` coordinates are probed in
    each tensor; returns the worst relative error per parameter name.
    """
    rng = rng or np.random.default_rng(0)
    eps = eps if eps is not None else (1e-6 if cfg.dtype == nx.WIDE else 1e-3)
    if plans is None:
        plans = sample_plans(cfg, batch, state.streams.generator("mask", state.step))
    loss_mask = stack_loss_masks(plans)
    emb = student_forward(state.params, cfg.model, batch, plans)[0]
    shared = None if isinstance(cfg.model.frontend, TextSpec) else emb
    taps = teacher_taps(state.teacher, state.params, cfg.model, batch, cfg.dtype, shared)
    targets = build_targets(taps, cfg.target, loss_mask, strict=False).targets

    errors = {}
    for name in sorted(state.params):
        base = state.params[name]

        def f(x, name=name):
            params = dict(state.params)
            params[name] = x
            _, final = student_forward(params, cfg.model, batch, plans)
            pred = student_predict(final, loss_mask, params["head.w"], params["head.b"])
            return regression_loss(pred, targets, cfg.loss)

        coords = rng.choice(base.size, size=min(per_param, base.size), replace=False)
        errors[name] = nx.grad_check(f, base, eps=eps, coords=coords)
    return errors
