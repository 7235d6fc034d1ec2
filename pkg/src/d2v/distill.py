"""EMA teacher, layer-averaged target construction and the regression objective."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics as nx
from .errors import ConfigError, StateError
from .numerics import Tensor
from .transformer import ActivationTaps

TEACHER_PREFIX = "blocks."


class Site(str, Enum):
    FFN_OUT = "ffn_out"
    ATTN_OUT = "attn_out"
    BLOCK_OUT = "block_out"


class Norm(str, Enum):
    INSTANCE_FREE = "instance_free"
    LAYER_FREE = "layer_free"
    NONE = "none"


class LossKind(str, Enum):
    SMOOTH_L1 = "smooth_l1"
    L2 = "l2"


@dataclass(frozen=True)
class EmaSchedule:
    tau0: float = 0.999
    tau_e: float = 0.9999
    tau_n: int = 30000

    def __post_init__(self):
        if not 0 <= self.tau0 <= self.tau_e <= 1:
            raise ConfigError("ema needs 0 <= tau0 <= tau_e <= 1")
        if self.tau_n < 0:
            raise ConfigError("ema.tau_n must be non-negative")


@dataclass(frozen=True)
class TargetConfig:
    k: int = 8
    site: Site = Site.FFN_OUT
    norm: Norm = Norm.INSTANCE_FREE

    def __post_init__(self):
        object.__setattr__(self, "site", Site(self.site))
        object.__setattr__(self, "norm", Norm(self.norm))
        if self.k < 1:
            raise ConfigError("target.k must be at least 1")


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.L2
    beta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.kind is LossKind.SMOOTH_L1 and (self.beta is None or self.beta <= 0):
            raise ConfigError("loss.beta must be positive for smooth_l1")
        if self.kind is LossKind.L2 and self.beta is not None:
            raise ConfigError("loss.beta only applies to smooth_l1")


@dataclass
class TargetBatch:
    positions: np.ndarray
    targets: Tensor

    def __len__(self) -> int:
        return int(self.positions.size)


def tau_at(step: int, s: EmaSchedule) -> float:
    if step >= s.tau_n:
        return s.tau_e
    return s.tau0 + (s.tau_e - s.tau0) * step / s.tau_n


def make_teacher(student: dict) -> dict:
    """Wide-precision copies of the student's Transformer blocks.

    Frontend, positional table, mask embedding and head stay with the student.
    """
    return {k: Tensor(v.data, dtype=nx.WIDE) for k, v in student.items() if k.startswith(TEACHER_PREFIX)}


def ema_update(teacher: dict, student: dict, tau: float) -> dict:
    """``teacher <- tau * teacher + (1 - tau) * student``, accumulated in float64."""
    out = {}
    for name, t in teacher.items():
        s = student.get(name)
        if s is None:
            raise StateError(f"student has no parameter {name!r}")
        if s.shape != t.shape:
            raise StateError(f"{name}: teacher shape {t.shape} != student shape {s.shape}")
        acc = tau * t.data.astype(nx.WIDE) + (1.0 - tau) * s.data.astype(nx.WIDE)
        out[name] = Tensor._wrap(acc, False)
    return out


def teacher_view(teacher: dict, student: dict, dtype) -> dict:
    """Parameter dict for a teacher pass: EMA blocks cast to ``dtype``, shared tensors from the student."""
    view = {k: Tensor._wrap(v.data, False) for k, v in student.items() if not k.startswith(TEACHER_PREFIX)}
    for k, v in teacher.items():
        view[k] = Tensor._wrap(v.data.astype(dtype), False)
    return view


def normalize_block(a, mode, strict: bool = True, eps: float = 1e-6) -> Tensor:
    """Parameter-free normalization of one block's activations.

    INSTANCE_FREE standardizes each feature over the time axis of its sample;
    LAYER_FREE standardizes each position over features.  ``strict`` raises on
    a zero-variance slice; otherwise ``eps`` is added under the square root.
    """
    a = nx.as_tensor(a)
    mode = Norm(mode)
    if mode is Norm.NONE:
        return a
    axis = -2 if mode is Norm.INSTANCE_FREE else -1
    return nx.normalize(a, axis=axis, eps=0.0 if strict else eps)


def _flat_positions(masked, shape: tuple) -> np.ndarray:
    lead = shape[:-1]
    n = int(np.prod(lead))
    m = np.asarray(masked)
    if m.dtype == bool:
        if m.shape != lead:
            raise StateError(f"mask of shape {m.shape} does not cover activations {lead}")
        return np.flatnonzero(m)
    m = m.astype(np.int64).reshape(-1)
    if m.size and (m.min() < 0 or m.max() >= n):
        raise StateError(f"masked index outside [0, {n})")
    return m


def build_targets(taps: ActivationTaps, cfg: TargetConfig, masked, strict: bool = True,
                  eps: float = 1e-6) -> TargetBatch:
    """Average the normalized site outputs of the top ``k`` blocks, then gather masked rows.

    ``masked`` is a boolean array over the leading axes of the activations, or
    flat row indices.  The returned targets carry no graph.
    """
    blocks = taps.site(Site(cfg.site).value)
    L = len(blocks)
    if not 1 <= cfg.k <= L:
        raise ConfigError(f"target.k={cfg.k} must lie in [1, {L}]")
    with nx.no_grad():
        acc = None
        for a in blocks[L - cfg.k:]:
            n = normalize_block(a.detach(), cfg.norm, strict, eps).data
            acc = n.astype(nx.WIDE) if acc is None else acc + n
        y = (acc / cfg.k).astype(blocks[-1].dtype)
    pos = _flat_positions(masked, y.shape)
    rows = y.reshape(-1, y.shape[-1])[pos]
    if not np.all(np.isfinite(rows)):
        raise StateError("non-finite targets")
    return TargetBatch(pos, Tensor._wrap(np.ascontiguousarray(rows), False))


def student_predict(final: Tensor, masked, head_w: Tensor, head_b: Tensor | None = None) -> Tensor:
    """Gather masked rows of the student's last block and apply the linear head."""
    pos = _flat_positions(masked, final.shape)
    rows = nx.gather(nx.reshape(final, (-1, final.shape[-1])), pos, axis=0)
    out = nx.matmul(rows, head_w)
    return nx.add(out, head_b) if head_b is not None else out


def regression_loss(pred: Tensor, target: Tensor, cfg: LossConfig) -> Tensor:
    """Mean Smooth-L1 (or half squared error) over all elements; 0 when empty."""
    target = nx.as_tensor(target)
    if pred.shape != target.shape:
        raise StateError(f"prediction {pred.shape} and target {target.shape} shapes differ")
    n = pred.size
    r = target.data - pred.data
    if cfg.kind is LossKind.L2:
        per = 0.5 * r * r
        dr = r
    else:
        beta = cfg.beta
        small = np.abs(r) <= beta
        per = np.where(small, 0.5 * r * r / beta, np.abs(r) - 0.5 * beta)
        dr = np.where(small, r / beta, np.sign(r))
    value = np.asarray(per.sum() / n if n else 0.0, dtype=pred.dtype)
    scale = pred.dtype.type(1.0 / n) if n else pred.dtype.type(0.0)

    def bw(g):
        gd = (g * scale) * dr
        return -gd.astype(pred.dtype), gd.astype(target.dtype)

    return nx.make_op("regression_loss", value, (pred, target), bw)
