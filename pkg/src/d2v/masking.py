"""Mask plans for each input modality.

A :class:`MaskPlan` describes one sample: which positions the student loses
and, for text, what replaces each of them.  Every sampler is a pure function
of its arguments and the generator it is handed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import ConfigError


class Action(IntEnum):
    REPLACE_MASK = 0
    KEEP = 1
    RANDOM_TOKEN = 2


@dataclass(frozen=True)
class MaskPlan:
    length: int
    masked: np.ndarray
    actions: np.ndarray = None
    random_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        masked = np.unique(np.asarray(self.masked, dtype=np.int64))
        if masked.size and (masked[0] < 0 or masked[-1] >= self.length):
            raise ConfigError(f"mask positions must lie in [0, {self.length})")
        actions = self.actions
        if actions is None:
            actions = np.full(masked.size, Action.REPLACE_MASK, dtype=np.int8)
        actions = np.asarray(actions, dtype=np.int8)
        if actions.shape != masked.shape:
            raise ConfigError("one action per masked position is required")
        if actions.size and (actions.min() < 0 or actions.max() > 2):
            raise ConfigError("unknown mask action")
        rand = self.random_ids
        if rand is None:
            rand = np.full(masked.size, -1, dtype=np.int64)
        rand = np.asarray(rand, dtype=np.int64)
        if rand.shape != masked.shape:
            raise ConfigError("random_ids must align with masked positions")
        if np.any((actions == Action.RANDOM_TOKEN) != (rand >= 0)):
            raise ConfigError("random_ids must be set exactly on RANDOM_TOKEN positions")
        object.__setattr__(self, "masked", masked)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "random_ids", rand)

    @classmethod
    def empty(cls, length: int) -> "MaskPlan":
        return cls(length, np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.masked.size)

    @property
    def fraction(self) -> float:
        return self.masked.size / self.length

    def loss_mask(self) -> np.ndarray:
        """Boolean ``[T]``: every selected position is regressed, whatever its action."""
        out = np.zeros(self.length, dtype=bool)
        out[self.masked] = True
        return out

    def replace_mask(self) -> np.ndarray:
        """Boolean ``[T]``: positions that receive the learned mask embedding."""
        out = np.zeros(self.length, dtype=bool)
        out[self.masked[self.actions == Action.REPLACE_MASK]] = True
        return out

    def apply_to_ids(self, ids) -> np.ndarray:
        """Token ids with RANDOM_TOKEN positions swapped for their drawn replacements."""
        ids = np.array(ids, dtype=np.int64)
        if ids.shape != (self.length,):
            raise ConfigError(f"plan covers {self.length} positions, got ids of shape {ids.shape}")
        sel = self.actions == Action.RANDOM_TOKEN
        ids[self.masked[sel]] = self.random_ids[sel]
        return ids


def stack_loss_masks(plans: Sequence[MaskPlan]) -> np.ndarray:
    return np.stack([p.loss_mask() for p in plans])


def stack_replace_masks(plans: Sequence[MaskPlan]) -> np.ndarray:
    return np.stack([p.replace_mask() for p in plans])


def block_mask(grid: tuple[int, int], ratio: float, min_block: int, rng: np.random.Generator,
               aspect: tuple[float, float] = (0.3, 1 / 0.3)) -> MaskPlan:
    """Cover at least ``ceil(ratio * h * w)`` grid cells with random rectangles.

    Each rectangle has area >= ``min_block`` and an aspect ratio drawn
    log-uniformly from ``aspect``.  Rectangles may overlap; sampling stops as
    soon as the target count is reached, so the result can overshoot.
    Positions are row-major over the grid.
    """
    h, w = grid
    n = h * w
    if min_block > n:
        raise ConfigError(f"min_block={min_block} exceeds grid area {n}")
    if not 0 < ratio < 1:
        raise ConfigError("block mask ratio must lie in (0, 1)")
    if min_block < 1:
        raise ConfigError("min_block must be positive")
    target = math.ceil(ratio * n)
    lo, hi = math.log(aspect[0]), math.log(aspect[1])
    mask = np.zeros((h, w), dtype=bool)
    count = 0
    while count < target:
        max_area = max(min_block, target - count)
        area = rng.uniform(min_block, max_area)
        r = math.exp(rng.uniform(lo, hi))
        bh = int(round(math.sqrt(area * r)))
        bh = min(max(bh, math.ceil(area / w), 1), h)
        bw = min(math.ceil(area / bh), w)
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        mask[top: top + bh, left: left + bw] = True
        count = int(mask.sum())
    return MaskPlan(n, np.flatnonzero(mask))


def _span_union(T: int, starts: np.ndarray, span: int) -> np.ndarray:
    cover = np.zeros(T + 1, dtype=np.int64)
    idx = np.flatnonzero(starts)
    np.add.at(cover, idx, 1)
    np.add.at(cover, np.minimum(idx + span, T), -1)
    return np.flatnonzero(np.cumsum(cover[:T]) > 0)


def span_mask(T: int, p: float, span: int, rng: np.random.Generator) -> MaskPlan:
    """Each step starts a span with probability ``p``; a span masks ``[i, min(i + span, T))``."""
    if T < span:
        raise ConfigError(f"sequence length {T} shorter than span {span}")
    if not 0 <= p <= 1:
        raise ConfigError("span start probability must lie in [0, 1]")
    starts = rng.random(T) < p
    return MaskPlan(T, _span_union(T, starts, span))


def span_token_mask(T: int, p: float, rng: np.random.Generator, span: int = 4) -> MaskPlan:
    """Span masking over tokens; every masked token gets the mask embedding."""
    return span_mask(T, p, span, rng)


def token_mask(T: int, rate: float, rng: np.random.Generator, vocab_size: int | None = None,
               n_special: int = 0, probs: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> MaskPlan:
    """BERT-style selection: each token independently with probability ``rate``.

    Selected tokens draw an action with ``probs`` over (mask, keep, random);
    random replacements are uniform over the ids ``[n_special, vocab_size)``.
    """
    if not 0 <= rate <= 1:
        raise ConfigError("token mask rate must lie in [0, 1]")
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (3,) or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
        raise ConfigError("action probabilities must be three non-negative values summing to 1")
    if probs[2] > 0 and (vocab_size is None or vocab_size <= n_special):
        raise ConfigError("RANDOM_TOKEN actions need a vocabulary beyond the reserved ids")
    selected = np.flatnonzero(rng.random(T) < rate)
    actions = rng.choice(3, size=selected.size, p=probs).astype(np.int8)
    rand = np.full(selected.size, -1, dtype=np.int64)
    k = actions == Action.RANDOM_TOKEN
    if k.any():
        rand[k] = rng.integers(n_special, vocab_size, size=int(k.sum()))
    return MaskPlan(T, selected, actions, rand)


KINDS = ("block", "span", "token", "span_token")


@dataclass(frozen=True)
class MaskingConfig:
    kind: str = "span"
    ratio: float = 0.6
    min_block: int = 16
    p: float = 0.065
    span: int = 10
    rate: float = 0.15
    probs: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(x) for x in self.probs))
        if self.kind not in KINDS:
            raise ConfigError(f"masking.kind must be one of {KINDS}, got {self.kind!r}")
        if self.span < 1 or self.min_block < 1:
            raise ConfigError("masking.span and masking.min_block must be positive")

    def plan(self, T: int, rng: np.random.Generator, grid: tuple[int, int] | None = None,
             vocab_size: int | None = None, n_special: int = 0) -> MaskPlan:
        if self.kind == "block":
            if grid is None or grid[0] * grid[1] != T:
                raise ConfigError("block masking needs the patch grid of the sequence")
            return block_mask(grid, self.ratio, self.min_block, rng)
        if self.kind == "span":
            return span_mask(T, self.p, self.span, rng)
        if self.kind == "span_token":
            return span_token_mask(T, self.p, rng, self.span)
        return token_mask(T, self.rate, rng, vocab_size, n_special, self.probs)
