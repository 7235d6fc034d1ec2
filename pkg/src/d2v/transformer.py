"""Pre-norm Transformer encoder over ``[B, T, H]`` sequences with per-block taps.

Parameters live in a flat ``{name: Tensor}`` dict so the same :func:`encode`
serves student and teacher; only the dict differs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .masking import MaskPlan, stack_replace_masks
from .numerics import Tensor

SITES = ("attn_out", "ffn_out", "block_out")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    hidden: int = 32
    heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.0
    stochastic_depth: float = 0.0
    max_positions: int = 512

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("model.layers must be at least 1")
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"model.hidden={self.hidden} is not divisible by model.heads={self.heads}")
        for name in ("dropout", "stochastic_depth"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must lie in [0, 1)")
        if self.ffn_mult < 1 or self.max_positions < 1:
            raise ConfigError("model.ffn_mult and model.max_positions must be positive")


@dataclass
class ActivationTaps:
    attn_out: list = field(default_factory=list)
    ffn_out: list = field(default_factory=list)
    block_out: list = field(default_factory=list)

    def site(self, name: str) -> list:
        if name not in SITES:
            raise ConfigError(f"unknown target site {name!r}")
        return getattr(self, name)

    def __len__(self) -> int:
        return len(self.block_out)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws rejected outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


def block_names(cfg: EncoderConfig) -> list[str]:
    names = []
    for l in range(cfg.layers):
        p = f"blocks.{l}."
        names += [p + n for n in ("ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
                                  "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g", "ln2.b",
                                  "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")]
    return names


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=nx.STANDARD) -> dict[str, Tensor]:
    H, F = cfg.hidden, cfg.hidden * cfg.ffn_mult
    shapes = {"ln1.g": (H,), "ln1.b": (H,), "attn.wq": (H, H), "attn.bq": (H,),
              "attn.wk": (H, H), "attn.bk": (H,), "attn.wv": (H, H), "attn.bv": (H,),
              "attn.wo": (H, H), "attn.bo": (H,), "ln2.g": (H,), "ln2.b": (H,),
              "ffn.w1": (H, F), "ffn.b1": (F,), "ffn.w2": (F, H), "ffn.b2": (H,)}
    params = {}
    for name in block_names(cfg):
        short = name.split(".", 2)[2]
        shape = shapes[short]
        if short.endswith(".g"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            value = trunc_normal(rng, shape)
        params[name] = Tensor(value, requires_grad=True, dtype=dtype)
    params["pos_embed"] = Tensor(trunc_normal(rng, (cfg.max_positions, H)), requires_grad=True, dtype=dtype)
    params["mask_embed"] = Tensor(trunc_normal(rng, (H,)), requires_grad=True, dtype=dtype)
    return params


def positions(params: dict, T: int) -> Tensor:
    table = params["pos_embed"]
    if T > table.shape[0]:
        raise ConfigError(f"sequence length {T} exceeds max_positions={table.shape[0]}")
    return nx.gather(table, np.arange(T), axis=0)


def _attention(x: Tensor, p: dict, pre: str, heads: int) -> Tensor:
    B, T, H = x.shape
    dh = H // heads

    def split(t):
        return nx.transpose(nx.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(nx.add(nx.matmul(x, p[pre + "wq"]), p[pre + "bq"]))
    k = split(nx.add(nx.matmul(x, p[pre + "wk"]), p[pre + "bk"]))
    v = split(nx.add(nx.matmul(x, p[pre + "wv"]), p[pre + "bv"]))
    scores = nx.scale(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(dh))
    ctx = nx.matmul(nx.softmax(scores, axis=-1), v)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (B, T, H))
    return nx.add(nx.matmul(ctx, p[pre + "wo"]), p[pre + "bo"])


def encode(params: dict, embedded: Tensor, pos: Tensor, cfg: EncoderConfig, want_taps: bool = True,
           rng: np.random.Generator | None = None) -> tuple[Tensor, ActivationTaps]:
    """Run all blocks over ``embedded + pos``.

    ``embedded`` is ``[T, H]`` or ``[B, T, H]``; ``pos`` is ``[T, H]``.
    Dropout and stochastic depth are active only when ``rng`` is given.
    """
    squeeze = embedded.ndim == 2
    x = nx.reshape(embedded, (1,) + embedded.shape) if squeeze else embedded
    if x.ndim != 3 or x.shape[-1] != cfg.hidden:
        raise ConfigError(f"encoder expects [B, T, {cfg.hidden}], got {embedded.shape}")
    T = x.shape[1]
    if T > cfg.max_positions:
        raise ConfigError(f"sequence length {T} exceeds max_positions={cfg.max_positions}")
    if pos.shape != (T, cfg.hidden):
        raise ConfigError(f"positions must be [{T}, {cfg.hidden}], got {pos.shape}")
    drop = cfg.dropout if rng is not None else 0.0
    depth = cfg.stochastic_depth if rng is not None else 0.0

    h = nx.add(x, pos)
    taps = ActivationTaps()
    for l in range(cfg.layers):
        pre = f"blocks.{l}."
        a = _attention(nx.layer_norm(h, params[pre + "ln1.g"], params[pre + "ln1.b"]), params, pre + "attn.",
                       cfg.heads)
        if drop:
            a = nx.dropout(a, drop, rng)
        h = nx.add(h, nx.drop_path(a, depth, rng) if depth else a)
        f = nx.layer_norm(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
        f = nx.add(nx.matmul(nx.gelu(nx.add(nx.matmul(f, params[pre + "ffn.w1"]), params[pre + "ffn.b1"])),
                             params[pre + "ffn.w2"]), params[pre + "ffn.b2"])
        if drop:
            f = nx.dropout(f, drop, rng)
        h = nx.add(h, nx.drop_path(f, depth, rng) if depth else f)
        if want_taps:
            taps.attn_out.append(a)
            taps.ffn_out.append(f)
            taps.block_out.append(h)

    if squeeze:
        h = nx.reshape(h, h.shape[1:])
        if want_taps:
            for name in SITES:
                setattr(taps, name, [nx.reshape(t, t.shape[1:]) for t in getattr(taps, name)])
            taps.block_out[-1] = h
    return h, taps


def substitute_mask_token(embedded: Tensor, plan, mask_embedding: Tensor) -> Tensor:
    """Put ``mask_embedding`` on every REPLACE_MASK position of ``plan``.

    ``plan`` is one :class:`MaskPlan` for ``[T, H]`` input or a sequence of
    plans for ``[B, T, H]``.  KEEP rows stay as they are; RANDOM_TOKEN rows are
    expected to be embedded from the replacement ids already.
    """
    if isinstance(plan, MaskPlan):
        rows = plan.replace_mask()
    else:
        rows = stack_replace_masks(plan)
    if rows.shape != embedded.shape[:-1]:
        raise ConfigError(f"mask plan covers {rows.shape}, embeddings are {embedded.shape[:-1]}")
    if not rows.any():
        return embedded
    return nx.mask_rows(embedded, rows, mask_embedding)
