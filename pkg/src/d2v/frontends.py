"""Modality encoders mapping raw samples to ``[B, T, H]`` embedding sequences.

Frontend parameters are stored under the ``frontend.`` prefix and are shared
by student and teacher.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError
from .numerics import Tensor

PAD, MASK, UNK = "<pad>", "<mask>", "<unk>"
RESERVED = (PAD, MASK, UNK)


@dataclass(frozen=True)
class ImageSpec:
    side: int = 32
    patch: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.patch < 1 or self.side % self.patch:
            raise ConfigError(f"frontend.side={self.side} is not divisible by frontend.patch={self.patch}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.side // self.patch
        return g, g

    def seq_len(self, sample_shape=None) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class AudioSpec:
    sample_rate: int = 16000
    channels: int = 64
    strides: tuple = (5, 2, 2, 2, 2, 2, 2)
    kernels: tuple = (10, 3, 3, 3, 3, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if len(self.strides) != len(self.kernels) or not self.strides:
            raise ConfigError("frontend.strides and frontend.kernels must have equal, nonzero length")
        if min(self.strides) < 1 or min(self.kernels) < 1 or self.channels < 1:
            raise ConfigError("conv strides, kernels and channels must be positive")

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.kernels, self.strides)

    def seq_len(self, sample_shape) -> int:
        return conv_output_length(sample_shape[-1], self.kernels, self.strides)


@dataclass(frozen=True)
class TextSpec:
    vocab: tuple = RESERVED
    max_len: int = 128

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if len(set(self.vocab)) != len(self.vocab):
            raise ConfigError("vocabulary contains duplicate tokens")
        if self.vocab[: len(RESERVED)] != RESERVED:
            raise ConfigError(f"vocabulary must start with the reserved tokens {RESERVED}")

    @property
    def size(self) -> int:
        return len(self.vocab)

    @property
    def index(self) -> dict:
        return {t: i for i, t in enumerate(self.vocab)}

    @property
    def reserved_ids(self) -> tuple[int, ...]:
        idx = self.index
        return tuple(idx[t] for t in RESERVED)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    def seq_len(self, sample_shape) -> int:
        return sample_shape[-1]

    @classmethod
    def from_file(cls, path, max_len: int = 128) -> "TextSpec":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(tokens), max_len)

    def tokenize(self, line: str) -> list[int]:
        """Whitespace words; unknown words fall back to characters, then ``<unk>``."""
        idx = self.index
        out = []
        for word in line.split():
            if word in idx:
                out.append(idx[word])
            else:
                out.extend(idx.get(ch, idx[UNK]) for ch in word)
        return out[: self.max_len]


def conv_output_length(n: int, kernels, strides) -> int:
    """Frame count after valid convolutions: ``floor((L - k) / s) + 1`` per layer, 0 if too short."""
    for k, s in zip(kernels, strides):
        if n < k:
            return 0
        n = (n - k) // s + 1
    return n


def receptive_field(kernels, strides) -> int:
    rf, jump = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * jump
        jump *= s
    return rf


def normalize_waveform(waveform) -> np.ndarray:
    """Zero mean, unit (population) variance along the last axis."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.shape[-1] < 2:
        raise InputError("waveform needs at least two samples")
    var = x.var(axis=-1, keepdims=True)
    if np.any(var == 0):
        raise InputError("constant waveform has zero variance")
    return (x - x.mean(axis=-1, keepdims=True)) / np.sqrt(var)


def extract_patches(images: np.ndarray, spec: ImageSpec) -> np.ndarray:
    """``[B, C, S, S] -> [B, g*g, C*p*p]`` in row-major patch order."""
    images = np.asarray(images)
    if images.ndim == 3:
        return extract_patches(images[None], spec)[0]
    B, C, S1, S2 = images.shape
    if (C, S1, S2) != (spec.channels, spec.side, spec.side):
        raise ConfigError(f"image shape {(C, S1, S2)} does not match spec "
                          f"{(spec.channels, spec.side, spec.side)}")
    g, p = spec.side // spec.patch, spec.patch
    x = images.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g * g, C * p * p)


def assemble_patches(patches: np.ndarray, spec: ImageSpec) -> np.ndarray:
    """Inverse of :func:`extract_patches`."""
    patches = np.asarray(patches)
    if patches.ndim == 2:
        return assemble_patches(patches[None], spec)[0]
    B = patches.shape[0]
    g, p, C = spec.side // spec.patch, spec.patch, spec.channels
    x = patches.reshape(B, g, g, C, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(B, C, spec.side, spec.side)


def init_frontend(spec, hidden: int, rng: np.random.Generator, dtype=nx.STANDARD) -> dict[str, Tensor]:
    from .transformer import trunc_normal

    def leaf(v):
        return Tensor(v, requires_grad=True, dtype=dtype)

    if isinstance(spec, ImageSpec):
        d = spec.channels * spec.patch ** 2
        return {"frontend.patch.w": leaf(trunc_normal(rng, (d, hidden))),
                "frontend.patch.b": leaf(np.zeros(hidden))}
    if isinstance(spec, AudioSpec):
        params = {}
        c_in = 1
        for i, k in enumerate(spec.kernels):
            fan_in = c_in * k
            params[f"frontend.conv.{i}.w"] = leaf(rng.standard_normal((spec.channels, c_in, k)) * math.sqrt(2.0 / fan_in))
            c_in = spec.channels
        params["frontend.conv.0.norm.g"] = leaf(np.ones(spec.channels))
        params["frontend.conv.0.norm.b"] = leaf(np.zeros(spec.channels))
        params["frontend.ln.g"] = leaf(np.ones(spec.channels))
        params["frontend.ln.b"] = leaf(np.zeros(spec.channels))
        params["frontend.proj.w"] = leaf(trunc_normal(rng, (spec.channels, hidden)))
        params["frontend.proj.b"] = leaf(np.zeros(hidden))
        return params
    if isinstance(spec, TextSpec):
        return {"frontend.embed": leaf(rng.standard_normal((spec.size, hidden)))}
    raise ConfigError(f"unknown frontend spec {type(spec).__name__}")


def patchify(params: dict, images, spec: ImageSpec) -> Tensor:
    """``[B, C, S, S]`` (or one ``[C, S, S]`` image) to ``[B, T, H]`` patch embeddings."""
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    w = params["frontend.patch.w"]
    patches = Tensor._wrap(extract_patches(images, spec).astype(w.dtype), False)
    return nx.add(nx.matmul(patches, w), params["frontend.patch.b"])


def speech_encode(params: dict, waveforms, spec: AudioSpec) -> Tensor:
    """Seven-layer valid conv stack; ``[B, N]`` (or ``[N]``) normalized audio to ``[B, T, H]``."""
    x = waveforms.data if isinstance(waveforms, Tensor) else np.asarray(waveforms)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if x.shape[-1] < spec.receptive_field:
        raise InputError(f"waveform of {x.shape[-1]} samples is shorter than the "
                         f"receptive field of {spec.receptive_field}")
    w0 = params["frontend.conv.0.w"]
    h = Tensor._wrap(x.astype(w0.dtype)[:, :, None], False)
    for i, s in enumerate(spec.strides):
        h = nx.conv1d(h, params[f"frontend.conv.{i}.w"], s)
        if i == 0:
            h = nx.add(nx.mul(nx.normalize(h, axis=1, eps=1e-5), params["frontend.conv.0.norm.g"]),
                       params["frontend.conv.0.norm.b"])
        h = nx.gelu(h)
    h = nx.layer_norm(h, params["frontend.ln.g"], params["frontend.ln.b"])
    out = nx.add(nx.matmul(h, params["frontend.proj.w"]), params["frontend.proj.b"])
    return nx.reshape(out, out.shape[1:]) if squeeze else out


def text_embed(params: dict, ids, spec: TextSpec) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise InputError("token ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= spec.size):
        raise InputError(f"token id outside the vocabulary of {spec.size}")
    if ids.shape[-1] > spec.max_len:
        raise InputError(f"sequence of {ids.shape[-1]} tokens exceeds max_len={spec.max_len}")
    return nx.embedding(params["frontend.embed"], ids)


def embed(params: dict, batch, spec) -> Tensor:
    if isinstance(spec, ImageSpec):
        return patchify(params, batch, spec)
    if isinstance(spec, AudioSpec):
        return speech_encode(params, batch, spec)
    if isinstance(spec, TextSpec):
        return text_embed(params, batch, spec)
    raise ConfigError(f"unknown frontend spec {type(spec).__name__}")
