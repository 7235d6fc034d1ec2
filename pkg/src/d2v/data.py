"""Synthetic labelled toy tasks and the on-disk dataset formats.

Each toy task is built so that the class is carried by structure rather
than by first-order statistics: Markov transition patterns with a shared
uniform unigram distribution (text), the order of band-limited noise bursts
(speech), and orientation of random-phase gratings (vision).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .frontends import RESERVED, normalize_waveform


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray | None = None
    vocab: tuple | None = None

    def __len__(self) -> int:
        return len(self.x)

    def split(self, test_frac: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        order = rng.permutation(len(self.x))
        n_test = max(1, int(round(test_frac * len(self.x))))
        te, tr = order[:n_test], order[n_test:]
        y = self.y
        return (Dataset(self.x[tr], None if y is None else y[tr], self.vocab),
                Dataset(self.x[te], None if y is None else y[te], self.vocab))


def toy_vocab(n_types: int) -> tuple:
    return RESERVED + tuple(f"w{i}" for i in range(n_types))


def markov_text(n: int, rng: np.random.Generator, length: int = 32, n_classes: int = 4,
                n_types: int = 12, strength: float = 0.9, task_seed: int = 1234) -> Dataset:
    """Token sequences from class-specific chains that share a uniform stationary law.

    Class ``c`` follows a fixed permutation ``succ_c`` with probability
    ``strength`` and otherwise jumps uniformly, so every transition matrix is
    doubly stochastic and unigram counts carry no class signal.
    """
    task = np.random.default_rng(task_seed)
    succ = np.stack([task.permutation(n_types) for _ in range(n_classes)])
    labels = rng.integers(0, n_classes, size=n)
    seqs = np.empty((n, length), dtype=np.int64)
    cur = rng.integers(0, n_types, size=n)
    seqs[:, 0] = cur
    for t in range(1, length):
        follow = rng.random(n) < strength
        jump = rng.integers(0, n_types, size=n)
        cur = np.where(follow, succ[labels, cur], jump)
        seqs[:, t] = cur
    return Dataset(seqs + len(RESERVED), labels, toy_vocab(n_types))


def band_noise(n: int, rng: np.random.Generator, n_samples: int = 9600, n_classes: int = 4,
               n_bands: int = 5, segment: int = 1600, sample_rate: int = 16000, lo: float = 800.0,
               hi: float = 7200.0, width: float = 300.0, strength: float = 0.9,
               snr_db: float = 10.0) -> Dataset:
    """Sequences of band-limited noise bursts that walk around a ring of bands.

    Each ``segment`` samples hold random-phase noise in one of ``n_bands``
    log-spaced bands.  Class ``c`` steps the band index by ``c + 1`` (mod
    ``n_bands``) with probability ``strength`` and otherwise jumps uniformly,
    so every class visits all bands equally often and only the order of
    bursts identifies it.
    """
    if n_classes >= n_bands:
        raise InputError("band_noise needs more bands than classes")
    centres = np.linspace(lo, hi, n_bands)
    labels = rng.integers(0, n_classes, size=n)
    n_seg = -(-n_samples // segment)
    bands = np.empty((n, n_seg), dtype=np.int64)
    cur = rng.integers(0, n_bands, size=n)
    bands[:, 0] = cur
    for s in range(1, n_seg):
        follow = rng.random(n) < strength
        cur = np.where(follow, (cur + labels + 1) % n_bands, rng.integers(0, n_bands, size=n))
        bands[:, s] = cur
    freqs = np.fft.rfftfreq(segment, 1.0 / sample_rate)
    spec = rng.standard_normal((n, n_seg, freqs.size)) + 1j * rng.standard_normal((n, n_seg, freqs.size))
    c = centres[bands][..., None]
    shape = np.exp(-0.5 * ((freqs - c) / width) ** 2)
    bursts = np.fft.irfft(spec * shape, n=segment)
    bursts /= bursts.std(axis=-1, keepdims=True)
    sig = bursts.reshape(n, n_seg * segment)[:, :n_samples]
    noise = rng.standard_normal((n, n_samples)) * 10 ** (-snr_db / 20)
    return Dataset(normalize_waveform(sig + noise), labels)


def gratings(n: int, rng: np.random.Generator, side: int = 32, channels: int = 3, n_classes: int = 4,
             noise: float = 0.5) -> Dataset:
    """Sinusoidal gratings whose orientation is the class; phase, frequency and tint are random."""
    labels = rng.integers(0, n_classes, size=n)
    theta = np.pi * labels / n_classes + rng.normal(0, 0.05, size=n)
    freq = rng.uniform(0.15, 0.35, size=n)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    arg = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy) * freq[:, None, None] * 2 * np.pi
    base = np.sin(arg + phase[:, None, None])
    tint = rng.uniform(0.5, 1.5, size=(n, channels))
    img = base[:, None] * tint[:, :, None, None] + noise * rng.standard_normal((n, channels, side, side))
    return Dataset(img.astype(np.float64), labels)


TOY_TASKS = {"text": markov_text, "speech": band_noise, "vision": gratings}


def toy_dataset(modality: str, n: int, seed: int, **kwargs) -> Dataset:
    if modality not in TOY_TASKS:
        raise InputError(f"no toy task for modality {modality!r}")
    return TOY_TASKS[modality](n, np.random.default_rng(seed), **kwargs)


# on-disk formats

TENSOR_MAGIC = b"D2VT"


def write_tensor_file(path, array: np.ndarray) -> None:
    """Flat tensor container: magic, uint32 rank, uint64 extents, float32 little-endian values."""
    a = np.asarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(a.tobytes(order="C"))


def read_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise InputError(f"{path}: not a tensor container")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{ndim}Q", raw, 8)
    off = 8 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) - off != 4 * count:
        raise InputError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64)


def write_pcm(path, waveform: np.ndarray, sample_rate: int) -> None:
    """Headerless mono float32 little-endian samples plus ``<path>.rate`` holding the rate."""
    np.asarray(waveform, dtype="<f4").tofile(path)
    Path(str(path) + ".rate").write_text(f"{int(sample_rate)}\n")


def read_pcm(path, expected_rate: int | None = None) -> np.ndarray:
    rate_file = Path(str(path) + ".rate")
    if not rate_file.exists():
        raise InputError(f"{path}: missing sidecar rate file {rate_file.name}")
    rate = int(rate_file.read_text().strip())
    if expected_rate is not None and rate != expected_rate:
        raise InputError(f"{path}: sample rate {rate} != expected {expected_rate}")
    return np.fromfile(path, dtype="<f4").astype(np.float64)


def read_labels(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    classes = sorted(set(lines))
    index = {c: i for i, c in enumerate(classes)}
    return np.array([index[c] for c in lines], dtype=np.int64)


def load_text(path, spec, length: int | None = None) -> np.ndarray:
    """One sample per line, tokenized; lines are cropped or padded to a common length."""
    rows = [spec.tokenize(line) for line in Path(path).read_text(encoding="utf-8").splitlines()]
    rows = [r for r in rows if r]
    if not rows:
        raise InputError(f"{path}: no tokens")
    length = length or max(len(r) for r in rows)
    out = np.full((len(rows), length), spec.pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : min(len(r), length)] = r[:length]
    return out


def load_audio(paths, expected_rate: int, n_samples: int | None = None) -> np.ndarray:
    waves = [read_pcm(p, expected_rate) for p in paths]
    n = n_samples or min(len(w) for w in waves)
    if any(len(w) < n for w in waves):
        raise InputError("audio files are shorter than the configured crop length")
    return normalize_waveform(np.stack([w[:n] for w in waves]))
