import numpy as np
import pytest

from d2v.data import (band_noise, gratings, load_audio, load_text, markov_text, read_labels, read_pcm,
                      read_tensor_file, toy_dataset, toy_vocab, write_pcm, write_tensor_file)
from d2v.errors import InputError
from d2v.frontends import TextSpec


def test_toy_tasks_are_seeded_and_shaped():
    a, b = toy_dataset("speech", 6, 3), toy_dataset("speech", 6, 3)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.x.shape == (6, 9600)
    np.testing.assert_allclose(a.x.mean(1), 0, atol=1e-9)
    np.testing.assert_allclose(a.x.std(1), 1, atol=1e-6)
    assert toy_dataset("vision", 5, 0, side=16).x.shape == (5, 3, 16, 16)
    t = toy_dataset("text", 5, 0, length=20)
    assert t.x.shape == (5, 20) and 3 <= t.x.min() and t.x.max() < 15
    with pytest.raises(InputError):
        toy_dataset("video", 1, 0)


def test_text_unigrams_carry_no_class_signal():
    ds = markov_text(4000, np.random.default_rng(0), n_types=6)
    freq = np.stack([np.bincount(ds.x[ds.y == c].ravel(), minlength=9)[3:] / (ds.y == c).sum() / 32
                     for c in range(4)])
    np.testing.assert_allclose(freq, 1 / 6, atol=0.01)


def test_speech_band_energy_is_class_independent():
    ds = band_noise(800, np.random.default_rng(1), n_samples=4800, segment=800)
    spec = np.abs(np.fft.rfft(ds.x, axis=1)) ** 2
    edges = np.linspace(0, spec.shape[1], 9).astype(int)
    bands = np.stack([spec[:, a:b].sum(1) for a, b in zip(edges[:-1], edges[1:])], 1)
    bands /= bands.sum(1, keepdims=True)
    means = np.stack([bands[ds.y == c].mean(0) for c in range(4)])
    assert np.max(np.ptp(means, axis=0)) < 0.03
    with pytest.raises(InputError):
        band_noise(2, np.random.default_rng(0), n_classes=5, n_bands=5)


def test_gratings_labels():
    ds = gratings(10, np.random.default_rng(0), side=8, channels=1)
    assert ds.x.shape == (10, 1, 8, 8) and set(ds.y) <= {0, 1, 2, 3}


def test_split_is_disjoint_and_deterministic():
    ds = toy_dataset("text", 40, 0)
    tr, te = ds.split(0.25, np.random.default_rng(0))
    tr2, _ = ds.split(0.25, np.random.default_rng(0))
    assert len(te) == 10 and len(tr) == 30
    np.testing.assert_array_equal(tr.x, tr2.x)


def test_tensor_container_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 2, 4, 4)).astype(np.float32)
    write_tensor_file(tmp_path / "x.d2vt", x)
    np.testing.assert_array_equal(read_tensor_file(tmp_path / "x.d2vt"), x)
    (tmp_path / "bad").write_bytes(b"XXXX")
    with pytest.raises(InputError):
        read_tensor_file(tmp_path / "bad")
    raw = (tmp_path / "x.d2vt").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-4])
    with pytest.raises(InputError, match="payload size"):
        read_tensor_file(tmp_path / "short")


def test_pcm_round_trip_and_rate_check(tmp_path):
    w = np.sin(np.arange(1000) / 7.0)
    write_pcm(tmp_path / "a.pcm", w, 16000)
    np.testing.assert_allclose(read_pcm(tmp_path / "a.pcm", 16000), w, atol=1e-7)
    with pytest.raises(InputError, match="sample rate"):
        read_pcm(tmp_path / "a.pcm", 8000)
    (tmp_path / "b.pcm").write_bytes(b"\0" * 16)
    with pytest.raises(InputError, match="sidecar"):
        read_pcm(tmp_path / "b.pcm")
    write_pcm(tmp_path / "c.pcm", w[:500], 16000)
    x = load_audio([tmp_path / "a.pcm", tmp_path / "c.pcm"], 16000)
    assert x.shape == (2, 500)
    with pytest.raises(InputError, match="shorter"):
        load_audio([tmp_path / "c.pcm"], 16000, 800)


def test_text_and_labels(tmp_path):
    spec = TextSpec(toy_vocab(3), 16)
    (tmp_path / "t.txt").write_text("w0 w1 w2 w0\n\nw2 z\n")
    x = load_text(tmp_path / "t.txt", spec)
    assert x.shape == (2, 4)
    np.testing.assert_array_equal(x[1], [5, 2, spec.pad_id, spec.pad_id])
    (tmp_path / "y.txt").write_text("b\na\nb\n")
    np.testing.assert_array_equal(read_labels(tmp_path / "y.txt"), [1, 0, 1])
