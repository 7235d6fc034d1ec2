import numpy as np
import pytest

from d2v.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from d2v.cli import tiny
from d2v.config import preset
from d2v.errors import InputError
from d2v.eval import load_dataset, vocab_of
from d2v.train import fit, init_state


@pytest.mark.parametrize("modality,precision", [("speech", "standard"), ("text", "wide"), ("vision", "standard")])
def test_round_trip_gives_bit_identical_continuation(tmp_path, modality, precision):
    rc = tiny(preset(modality, environ={})).replace(train={"total_steps": 20, "precision": precision})
    ds = load_dataset(rc)
    cfg = rc.train_config(vocab_of(rc, ds))
    state, _ = fit(cfg, ds.x, steps=5)
    path = tmp_path / "ck.d2vc"
    save_checkpoint(path, state, cfg.model, rc.fingerprint())
    loaded, spec, header = load_checkpoint(path)
    assert spec == cfg.model and header["fingerprint"] == rc.fingerprint() and loaded.step == 5
    for k in state.params:
        assert loaded.params[k].dtype == state.params[k].dtype
        np.testing.assert_array_equal(loaded.params[k].data, state.params[k].data)
    _, a = fit(cfg, ds.x, state, steps=4)
    _, b = fit(cfg, ds.x, loaded, steps=4)
    strip = lambda h: [{k: v for k, v in m.items() if k != "wall_ms"} for m in h]
    assert strip(a) == strip(b)


def test_header_layout(tmp_path):
    rc = tiny(preset("vision", environ={}))
    cfg = rc.train_config()
    path = tmp_path / "ck.d2vc"
    save_checkpoint(path, init_state(cfg), cfg.model, "abc")
    assert path.read_bytes()[:4] == MAGIC
    header, payload = read_header(path)
    names = {(e["ns"], e["name"]) for e in header["tensors"]}
    assert ("teacher", "blocks.0.ffn.w1") in names and ("student", "frontend.patch.w") in names
    assert ("teacher", "frontend.patch.w") not in names
    assert sum(e["nbytes"] for e in header["tensors"]) == len(payload)
    assert header["encoder"]["layers"] == cfg.model.encoder.layers


def test_corrupt_files_rejected(tmp_path):
    bad = tmp_path / "bad.d2vc"
    bad.write_bytes(b"NOPE" + b"\0" * 10)
    with pytest.raises(InputError):
        load_checkpoint(bad)
    rc = tiny(preset("vision", environ={}))
    cfg = rc.train_config()
    good = tmp_path / "good.d2vc"
    save_checkpoint(good, init_state(cfg), cfg.model)
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(InputError, match="truncated"):
        load_checkpoint(good)
