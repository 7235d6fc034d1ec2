"""Linear probes on frozen pooled representations and the ablation harness.

Every ablation cell reuses the same dataset, train/test split, batch order
and mask draws (all keyed by the run seed), so only the swept knob differs
between cells of one seed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, load_audio, load_text, read_labels, read_tensor_file, toy_dataset, toy_vocab
from .errors import D2VError, InputError
from .frontends import TextSpec
from .model import ModelSpec, pooled
from .train import fit, init_state


def extract_representation(params: dict, spec: ModelSpec, samples, batch: int = 64) -> np.ndarray:
    """Mean over time of the final block output, one ``[H]`` row per sample."""
    samples = np.asarray(samples)
    if len(samples) == 0:
        return np.zeros((0, spec.encoder.hidden))
    return np.concatenate([pooled(params, spec, samples[i: i + batch]) for i in range(0, len(samples), batch)])


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    seed: int = 0
    fingerprint: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")


def linear_probe(train_reps, train_labels, test_reps, test_labels, seed: int = 0, fingerprint: str = "",
                 max_iter: int = 2000, c: float = 1.0) -> ProbeResult:
    """Standardize features, fit a multinomial logistic regression, score the held-out split."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    xtr, xte = np.asarray(train_reps, dtype=np.float64), np.asarray(test_reps, dtype=np.float64)
    ytr, yte = np.asarray(train_labels), np.asarray(test_labels)
    if np.unique(ytr).size < 2:
        raise InputError("linear probe needs at least two classes in the training split")
    if not (np.all(np.isfinite(xtr)) and np.all(np.isfinite(xte))):
        raise InputError("representations must be finite")
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise InputError("representations and labels differ in length")
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=max_iter, C=c))
    clf.fit(xtr, ytr)
    return ProbeResult(float(clf.score(xte, yte)), seed, fingerprint)


# data


def load_dataset(rc: RunConfig) -> Dataset:
    d = rc["data"]
    if d["source"] == "toy":
        task = dict(d["task"])
        fe = rc["frontend"]
        if rc.modality == "vision":
            task.setdefault("side", fe["side"])
            task.setdefault("channels", fe["channels"])
        elif rc.modality == "speech":
            task.setdefault("sample_rate", fe["sample_rate"])
            if fe["n_samples"]:
                task.setdefault("n_samples", fe["n_samples"])
        return toy_dataset(rc.modality, int(d["n"]), int(d["seed"]), **task)
    labels = read_labels(d["labels"]) if d["labels"] else None
    path = Path(d["path"])
    if rc.modality == "vision":
        x = read_tensor_file(path)
        if x.ndim != 4:
            raise InputError(f"{path}: image container must be [N, C, S, S], got shape {x.shape}")
        ds = Dataset(x, labels)
    elif rc.modality == "speech":
        files = sorted(path.glob("*.pcm")) if path.is_dir() else [Path(ln.strip()) for ln in
                                                                   path.read_text().splitlines() if ln.strip()]
        if not files:
            raise InputError(f"{path}: no audio files")
        fe = rc["frontend"]
        ds = Dataset(load_audio(files, fe["sample_rate"], fe["n_samples"] or None), labels)
    else:
        if not d["vocab"]:
            raise InputError("text data needs data.vocab")
        spec = TextSpec.from_file(d["vocab"], rc["frontend"]["max_len"])
        ds = Dataset(load_text(path, spec), labels, spec.vocab)
    if labels is not None and len(labels) != len(ds.x):
        raise InputError(f"{len(labels)} labels for {len(ds.x)} samples")
    return ds


def vocab_of(rc: RunConfig, ds: Dataset):
    if rc.modality != "text":
        return None
    return ds.vocab if ds.vocab is not None else toy_vocab(rc["data"]["task"].get("n_types", 12))


def split(rc: RunConfig, ds: Dataset) -> tuple[Dataset, Dataset]:
    return ds.split(rc["probe"]["test_frac"], np.random.default_rng(rc["probe"]["split_seed"]))


def probe_params(rc: RunConfig, params: dict, spec: ModelSpec, train: Dataset, test: Dataset,
                 seed: int) -> ProbeResult:
    if train.y is None or test.y is None:
        raise InputError("probing needs labels")
    p = rc["probe"]
    xtr = extract_representation(params, spec, train.x, p["batch"])
    xte = extract_representation(params, spec, test.x, p["batch"])
    return linear_probe(xtr, train.y, xte, test.y, seed, rc.fingerprint(), p["max_iter"], p["c"])


# pretrain + probe cells


@dataclass
class CellResult:
    seed: int
    accuracy: float
    random_accuracy: float
    collapsed: bool
    fingerprint: str
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


_CACHE: dict = {}


def run_cell(rc: RunConfig, seed: int, cache_dir: Path | None = None, data: Dataset | None = None) -> CellResult:
    """Pretrain with ``seed`` then probe; results are cached by (fingerprint, seed)."""
    key = f"{rc.fingerprint()}-{seed}"
    if key in _CACHE:
        return _CACHE[key]
    cache_file = Path(cache_dir) / f"cell-{key}.json" if cache_dir else None
    if cache_file is not None and cache_file.exists():
        res = CellResult(**json.loads(cache_file.read_text()))
        _CACHE[key] = res
        return res
    try:
        ds = data if data is not None else load_dataset(rc)
        train, test = split(rc, ds)
        cfg = rc.train_config(vocab_of(rc, ds), seed)
        state = init_state(cfg)
        rand = probe_params(rc, state.params, cfg.model, train, test, seed).accuracy
        state, history = fit(cfg, train.x, state)
        acc = probe_params(rc, state.params, cfg.model, train, test, seed).accuracy
        collapsed = state.collapse.fired_at is not None
        res = CellResult(seed, acc, rand, collapsed, rc.fingerprint())
    except D2VError as exc:
        res = CellResult(seed, math.nan, math.nan, False, rc.fingerprint(), f"{type(exc).__name__}: {exc}")
    _CACHE[key] = res
    if cache_file is not None and not res.failed:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps(res.__dict__))
    return res


@dataclass
class AblationRow:
    value: object
    mean: float
    std: float
    cells: list = field(default_factory=list)

    @property
    def accuracies(self) -> list[float]:
        return [c.accuracy for c in self.cells]


@dataclass
class AblationTable:
    axis: str
    rows: list
    fingerprint: str = ""

    def row(self, value) -> AblationRow:
        for r in self.rows:
            if r.value == value:
                return r
        raise KeyError(value)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.axis, "mean_accuracy", "std_accuracy", "seeds", "accuracies",
                        "collapsed", "failed", "fingerprint"])
            for r in self.rows:
                w.writerow([r.value, f"{r.mean:.6f}", f"{r.std:.6f}", ";".join(str(c.seed) for c in r.cells),
                            ";".join(f"{c.accuracy:.6f}" for c in r.cells),
                            ";".join(str(int(c.collapsed)) for c in r.cells),
                            ";".join(str(int(c.failed)) for c in r.cells), self.fingerprint])


def _sweep(rc: RunConfig, axis: str, section: str, key: str, values, seeds, cache_dir=None) -> AblationTable:
    seeds = list(seeds)
    if len(seeds) < 3:
        raise InputError("an ablation needs at least three seeds per row")
    data = load_dataset(rc)
    rows = []
    for v in values:
        cell_cfg = rc.replace(**{section: {key: v}})
        cells = [run_cell(cell_cfg, s, cache_dir, data) for s in seeds]
        ok = [c.accuracy for c in cells if not c.failed]
        mean = float(np.mean(ok)) if ok else math.nan
        std = float(np.std(ok)) if ok else math.nan
        rows.append(AblationRow(v, mean, std, cells))
    return AblationTable(axis, rows, rc.fingerprint())


def ablate_layers(rc: RunConfig, ks, seeds, cache_dir=None) -> AblationTable:
    """Sweep the number of averaged top blocks K."""
    L = rc["model"]["layers"]
    bad = [k for k in ks if not 1 <= k <= L]
    if bad:
        raise InputError(f"K values {bad} are outside [1, {L}]")
    return _sweep(rc, "k", "target", "k", [int(k) for k in ks], seeds, cache_dir)


def ablate_feature_site(rc: RunConfig, sites, seeds, cache_dir=None) -> AblationTable:
    """Sweep the intra-block activation used as the teacher target."""
    allowed = {"ffn_out", "attn_out", "block_out"}
    sites = [str(getattr(s, "value", s)) for s in sites]
    if not set(sites) <= allowed:
        raise InputError(f"sites must be drawn from {sorted(allowed)}")
    return _sweep(rc, "site", "target", "site", sites, seeds, cache_dir)
