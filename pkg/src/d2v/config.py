"""Run configuration: TOML sections, validation, environment overrides and fingerprints.

A config file holds one table per section.  Any key may be overridden from
the environment as ``D2V_<SECTION>_<KEY>``; override values are parsed as
TOML literals, falling back to plain strings.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .distill import EmaSchedule, LossConfig, TargetConfig
from .errors import ConfigError
from .frontends import AudioSpec, ImageSpec, TextSpec
from .masking import MaskingConfig
from .model import ModelSpec
from .train import LrSchedule, OptimConfig, TrainConfig
from .transformer import EncoderConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

MODALITY_MASKS = {"vision": ("block",), "speech": ("span",), "text": ("token", "span_token")}

DEFAULTS = {
    "run": {"modality": "vision", "seed": 0, "seeds": [0, 1, 2], "out": "runs"},
    "model": {"layers": 4, "hidden": 32, "heads": 4, "ffn_mult": 4, "dropout": 0.0,
              "stochastic_depth": 0.0, "max_positions": 512},
    "frontend": {},
    "masking": {},
    "ema": {"tau0": 0.999, "tau_e": 0.9999, "tau_n": 30000},
    "target": {"k": 4, "site": "ffn_out", "norm": "instance_free"},
    "loss": {"kind": "l2"},
    "lr": {"kind": "tri_stage", "peak": 5e-4, "warmup_frac": 0.03, "hold_frac": 0.90, "decay_frac": 0.07},
    "optim": {"betas": [0.9, 0.999], "eps": 1e-8, "weight_decay": 0.01, "grad_clip": 0.0},
    "train": {"total_steps": 1000, "batch_size": 8, "precision": "standard", "reset_teacher_at": -1},
    "collapse": {"threshold": 0.01, "window": 50},
    "data": {"source": "toy", "n": 1200, "seed": 100, "path": "", "labels": "", "vocab": "",
             "task": {}},
    "probe": {"test_frac": 0.25, "split_seed": 0, "max_iter": 2000, "c": 1.0, "batch": 64},
}

FRONTEND_DEFAULTS = {
    "vision": {"side": 32, "patch": 4, "channels": 3},
    "speech": {"sample_rate": 16000, "channels": 64, "strides": [5, 2, 2, 2, 2, 2, 2],
               "kernels": [10, 3, 3, 3, 3, 2, 2], "n_samples": 0},
    "text": {"max_len": 128},
}

MASKING_DEFAULTS = {
    "block": {"kind": "block", "ratio": 0.6, "min_block": 16},
    "span": {"kind": "span", "p": 0.065, "span": 10},
    "token": {"kind": "token", "rate": 0.15, "probs": [0.8, 0.1, 0.1]},
    "span_token": {"kind": "span_token", "p": 0.065, "span": 4},
}

DEFAULT_MASK = {"vision": "block", "speech": "span", "text": "token"}

# keys whose value is an open-ended table rather than a scalar
FREE_TABLES = {("data", "task")}


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict) and tuple(path.split(".")) not in FREE_TABLES:
            if not isinstance(val, dict):
                raise ConfigError(f"{path} must be a table")
            out[key] = _merge(out[key], val, path)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_literal(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ=None) -> dict:
    """Collect ``D2V_<SECTION>_<KEY>`` variables into a nested override table."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith("D2V_"):
            continue
        rest = name[4:].lower()
        section = next((s for s in DEFAULTS if rest.startswith(s + "_")), None)
        if section is None:
            raise ConfigError(f"environment override {name} names no known section")
        out.setdefault(section, {})[rest[len(section) + 1:]] = _parse_literal(raw)
    return out


@dataclass(frozen=True)
class RunConfig:
    """A fully resolved, validated experiment description."""

    tables: dict

    def __post_init__(self):
        self.validate()

    # construction

    @classmethod
    def from_dict(cls, raw: dict, environ=None, base_dir: Path | None = None) -> "RunConfig":
        raw = copy.deepcopy(raw)
        overrides = env_overrides(environ)
        for section, vals in overrides.items():
            raw.setdefault(section, {}).update(vals)
        modality = raw.get("run", {}).get("modality", DEFAULTS["run"]["modality"])
        if modality not in FRONTEND_DEFAULTS:
            raise ConfigError(f"run.modality must be one of {tuple(FRONTEND_DEFAULTS)}, got {modality!r}")
        defaults = copy.deepcopy(DEFAULTS)
        defaults["frontend"] = copy.deepcopy(FRONTEND_DEFAULTS[modality])
        kind = raw.get("masking", {}).get("kind", DEFAULT_MASK[modality])
        if kind not in MASKING_DEFAULTS:
            raise ConfigError(f"masking.kind must be one of {tuple(MASKING_DEFAULTS)}, got {kind!r}")
        defaults["masking"] = copy.deepcopy(MASKING_DEFAULTS[kind])
        loss_kind = raw.get("loss", {}).get("kind", defaults["loss"]["kind"])
        if loss_kind == "smooth_l1":
            defaults["loss"]["beta"] = 1.0
        tables = _merge(defaults, raw)
        if base_dir is not None:
            for key in ("path", "labels", "vocab"):
                p = tables["data"][key]
                if p and not Path(p).is_absolute():
                    tables["data"][key] = str(Path(base_dir) / p)
        return cls(tables)

    @classmethod
    def load(cls, path, environ=None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw, environ, base_dir=path.parent)

    def replace(self, **sections) -> "RunConfig":
        """New config with ``section={key: value}`` updates applied (env is not re-read)."""
        tables = copy.deepcopy(self.tables)
        for section, vals in sections.items():
            if section not in tables:
                raise ConfigError(f"unknown config section {section!r}")
            tables[section] = _merge(tables[section], vals, section)
        return RunConfig(tables)

    # accessors

    def __getitem__(self, section: str) -> dict:
        return self.tables[section]

    @property
    def modality(self) -> str:
        return self.tables["run"]["modality"]

    @property
    def seed(self) -> int:
        return int(self.tables["run"]["seed"])

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.tables["run"]["seeds"]]

    def fingerprint(self) -> str:
        """sha256 over the canonical JSON of every section except the output directory."""
        tables = copy.deepcopy(self.tables)
        tables["run"].pop("out", None)
        blob = json.dumps(tables, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.tables, sort_keys=True)

    # typed views

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(**self.tables["model"])

    def frontend(self, vocab: tuple | None = None):
        f = dict(self.tables["frontend"])
        if self.modality == "vision":
            return ImageSpec(f["side"], f["patch"], f["channels"])
        if self.modality == "speech":
            return AudioSpec(f["sample_rate"], f["channels"], tuple(f["strides"]), tuple(f["kernels"]))
        if vocab is None:
            raise ConfigError("text frontend needs a vocabulary (data.vocab or the toy task)")
        return TextSpec(tuple(vocab), f["max_len"])

    def model_spec(self, vocab: tuple | None = None) -> ModelSpec:
        return ModelSpec(self.encoder(), self.frontend(vocab))

    def masking(self) -> MaskingConfig:
        m = dict(self.tables["masking"])
        if "probs" in m:
            m["probs"] = tuple(m["probs"])
        return MaskingConfig(**m)

    def train_config(self, vocab: tuple | None = None, seed: int | None = None) -> TrainConfig:
        t = self.tables
        reset = t["train"]["reset_teacher_at"]
        return TrainConfig(
            model=self.model_spec(vocab),
            masking=self.masking(),
            ema=EmaSchedule(**t["ema"]),
            target=TargetConfig(**t["target"]),
            loss=LossConfig(t["loss"]["kind"], t["loss"].get("beta")),
            lr=LrSchedule(**t["lr"]),
            optim=OptimConfig(tuple(t["optim"]["betas"]), t["optim"]["eps"], t["optim"]["weight_decay"],
                              t["optim"]["grad_clip"]),
            total_steps=int(t["train"]["total_steps"]),
            batch_size=int(t["train"]["batch_size"]),
            seed=self.seed if seed is None else int(seed),
            precision=t["train"]["precision"],
            reset_teacher_at=None if reset is None or reset < 0 else int(reset),
            collapse_threshold=float(t["collapse"]["threshold"]),
            collapse_window=int(t["collapse"]["window"]),
        )

    # validation

    def validate(self) -> None:
        t = self.tables
        kind = t["masking"]["kind"]
        if kind not in MODALITY_MASKS[self.modality]:
            raise ConfigError(f"masking.kind={kind!r} does not fit modality {self.modality!r}")
        if t["target"]["k"] > t["model"]["layers"]:
            raise ConfigError(f"target.k={t['target']['k']} exceeds model.layers={t['model']['layers']}")
        loss = t["loss"]
        if loss["kind"] == "smooth_l1" and "beta" not in loss:
            raise ConfigError("loss.beta is required for smooth_l1")
        if loss["kind"] == "l2" and "beta" in loss:
            raise ConfigError("loss.beta is only valid for smooth_l1")
        if t["data"]["source"] not in ("toy", "files"):
            raise ConfigError("data.source must be toy or files")
        if t["data"]["source"] == "files" and not t["data"]["path"]:
            raise ConfigError("data.path is required when data.source = files")
        if not t["run"]["seeds"]:
            raise ConfigError("run.seeds must list at least one seed")
        if not 0 < t["probe"]["test_frac"] < 1:
            raise ConfigError("probe.test_frac must lie in (0, 1)")
        # building the typed views runs every per-section check
        vocab = ("<pad>", "<mask>", "<unk>", "x") if self.modality == "text" else None
        self.train_config(vocab)


PRESETS = ("vision", "speech", "text")


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"no preset named {name!r}; choose from {PRESETS}")
    return Path(__file__).parent / "presets" / f"{name}.toml"


def preset(name: str, environ=None) -> RunConfig:
    """One of the shipped presets, with environment overrides applied."""
    return RunConfig.load(preset_path(name), environ)
