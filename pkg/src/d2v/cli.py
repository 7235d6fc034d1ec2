"""Command-line entry point: ``d2v pretrain|probe|ablate|check --config PATH [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import D2VError, InputError, NumericError
from .eval import ablate_feature_site, ablate_layers, load_dataset, probe_params, split, vocab_of
from .train import fit, init_state, loss_grad_check

CHECK_TOL = {"standard": 1e-4, "wide": 1e-6}


def _out_dir(args, rc: RunConfig) -> Path:
    out = Path(args.out or rc["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, rc: RunConfig) -> int:
    return rc.seed if args.seed is None else args.seed


def cmd_pretrain(rc: RunConfig, seed: int, out: Path) -> int:
    ds = load_dataset(rc)
    train = split(rc, ds)[0] if ds.y is not None else ds
    cfg = rc.train_config(vocab_of(rc, ds), seed)
    fp = rc.fingerprint()
    state = init_state(cfg)
    with open(out / "metrics.jsonl", "w") as log:
        log.write(json.dumps({"fingerprint": fp, "seed": seed, "config": rc.tables}) + "\n")
        state, history = fit(cfg, train.x, state, log=log)
    save_checkpoint(out / "checkpoint.d2vc", state, cfg.model, fp)
    final = history[-1] if history else {"step": 0}
    print(json.dumps({"fingerprint": fp, "steps": state.step, "last": final}))
    return 0


def cmd_probe(rc: RunConfig, seed: int, out: Path, checkpoint: Path) -> int:
    if not checkpoint.exists():
        raise InputError(f"checkpoint {checkpoint} not found")
    state, spec, header = load_checkpoint(checkpoint)
    ds = load_dataset(rc)
    train, test = split(rc, ds)
    res = probe_params(rc, state.params, spec, train, test, seed)
    record = {"accuracy": res.accuracy, "seed": res.seed, "fingerprint": res.fingerprint,
              "checkpoint_fingerprint": header["fingerprint"], "checkpoint_step": header["step"],
              "n_train": len(train), "n_test": len(test), "classes": int(np.unique(ds.y).size)}
    (out / "probe.json").write_text(json.dumps(record, indent=2) + "\n")
    print(json.dumps(record))
    return 0


def cmd_ablate(rc: RunConfig, out: Path, axis: str, values: list[str]) -> int:
    seeds = rc.seeds
    cache = out / "cells"
    if axis == "k":
        ks = [int(v) for v in values] if values else sorted({1, rc["model"]["layers"]})
        table = ablate_layers(rc, ks, seeds, cache)
    else:
        table = ablate_feature_site(rc, values or ["ffn_out", "attn_out", "block_out"], seeds, cache)
    path = out / f"ablation_{axis}.csv"
    table.write_csv(path)
    for r in table.rows:
        print(json.dumps({"axis": axis, "value": r.value, "mean": r.mean, "std": r.std,
                          "accuracies": r.accuracies, "fingerprint": table.fingerprint}))
    return 1 if any(c.failed for r in table.rows for c in r.cells) else 0


def tiny(rc: RunConfig) -> RunConfig:
    """Shrink a config to a width where finite differences over every tensor stay cheap."""
    k = rc["target"]["k"]
    layers = min(rc["model"]["layers"], 2)
    changes = {
        "model": {"layers": layers, "hidden": 8, "heads": 2, "max_positions": 64, "dropout": 0.0,
                  "stochastic_depth": 0.0},
        "target": {"k": min(k, layers)},
        "data": {"source": "toy", "n": 4, "task": {}},
    }
    if rc.modality == "vision":
        changes["frontend"] = {"side": 8, "patch": 4}
        changes["masking"] = {"min_block": 1}
    elif rc.modality == "speech":
        changes["frontend"] = {"channels": 4}
        changes["data"]["task"] = {"n_samples": 4800, "segment": 800}
    else:
        changes["data"]["task"] = {"length": 12, "n_types": 6}
        changes["masking"] = {"rate": 0.5} if rc["masking"]["kind"] == "token" else {"p": 0.3}
    return rc.replace(**changes)


def cmd_check(rc: RunConfig, seed: int, out: Path | None = None) -> int:
    small = tiny(rc)
    ds = load_dataset(small)
    worst = {}
    for precision, tol in CHECK_TOL.items():
        cfg = small.replace(train={"precision": precision}).train_config(vocab_of(small, ds), seed)
        state = init_state(cfg)
        errs = loss_grad_check(state, cfg, ds.x[:2], rng=np.random.default_rng(seed))
        name = max(errs, key=errs.get)
        worst[precision] = {"max_rel_error": float(errs[name]), "param": name, "tolerance": tol,
                            "ok": bool(errs[name] < tol)}
    record = {"fingerprint": rc.fingerprint(), "modality": rc.modality, **worst}
    if out is not None:
        (out / "check.json").write_text(json.dumps(record, indent=2) + "\n")
    print(json.dumps(record))
    if not all(v["ok"] for v in worst.values()):
        raise NumericError("gradient check exceeded tolerance: " +
                           ", ".join(f"{p}={v['max_rel_error']:.2e}" for p, v in worst.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="d2v", description="Desk-scale self-distillation experiments.")
    ap.add_argument("command", choices=["pretrain", "probe", "ablate", "check"])
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", type=Path)
    ap.add_argument("--checkpoint", type=Path, help="probe: checkpoint file (default OUT/checkpoint.d2vc)")
    ap.add_argument("--axis", choices=["k", "site"], default="k", help="ablate: swept knob")
    ap.add_argument("--values", nargs="*", default=[], help="ablate: values of the swept knob")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = RunConfig.load(args.config)
        out = _out_dir(args, rc)
        seed = _seed(args, rc)
        if args.command == "pretrain":
            return cmd_pretrain(rc, seed, out)
        if args.command == "probe":
            return cmd_probe(rc, seed, out, args.checkpoint or out / "checkpoint.d2vc")
        if args.command == "ablate":
            return cmd_ablate(rc, out, args.axis, args.values)
        return cmd_check(rc, seed, out)
    except D2VError as exc:
        print(f"d2v {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
