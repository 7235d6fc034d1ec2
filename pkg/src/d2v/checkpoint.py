"""Checkpoint files: a JSON header followed by little-endian raw tensor payloads.

Layout: ``D2VC`` magic, uint32 header length, UTF-8 JSON header, payload.
The header records the encoder config, frontend spec, run fingerprint, step,
seed, collapse-tracker state and an index of every tensor (namespace, name,
dtype, shape, byte offset).  Student and teacher share one schema under the
``student`` and ``teacher`` namespaces; Adam moments live under ``adam.m``
and ``adam.v``.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError, StateError
from .frontends import AudioSpec, ImageSpec, TextSpec
from .model import ModelSpec
from .numerics import Tensor
from .train import AdamMoments, CollapseTracker, TrainState
from .transformer import EncoderConfig

MAGIC = b"D2VC"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _frontend_header(spec) -> dict:
    kind = {ImageSpec: "vision", AudioSpec: "speech", TextSpec: "text"}[type(spec)]
    return {"modality": kind, **dataclasses.asdict(spec)}


def _frontend_from_header(h: dict):
    h = dict(h)
    kind = h.pop("modality")
    cls = {"vision": ImageSpec, "speech": AudioSpec, "text": TextSpec}[kind]
    if kind == "speech":
        h["strides"], h["kernels"] = tuple(h["strides"]), tuple(h["kernels"])
    if kind == "text":
        h["vocab"] = tuple(h["vocab"])
    return cls(**h)


def save_checkpoint(path, state: TrainState, spec: ModelSpec, fingerprint: str = "") -> None:
    groups = {
        "student": {k: p.data for k, p in state.params.items()},
        "teacher": {k: p.data for k, p in state.teacher.items()},
        "adam.m": state.moments.m,
        "adam.v": state.moments.v,
    }
    index, chunks, offset = [], [], 0
    for ns, tensors in groups.items():
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            dt = str(arr.dtype)
            if dt not in _DTYPES:
                raise StateError(f"{ns}/{name}: unsupported dtype {dt}")
            raw = arr.astype(_DTYPES[dt]).tobytes()
            index.append({"ns": ns, "name": name, "dtype": dt, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    c = state.collapse
    header = {
        "version": VERSION,
        "fingerprint": fingerprint,
        "encoder": dataclasses.asdict(spec.encoder),
        "frontend": _frontend_header(spec.frontend),
        "step": state.step,
        "seed": state.seed,
        "adam_t": state.moments.t,
        "collapse": {"threshold": c.threshold, "window": c.window, "run": c.run, "fired_at": c.fired_at},
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)


def read_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8: 8 + n])
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: corrupt checkpoint header") from exc
    if header.get("version") != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, raw[8 + n:]


def load_checkpoint(path) -> tuple[TrainState, ModelSpec, dict]:
    """Returns ``(state, model spec, header)``; tensors come back with their saved dtypes."""
    header, payload = read_header(path)
    groups: dict = {"student": {}, "teacher": {}, "adam.m": {}, "adam.v": {}}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise InputError(f"{path}: truncated payload for {entry['ns']}/{entry['name']}")
        arr = np.frombuffer(payload[entry["offset"]: end], dtype=_DTYPES[entry["dtype"]])
        groups[entry["ns"]][entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    params = {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in groups["student"].items()}
    teacher = {k: Tensor(v, dtype=v.dtype) for k, v in groups["teacher"].items()}
    if set(groups["adam.m"]) != set(params) or set(groups["adam.v"]) != set(params):
        raise StateError(f"{path}: optimizer moments do not match the student parameters")
    moments = AdamMoments(groups["adam.m"], groups["adam.v"], header["adam_t"])
    c = header["collapse"]
    tracker = CollapseTracker(c["threshold"], c["window"], c["run"], c["fired_at"])
    spec = ModelSpec(EncoderConfig(**header["encoder"]), _frontend_from_header(header["frontend"]))
    state = TrainState(header["step"], params, teacher, moments, tracker, header["seed"])
    return state, spec, header
