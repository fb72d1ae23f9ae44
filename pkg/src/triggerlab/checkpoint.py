"""Model checkpoints: one JSON manifest line followed by the concatenated
little-endian float32 parameter buffers. Round-trips are bit-exact."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .models import ModelError, ModelSpec, ModelState, build_model

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or inconsistent checkpoint file."""


def _json_safe(meta: dict) -> dict:
    out = {}
    for k, v in meta.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        if isinstance(v, (str, int, float, bool, type(None), list, dict)):
            out[k] = v
    return out


def save_checkpoint(state: ModelState, path):
    path = Path(path)
    tensors = []
    offset = 0
    blobs = []
    for name, p in state.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(p.data.shape),
                        "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": "model-checkpoint",
        "version": CHECKPOINT_VERSION,
        "arch": state.spec.arch,
        "spec": state.spec.to_dict(),
        "meta": _json_safe(state.meta),
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        man = json.loads(raw[:nl])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})")
    if man.get("format") != "model-checkpoint" or man.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    try:
        spec = ModelSpec.from_dict(man["spec"])
    except (ModelError, TypeError, KeyError) as e:
        raise CheckpointError(f"{path}: invalid spec in manifest ({e})")

    # the spec determines the parameter skeleton; entries must match it
    skeleton = build_model(spec, seed=0)
    entries = {t["name"]: t for t in man["tensors"]}
    if set(entries) != set(skeleton.params):
        missing = set(skeleton.params) - set(entries)
        extra = set(entries) - set(skeleton.params)
        raise CheckpointError(f"{path}: tensor set mismatch (missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)})")
    blob = raw[nl + 1:]
    params = {}
    for name, ref in skeleton.params.items():
        ent = entries[name]
        shape = tuple(ent["shape"])
        if shape != ref.data.shape:
            raise CheckpointError(f"{path}: tensor '{name}' has shape {shape}, "
                                  f"spec requires {ref.data.shape}")
        expect = int(np.prod(shape)) * 4
        if ent["length"] != expect:
            raise CheckpointError(f"{path}: tensor '{name}' length {ent['length']} != {expect}")
        lo, hi = ent["offset"], ent["offset"] + ent["length"]
        if hi > len(blob):
            raise CheckpointError(f"{path}: truncated blob while reading tensor '{name}'")
        arr = np.frombuffer(blob[lo:hi], dtype="<f4").reshape(shape).copy()
        params[name] = Tensor(arr, requires_grad=True)
    state = ModelState(spec, params, dict(man.get("meta", {})))
    return state
