"""Checkpoint = ``manifest.json`` + ``params.bin`` (little-endian float payload).

The manifest lists every array (parameters and both Adam moments) with its
shape, byte offset and crc32, plus the step, RNG states and the signatures of
the plans built so far. Restoring rebuilds those plans without counting them
as new builds, so a resumed run logs the same metrics as an uninterrupted one.
"""
from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .moe import RoutingMonitor
from .scheduler import Plan, TaskSignature, TrainState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(state: TrainState):
    for k, p in state.params.items():
        yield k, p.data
    for k in state.params:
        yield f"adam_m/{k}", state.m[k]
    for k in state.params:
        yield f"adam_v/{k}", state.v[k]


def save(state: TrainState, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(next(iter(state.params.values())).data.dtype).newbyteorder("<")
    entries, offset = [], 0
    with open(path / "params.bin.tmp", "wb") as f:
        for name, arr in _arrays(state):
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            entries.append({"path": name, "shape": list(arr.shape), "offset": offset,
                            "nbytes": len(raw), "crc32": zlib.crc32(raw)})
            f.write(raw)
            offset += len(raw)
    manifest = {
        "version": FORMAT_VERSION,
        "step": state.step,
        "dtype": dtype.str,
        "entries": entries,
        "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "plans": list(state.plans),
        "plan_builds": state.plan_builds,
        "monitor": {"checks": state.monitor.checks, "violations": state.monitor.violations},
        **(extra or {}),
    }
    (path / "manifest.json.tmp").write_text(json.dumps(manifest, indent=1))
    (path / "params.bin.tmp").replace(path / "params.bin")
    (path / "manifest.json.tmp").replace(path / "manifest.json")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest {mpath}: {e}") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')!r}, "
                              f"this build reads version {FORMAT_VERSION}")
    for key in ("step", "dtype", "entries", "rng", "plans", "plan_builds"):
        if key not in manifest:
            raise CheckpointError(f"manifest {mpath} lacks {key!r}")
    return manifest


def load_arrays(path) -> tuple[dict, dict]:
    manifest = read_manifest(path)
    blob = (Path(path) / "params.bin").read_bytes()
    dtype = np.dtype(manifest["dtype"])
    out = {}
    for e in manifest["entries"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"payload truncated at {e['path']}")
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"checksum mismatch for {e['path']}")
        if e["path"] in out:
            raise CheckpointError(f"duplicate entry {e['path']}")
        out[e["path"]] = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return manifest, out


def restore(path, model) -> TrainState:
    """Rebuild a TrainState; ``model`` is the ModelConfig the plans need."""
    manifest, arrays = load_arrays(path)
    params = T.ParamTree()
    for name, arr in arrays.items():
        if not name.startswith(("adam_m/", "adam_v/")):
            params[name] = T.Tensor(arr.copy(), requires_grad=True, dtype=arr.dtype)
    m = {k: arrays[f"adam_m/{k}"].copy() for k in params}
    v = {k: arrays[f"adam_v/{k}"].copy() for k in params}
    rngs = {}
    for k, st in manifest["rng"].items():
        g = np.random.Generator(getattr(np.random, st["bit_generator"])())
        g.bit_generator.state = st
        rngs[k] = g
    mon = manifest.get("monitor", {})
    state = TrainState(params, m, v, manifest["step"], rngs, plan_builds=manifest["plan_builds"],
                       monitor=RoutingMonitor(mon.get("checks", 0), mon.get("violations", 0)))
    for key in manifest["plans"]:
        state.plans[key] = Plan(TaskSignature.from_key(key), model, params)
    return state
