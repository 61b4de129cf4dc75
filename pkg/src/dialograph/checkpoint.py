"""Checkpoints: a JSON manifest plus a little-endian float32 blob."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelError, ModelParams, param_shapes

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPE = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shapes = param_shapes(cfg)
    if list(shapes) != list(params):
        raise CheckpointError("parameter names do not match the model config")
    entries, chunks, offset = [], [], 0
    for name, shape in shapes.items():
        arr = np.ascontiguousarray(params[name], dtype=_DTYPE)
        if arr.shape != shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, config expects {shape}")
        entries.append({"name": name, "shape": list(shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"config": dataclasses.asdict(cfg), "dtype": "float32-le", "blob": BLOB, "tensors": entries}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def config_diff(a: ModelConfig, b: ModelConfig) -> list[str]:
    da, db = dataclasses.asdict(a), dataclasses.asdict(b)
    return [f"{k}: checkpoint={da[k]!r} expected={db[k]!r}" for k in da if da[k] != db[k]]


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    """Load parameters (as float64) and the stored config.

    With ``expected`` given, any differing config field is an error.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        cfg = ModelConfig(**manifest["config"])
        entries = manifest["tensors"]
        blob = (path / manifest.get("blob", BLOB)).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint file missing: {exc.filename}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ModelError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest in {path}: {exc}") from exc
    if expected is not None:
        diff = config_diff(cfg, expected)
        if diff:
            raise CheckpointError("checkpoint config mismatch: " + "; ".join(diff))
    shapes = param_shapes(cfg)
    names = [e.get("name") for e in entries]
    if names != list(shapes):
        raise CheckpointError("checkpoint tensor list does not match its config")
    params: ModelParams = {}
    expected_size = 0
    for e in entries:
        shape = tuple(e["shape"])
        if shape != shapes[e["name"]]:
            raise CheckpointError(f"tensor {e['name']!r} has shape {shape}, config implies {shapes[e['name']]}")
        n = int(np.prod(shape, dtype=np.int64))
        start, stop = e["offset"], e["offset"] + n * _DTYPE.itemsize
        if start != expected_size or stop > len(blob):
            raise CheckpointError(f"corrupt checkpoint blob: tensor {e['name']!r} out of bounds")
        params[e["name"]] = np.frombuffer(blob, dtype=_DTYPE, count=n, offset=start).reshape(shape).astype(np.float64)
        expected_size = stop
    if expected_size != len(blob):
        raise CheckpointError(f"corrupt checkpoint blob: {len(blob)} bytes, manifest describes {expected_size}")
    return params, cfg
