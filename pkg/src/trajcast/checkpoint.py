"""Model checkpoint format: one JSON header line, then raw little-endian float64.

The header records the format version, a config dict, optional metadata, and
per-parameter name/shape/byte-offset entries sorted by name. Writes go through
a temp file and rename so a crash never leaves a truncated checkpoint behind.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from .autodiff import Tensor

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str,
    params: dict[str, Tensor],
    config: dict[str, Any],
    extra: dict[str, Any] | None = None,
) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "extra": extra or {},
        "params": entries,
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return (arrays keyed by name, header dict). Rejects unknown versions."""
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}, expected {FORMAT_VERSION}")
    arrays: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated: parameter '{entry['name']}' runs past end of file")
        arrays[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).copy()
    return arrays, header


def load_model(path: str) -> tuple[dict[str, Tensor], dict[str, Any]]:
    """Rebuild the saved model: a fresh parameter tree filled from the blob.

    Returns (params, layer) where layer holds the model section plus any
    rollout section embedded at save time, ready for build_run_config.
    """
    # imported here so the serialization core stays free of model machinery
    from .config import build_run_config
    from .model import init_params

    arrays, header = load_checkpoint(path)
    layer: dict[str, Any] = {"model": dict(header["config"])}
    embedded = header.get("extra", {}).get("run_config", {})
    if "rollout" in embedded:
        layer["rollout"] = dict(embedded["rollout"])
    run = build_run_config(layer)
    params = init_params(run.model, np.random.default_rng(0))
    restore_params(params, arrays)
    return params, layer


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter dict, checking names and shapes."""
    missing = sorted(set(params) - set(arrays))
    unexpected = sorted(set(arrays) - set(params))
    if missing or unexpected:
        raise CheckpointError(f"parameter name mismatch: missing={missing}, unexpected={unexpected}")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {arrays[name].shape}, model {p.data.shape}"
            )
        p.data[...] = arrays[name]
