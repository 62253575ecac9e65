"""Parameter checkpoint files.

Format (version 1): a JSON object

    {"format_version": 1,
     "params": {"<name>": {"shape": [d0, ...], "values": [f, ...]}, ...}}

`values` is the flat row-major float64 array.  JSON floats are written with
Python's shortest round-trip repr, so save/load is exact and byte-stable for
identical parameters (keys are sorted).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_params(path, params: dict[str, Tensor]) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "params": {
            name: {
                "shape": list(t.data.shape),
                "values": [float(v) for v in t.data.reshape(-1)],
            }
            for name, t in params.items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_params(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into plain arrays keyed by parameter name."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    out = {}
    for name, rec in payload["params"].items():
        arr = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        out[name] = arr
    return out


def restore_params(path, params: dict[str, Tensor]) -> None:
    """Load a checkpoint into existing parameter tensors, in place."""
    stored = load_params(path)
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"parameter names disagree (missing={missing}, unexpected={extra})"
        )
    for name, t in params.items():
        if tuple(stored[name].shape) != t.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {stored[name].shape}, "
                f"model {t.data.shape}"
            )
        t.data[...] = stored[name]
