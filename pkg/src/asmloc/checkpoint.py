"""Checkpoints: a JSON index plus a little-endian float32 blob.

The index maps every parameter name to its shape and byte offset in the
blob, and carries free-form metadata (model config, refinement stage).
"""

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT = "asmloc-checkpoint"
VERSION = 1


def save_checkpoint(path, arrays, meta=None):
    """Write ``<path>.json`` and ``<path>.bin``; return the index path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = path.with_suffix(".bin")
    index = {"format": FORMAT, "version": VERSION, "blob": blob_path.name,
             "meta": meta or {}, "params": {}}
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            index["params"][name] = {"shape": list(np.shape(arr)), "offset": offset}
            fh.write(buf)
            offset += len(buf)
    index_path = path.with_suffix(".json")
    index_path.write_text(json.dumps(index, indent=1))
    return index_path


def load_checkpoint(path, expected_shapes=None):
    """Read a checkpoint; returns ``(arrays, meta)``.

    ``expected_shapes`` (name -> shape) is checked exactly: a missing,
    extra or mis-shaped parameter raises ``CheckpointError`` naming it.
    """
    index_path = Path(path).with_suffix(".json")
    try:
        index = json.loads(index_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint index {index_path}: {exc}") from exc
    if index.get("format") != FORMAT:
        raise CheckpointError(f"{index_path} is not an {FORMAT} index")
    raw = (index_path.parent / index["blob"]).read_bytes()
    arrays = {}
    for name, entry in index["params"].items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 4 * n > len(raw):
            raise CheckpointError(f"parameter {name!r} runs past the end of the blob")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=start).astype(np.float64).reshape(shape)
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in arrays:
                raise CheckpointError(f"parameter {name!r} missing from checkpoint")
            if tuple(arrays[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"parameter {name!r} has shape {arrays[name].shape}, config expects {tuple(shape)}")
        extra = set(arrays) - set(expected_shapes)
        if extra:
            raise CheckpointError(f"unexpected parameter {sorted(extra)[0]!r} in checkpoint")
    return arrays, index.get("meta", {})
