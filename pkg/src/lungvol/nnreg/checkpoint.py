"""RNNCKPT1 checkpoint format.

Layout: magic line, config line (spec hash plus canonical spec JSON), one record
line per array (`name f32 dims...`), a `data` line, then the concatenated raw
little-endian float32 array data in record order.  Write -> read -> write is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .models import ModelSpec, instantiate_model

_MAGIC = "RNNCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model) -> None:
    spec: ModelSpec = model.spec
    records = model.state_records()
    spec_json = json.dumps(asdict(spec), sort_keys=True, separators=(",", ":"))
    lines = [_MAGIC, f"config {spec.config_hash()} {spec_json}"]
    for name, arr in records:
        dims = " ".join(str(d) for d in arr.shape) if arr.ndim else "0"
        lines.append(f"{name} f32 {dims}".rstrip())
    lines.append("data")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, arr in records:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C"))


def load_checkpoint(path) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"\ndata\n")
    if not blob.startswith(_MAGIC.encode()) or end < 0:
        raise CheckpointError(f"not an {_MAGIC} checkpoint: {path}")
    header = blob[:end].decode("ascii").split("\n")
    payload = blob[end + len(b"\ndata\n"):]

    config_line = header[1].split(" ", 2)
    if len(config_line) != 3 or config_line[0] != "config":
        raise CheckpointError(f"bad config line in {path}")
    stored_hash, spec_json = config_line[1], config_line[2]
    try:
        spec = ModelSpec(**json.loads(spec_json))
    except (TypeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"bad spec JSON in {path}: {e}") from None
    if spec.config_hash() != stored_hash:
        raise CheckpointError(f"config hash mismatch in {path}")

    records: dict[str, np.ndarray] = {}
    offset = 0
    for line in header[2:]:
        parts = line.split()
        if len(parts) < 3 or parts[1] != "f32":
            raise CheckpointError(f"bad record line {line!r} in {path}")
        name = parts[0]
        dims = tuple(int(d) for d in parts[2:])
        if dims == (0,):
            dims = ()
        count = int(np.prod(dims)) if dims else 1
        chunk = payload[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CheckpointError(f"truncated data for record {name!r} in {path}")
        records[name] = np.frombuffer(chunk, dtype="<f4").reshape(dims).copy()
        offset += 4 * count
    if offset != len(payload):
        raise CheckpointError(f"{len(payload) - offset} trailing bytes in {path}")
    return spec, records


def load_model(path, dtype=np.float32):
    """Rebuild the architecture from the stored spec and load its weights."""
    spec, records = load_checkpoint(path)
    model = instantiate_model(spec, seed=0, dtype=dtype)
    model.load_state_records(records)
    return model
