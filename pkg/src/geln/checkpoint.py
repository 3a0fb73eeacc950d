"""Parameter checkpoints: name -> float64 array, in binary or JSON form.

Binary layout: ``MAGIC``, a little-endian uint64 header length, a UTF-8 JSON
header ``[[name, shape], ...]`` in sorted name order, then the concatenated
little-endian float64 values. Output is a pure function of the state, so equal
states give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GELNCKPT\x01"


def save_checkpoint(state: dict[str, np.ndarray], path) -> Path:
    path = Path(path)
    names = sorted(state)
    header = json.dumps([[n, list(np.shape(state[n]))] for n in names]).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    out = {}
    for name, shape in header:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        out[name] = arr.astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return out


def save_checkpoint_json(state: dict[str, np.ndarray], path) -> Path:
    path = Path(path)
    doc = {n: {"shape": list(np.shape(state[n])), "values": np.ravel(state[n]).tolist()} for n in sorted(state)}
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def load_checkpoint_json(path) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {n: np.array(e["values"], dtype=np.float64).reshape(e["shape"]) for n, e in doc.items()}
