"""Single-file weight checkpoints.

Layout: magic string "EMTSW1", a little-endian uint32 manifest length, a
JSON manifest ({"meta": ..., "nets": [{"name", "shapes"}]}), then the raw
little-endian float64 array data concatenated in manifest order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"EMTSW1"


def save_checkpoint(path, nets: dict, meta: dict | None = None):
    """Write named parameter lists (dict name -> list of arrays) plus meta."""
    manifest = {
        "meta": meta or {},
        "nets": [
            {"name": name, "shapes": [list(a.shape) for a in arrays]}
            for name, arrays in nets.items()
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arrays in nets.items():
            for a in arrays:
                f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (nets dict, meta dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a weight checkpoint (bad magic {magic!r})")
        (blob_len,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(blob_len).decode("utf-8"))
        nets = {}
        for entry in manifest["nets"]:
            arrays = []
            for shape in entry["shapes"]:
                count = int(np.prod(shape)) if shape else 1
                buf = f.read(8 * count)
                if len(buf) != 8 * count:
                    raise ValueError(f"{path}: truncated array data for {entry['name']}")
                arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
            nets[entry["name"]] = arrays
    return nets, manifest.get("meta", {})
