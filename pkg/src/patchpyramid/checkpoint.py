"""Binary model checkpoints.

Layout (little-endian): magic ``FPPF``, format version u32, config block
(u32 byte length + UTF-8 JSON of the model config), then every parameter
as raw f64 in declaration order.  A plain-text sidecar manifest
(``<path>.manifest``) lists parameter names, shapes and byte offsets.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError
from .model import Model, ModelConfig

MAGIC = b"FPPF"
VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    path = str(path)
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=False).encode("utf-8")
    manifest_lines = []
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        for name, t in model.named_parameters():
            offset = fh.tell()
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
            shape = "x".join(str(n) for n in t.data.shape) or "scalar"
            manifest_lines.append(f"{name}\t{shape}\t{offset}\n")
    with open(path + ".manifest", "w", encoding="utf-8") as fh:
        fh.writelines(manifest_lines)


def load_checkpoint(path) -> Model:
    path = str(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    cfg_len = struct.unpack_from("<I", blob, 8)[0]
    cfg = ModelConfig(**json.loads(blob[12:12 + cfg_len].decode("utf-8")))
    model = Model(cfg, seed=0)
    pos = 12 + cfg_len
    for name, t in model.named_parameters():
        nbytes = t.data.size * 8
        if pos + nbytes > len(blob):
            raise DataError(f"{path}: truncated checkpoint at parameter {name}")
        arr = np.frombuffer(blob, dtype="<f8", count=t.data.size, offset=pos)
        t.data[...] = arr.reshape(t.data.shape)
        pos += nbytes
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes after parameters")
    return model
