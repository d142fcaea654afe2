"""Binary checkpoint container.

Layout::

    b"ADVRCKPT"  magic (8 bytes)
    uint32 LE    format version
    uint32 LE    header length in bytes
    header       UTF-8 JSON: {"variant", "meta", "arrays": [{name, shape, dtype, offset, nbytes}]}
    payload      raw little-endian array bytes, concatenated in header order

Arrays keep their own dtype ("<f4" or "<f8") so a 64-bit model survives the
round trip bit-exactly. Parameter arrays are named ``param/<name>``; any
extra arrays (optimizer moments) use other prefixes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .model import ArchVariant, Model, build_model

MAGIC = b"ADVRCKPT"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, model: Model, extra: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> Path:
    path = Path(path)
    arrays = {f"param/{k}": t.data for k, t in model.params.items()}
    for k, v in (extra or {}).items():
        arrays[k] = np.asarray(v)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        dt = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"variant": model.variant.to_dict(), "meta": meta or {}, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Tuple[Model, Dict[str, np.ndarray], dict]:
    """Return (model, extra arrays, meta)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    base = 16 + hlen
    variant = ArchVariant.from_dict(header["variant"])
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = blob[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated data for array {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    extra = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    dtype = next(iter(params.values())).dtype if params else np.float64
    model = build_model(variant, seed=0, dtype=dtype.newbyteorder("="))
    model.load_state_dict(params)
    return model, extra, header["meta"]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
