"""Binary checkpoint format and the metric-artifact sidecar.

Layout (all integers little-endian uint32 unless noted):

    bytes 0..7   magic "XMODAL01"
    u32          format version (currently 1)
    u32          manifest byte length, then UTF-8 JSON manifest
    u32          tensor count
    per tensor:  u32 name length, name bytes,
                 u32 ndim, u32 * ndim shape,
                 raw little-endian float32 data

Tensors round-trip bit-exactly. The manifest carries the net spec,
config hash, training step, and optimizer counters.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"XMODAL01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, manifest: dict, arrays: dict[str, np.ndarray]):
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.ndim:
                # ascontiguousarray would promote 0-d arrays to 1-d
                arr = np.ascontiguousarray(arr)
            if arr.dtype != np.float32:
                raise CheckpointError(
                    f"tensor {name!r} is {arr.dtype}, expected float32")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def load_checkpoint(path):
    """Returns (manifest, {name: float32 array})."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<I", _read_exact(fh, 4))
        manifest = json.loads(_read_exact(fh, mlen).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4")
            arrays[name] = data.reshape(shape).astype(np.float32)
    return manifest, arrays


def save_sidecar(path, payload: dict):
    """Metric artifacts (lambda1, lambda2, distance stats, config hash)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_sidecar(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    for key in ("lambda1", "lambda2", "stats_x", "stats_y", "config_hash"):
        if key not in payload:
            raise CheckpointError(f"sidecar missing field {key!r}")
    return payload
