"""Versioned binary checkpoints with a content checksum.

Layout: magic, format version, a length-prefixed JSON header (config
snapshot, step, schedule/RNG state, and the name/dtype/shape table of
every tensor group), the raw tensor payload in header order, then a
sha256 digest of everything before it. Header keys are sorted and the
tensor table is sorted by (group, name), so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PKCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")  # magic, version, header length


@dataclass
class Checkpoint:
    config: dict
    step: int
    state: dict
    groups: dict[str, dict[str, np.ndarray]]  # e.g. params / moment_m / moment_v / ema


def save_checkpoint(
    path: str | Path,
    config: dict,
    step: int,
    state: dict,
    groups: dict[str, dict[str, np.ndarray]],
) -> None:
    table = {
        group: [
            [name, str(arr.dtype), list(arr.shape)]
            for name, arr in sorted(tensors.items())
        ]
        for group, tensors in sorted(groups.items())
    }
    header = {"config": config, "step": step, "state": state, "tensors": table}
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [_PREFIX.pack(MAGIC, VERSION, len(hjson)), hjson]
    for group in sorted(groups):
        for name in sorted(groups[group]):
            arr = np.ascontiguousarray(groups[group][name])
            chunks.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    body = b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    tmp = Path(path).with_suffix(".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size + 32:
        raise ValueError(f"{path}: truncated checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch, file is corrupt")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[_PREFIX.size : _PREFIX.size + hlen])
    pos = _PREFIX.size + hlen
    groups: dict[str, dict[str, np.ndarray]] = {}
    for group in sorted(header["tensors"]):
        tensors = {}
        for name, dtype, shape in header["tensors"][group]:
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            arr = np.frombuffer(
                body, dtype=np.dtype(dtype).newbyteorder("<"), count=n, offset=pos
            )
            tensors[name] = arr.reshape(shape).astype(dtype, copy=True)
            pos += arr.nbytes
        groups[group] = tensors
    if pos != len(body):
        raise ValueError(f"{path}: {len(body) - pos} trailing payload bytes")
    return Checkpoint(
        config=header["config"],
        step=header["step"],
        state=header["state"],
        groups=groups,
    )
