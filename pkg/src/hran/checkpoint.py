"""Binary checkpoint format.

Layout::

    b"HRAN1"
    uint64 little-endian header length
    UTF-8 JSON header {config, schedule, epoch, lr, extra, tensors: [[name, dtype, shape, offset], ...]}
    raw little-endian IEEE-754 payloads in manifest order (offsets relative to payload start)

Files are written to a temporary sibling and renamed into place, so a crash
never leaves a half-written checkpoint under the target name.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hran.errors import CompatibilityError, FormatError

MAGIC = b"HRAN1"
_LEN = struct.Struct("<Q")
_DTYPES = {"float64": "<f8", "float32": "<f4"}


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    schedule: dict | None = None
    epoch: int = 0
    lr: float | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    manifest, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        manifest.append([name, dtype, list(arr.shape), offset])
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "config": ckpt.config, "schedule": ckpt.schedule, "epoch": ckpt.epoch,
        "lr": ckpt.lr, "extra": ckpt.extra, "tensors": manifest,
    }, sort_keys=True, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_LEN.pack(len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError("missing HRAN1 magic bytes", offset=0)
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise FormatError("truncated header length", offset=pos)
    (hlen,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) < pos + hlen:
        raise FormatError(f"header of {hlen} bytes runs past end of file", offset=pos)
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        manifest = header["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header ({exc})", offset=pos) from None
    base = pos + hlen
    tensors = {}
    for entry in manifest:
        try:
            name, dtype, shape, off = entry
            np_dtype = np.dtype(_DTYPES[dtype])
        except (ValueError, KeyError, TypeError):
            raise FormatError(f"bad manifest entry {entry!r}", offset=pos) from None
        nbytes = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        start = base + int(off)
        if start + nbytes > len(data):
            raise FormatError(f"tensor {name!r} runs past end of file", offset=start)
        arr = np.frombuffer(data, dtype=np_dtype, count=nbytes // np_dtype.itemsize, offset=start)
        tensors[name] = arr.reshape(shape).astype(dtype)
    expected_end = base + sum(int(np.prod(s, dtype=np.int64)) * np.dtype(_DTYPES[d]).itemsize for _, d, s, _ in manifest)
    if len(data) != expected_end:
        raise FormatError(f"file has {len(data) - expected_end} unexpected trailing bytes", offset=expected_end)
    return Checkpoint(
        config=header["config"], tensors=tensors, schedule=header.get("schedule"),
        epoch=int(header.get("epoch", 0)), lr=header.get("lr"), extra=header.get("extra") or {},
    )


def check_compatible(ckpt: Checkpoint, config: dict) -> None:
    if ckpt.config != config:
        diff = sorted(k for k in set(ckpt.config) | set(config) if ckpt.config.get(k) != config.get(k))
        raise CompatibilityError(f"checkpoint configuration differs in {', '.join(diff)}")
