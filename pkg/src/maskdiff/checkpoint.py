"""Single-file checkpoint container.

Layout::

    b"DIFSSM01" | uint64 LE header length | UTF-8 JSON header | zero pad | payload

The payload starts at a 64-byte boundary. Each directory entry gives a
tensor's name, shape, offset (from the payload start, 64-byte aligned) and
byte length. Tensors are stored as little-endian float32.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointIntegrityError, CheckpointVersionError, NotACheckpointError
from .model import DenoiserModel, ModelConfig
from .trainer import OptimState

MAGIC = b"DIFSSM01"
FORMAT_VERSION = 1
ALIGN = 64
_STORE = np.dtype("<f4")


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


@dataclass
class Checkpoint:
    model: DenoiserModel
    optim: OptimState | None
    seed: int
    step: int
    header: dict = field(default_factory=dict)


def save_checkpoint(model: DenoiserModel, optim: OptimState | None, path, seed: int = 0,
                    extra: dict | None = None) -> Path:
    """Write ``model`` (and optimizer moments) atomically to ``path``."""
    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in model.params.items()]
    if optim is not None:
        for n in model.params:
            if n in optim.m:
                tensors.append((f"optim.m.{n}", optim.m[n]))
                tensors.append((f"optim.v.{n}", optim.v[n]))
    directory = []
    offset = 0
    for name, arr in tensors:
        nbytes = int(arr.size) * _STORE.itemsize
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset = _align(offset + nbytes)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "model_config": model.config.to_dict(),
        "has_optimizer": optim is not None,
        "optimizer": optim.hyper() if optim is not None else None,
        "rng": {"kind": "counter", "seed": int(seed)},
        "step": int(optim.step) if optim is not None else 0,
        "extra": extra or {},
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    prefix = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes
    payload_start = _align(len(prefix))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(prefix)
            fh.write(b"\0" * (payload_start - len(prefix)))
            pos = 0
            for entry, (_, arr) in zip(directory, tensors):
                fh.write(b"\0" * (entry["offset"] - pos))
                fh.write(np.ascontiguousarray(arr, dtype=_STORE).tobytes())
                pos = entry["offset"] + entry["nbytes"]
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _read_prefix(buf: bytes, path) -> tuple[dict, int]:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise CheckpointIntegrityError(f"{path}: header truncated")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: unreadable header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    return header, _align(16 + hlen)


def read_header(path) -> dict:
    """Parsed JSON header of a checkpoint, without loading tensors."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) == 16 and head[:8] == MAGIC:
            (hlen,) = struct.unpack("<Q", head[8:16])
            head += fh.read(hlen)
    return _read_prefix(head, path)[0]


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    buf = Path(path).read_bytes()
    header, start = _read_prefix(buf, path)
    payload_len = len(buf) - start
    arrays: dict[str, np.ndarray] = {}
    end_prev = 0
    for entry in header["tensors"]:
        name, shape, off, nb = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        if off % ALIGN or off < end_prev or nb != int(np.prod(shape, dtype=np.int64)) * _STORE.itemsize:
            raise CheckpointIntegrityError(f"{path}: bad directory entry for tensor {name!r}")
        if off + nb > payload_len:
            raise CheckpointIntegrityError(f"{path}: payload truncated inside tensor {name!r}")
        arrays[name] = np.frombuffer(buf, dtype=_STORE, count=nb // _STORE.itemsize,
                                     offset=start + off).reshape(shape).astype(np.float32)
        end_prev = off + nb
    config = ModelConfig.from_dict(header["model_config"])
    params = {n: a for n, a in arrays.items() if not n.startswith("optim.")}
    model = DenoiserModel(config, params)
    optim = None
    if header.get("has_optimizer"):
        hyper = dict(header["optimizer"])
        optim = OptimState(**hyper)
        for n in params:
            if f"optim.m.{n}" in arrays:
                optim.m[n] = arrays[f"optim.m.{n}"]
                optim.v[n] = arrays[f"optim.v.{n}"]
    return Checkpoint(model=model, optim=optim, seed=int(header["rng"]["seed"]),
                      step=int(header.get("step", 0)), header=header)
