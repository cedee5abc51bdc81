"""Byte-level vocabulary, corpus ingestion and fixed-length packing.

Ids 0..255 are raw bytes, 256 is padding and 257 is the diffusion mask.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DomainError, TokenIndexError

N_BYTES = 256
PAD_ID = 256
MASK_ID = 257
VOCAB_SIZE = 258


def encode(text: bytes | str) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def decode(ids, strip: bool = False) -> bytes:
    """Bytes for ``ids``. ``strip`` drops PAD and MASK; otherwise they are an error."""
    arr = np.asarray(ids, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= VOCAB_SIZE):
        raise TokenIndexError(f"ids must lie in [0, {VOCAB_SIZE})")
    special = arr >= N_BYTES
    if special.any():
        if not strip:
            kind = "MASK" if (arr == MASK_ID).any() else "PAD"
            raise DomainError(f"cannot decode {kind} id without strip=True")
        arr = arr[~special]
    return arr.astype(np.uint8).tobytes()


def iter_files(paths: Iterable[str | os.PathLike]) -> list[Path]:
    """Files named by ``paths``; directories are walked in lexicographic order."""
    out: list[Path] = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        elif p.is_file():
            out.append(p)
        else:
            raise DomainError(f"no such file or directory: {p}")
    return out


def read_corpus(paths: Iterable[str | os.PathLike]) -> np.ndarray:
    return encode(b"".join(f.read_bytes() for f in iter_files(paths)))


@dataclass
class PackedCorpus:
    sequences: np.ndarray  # [n, context_len]
    split: str
    digest: str

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def pad_mask(self) -> np.ndarray:
        return self.sequences == PAD_ID


def _window_in_valid(digest: str, index: int, seed: int, split_fraction: float) -> bool:
    h = hashlib.sha256(f"{digest}:{seed}:{index}".encode()).digest()
    u = int.from_bytes(h[:8], "little") / 2.0 ** 64
    return u >= split_fraction


def pack(ids, context_len: int, split_fraction: float = 1.0, seed: int = 0) -> tuple[PackedCorpus, PackedCorpus]:
    """Cut ``ids`` into contiguous windows and split them into (train, valid).

    The last window is padded with PAD. A window goes to ``valid`` when a
    hash of (corpus digest, seed, window index) falls above ``split_fraction``;
    ``split_fraction=1`` keeps everything in ``train``.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise DomainError("cannot pack an empty corpus")
    if context_len < 2:
        raise DomainError("context_len must be at least 2")
    if not 0.0 <= split_fraction <= 1.0:
        raise DomainError("split_fraction must lie in [0, 1]")
    digest = hashlib.sha256(ids.astype(np.int16).tobytes()).hexdigest()
    n = -(-ids.size // context_len)
    padded = np.full(n * context_len, PAD_ID, dtype=np.int64)
    padded[: ids.size] = ids
    windows = padded.reshape(n, context_len)
    valid = np.array([_window_in_valid(digest, i, seed, split_fraction) for i in range(n)], dtype=bool)
    return (
        PackedCorpus(windows[~valid], "train", digest),
        PackedCorpus(windows[valid], "valid", digest),
    )
