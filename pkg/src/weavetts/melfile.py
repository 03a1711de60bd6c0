"""MELF mel-spectrogram container and its metadata sidecar.

Layout (all integers little-endian):

    magic          4 bytes  b"MELF"
    version        u32      currently 1
    n_mels         u32
    frame_count    u32
    frame_shift_ms f32
    frames         frame_count * n_mels f32, row-major (one row per frame)

Sidecar metadata is line-delimited JSON next to the mel payload.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Tuple

import numpy as np

from .errors import ShapeError

MELF_MAGIC = b"MELF"
MELF_VERSION = 1


def write_melf(path: str | Path, frames: np.ndarray, frame_shift_ms: float) -> None:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise ShapeError(f"frames must be 2-D (frame_count, n_mels), got {frames.shape}")
    frame_count, n_mels = frames.shape
    with open(path, "wb") as f:
        f.write(MELF_MAGIC)
        np.array([MELF_VERSION, n_mels, frame_count], dtype="<u4").tofile(f)
        np.array([frame_shift_ms], dtype="<f4").tofile(f)
        frames.astype("<f4").tofile(f)


def read_melf(path: str | Path) -> Tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MELF_MAGIC:
            raise ShapeError(f"not a MELF file: bad magic {magic!r}")
        header = np.fromfile(f, dtype="<u4", count=3)
        if header.size != 3:
            raise ShapeError("truncated MELF header")
        version, n_mels, frame_count = (int(v) for v in header)
        if version != MELF_VERSION:
            raise ShapeError(f"unsupported MELF version {version}")
        shift = np.fromfile(f, dtype="<f4", count=1)
        data = np.fromfile(f, dtype="<f4", count=frame_count * n_mels)
        if shift.size != 1 or data.size != frame_count * n_mels:
            raise ShapeError("truncated MELF payload")
    return data.reshape(frame_count, n_mels).astype(np.float32), float(shift[0])


def write_sidecar(path: str | Path, records: Iterable[Dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_sidecar(path: str | Path) -> List[Dict[str, Any]]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
