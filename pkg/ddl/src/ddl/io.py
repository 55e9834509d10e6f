"""IQV volume files and dataset manifests.

The on-disk contracts shared with the rest of the toolchain: an IQV file is
a little-endian header (magic "IQV1", three u32 dims, three f32 spacings)
followed by float32 voxels in C order; a manifest is one tab-separated
record per aligned pair with #-comments and blank lines ignored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"IQV1"
_HEADER = struct.Struct("<4s3I3f")


class IoError(Exception):
    """A file does not hold what its name or header promises."""


def save_volume(data: np.ndarray, path, spacing=(1.0, 1.0, 1.0)) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 3:
        raise IoError(f"expected a 3-d array, got shape {data.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, *data.shape, *spacing))
        fh.write(np.ascontiguousarray(data).tobytes())


def load_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Returns (float32 voxel array (i, j, k), spacing)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise IoError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, n_i, n_j, n_k, s_i, s_j, s_k = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise IoError(f"{path}: bad magic {magic!r}")
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * n_i * n_j * n_k:
        raise IoError(f"{path}: payload holds {len(payload) // 4} voxels, "
                      f"header promises {n_i * n_j * n_k}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_i, n_j, n_k).copy()
    return data, (float(s_i), float(s_j), float(s_k))


@dataclass(frozen=True)
class PairEntry:
    high_path: str
    low_path: str
    regime: str
    snr_gm: float
    snr_wm: float
    seed: int


def read_manifest(path) -> list[PairEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise IoError(f"{path}:{ln}: expected 6 tab-separated fields, got {len(parts)}")
            try:
                entries.append(PairEntry(parts[0], parts[1], parts[2],
                                         float(parts[3]), float(parts[4]), int(parts[5])))
            except ValueError as exc:
                raise IoError(f"{path}:{ln}: {exc}") from exc
    return entries
