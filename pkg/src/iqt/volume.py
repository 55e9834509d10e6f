"""Dense 3-D scalar volumes: file I/O, patch decomposition, cubic upsampling.

Volumes are carried as C-contiguous float32 arrays of shape (n_i, n_j, n_k),
so the flat element order is k-fastest.  The on-disk IQV format mirrors that
layout exactly (little-endian):

    magic  "IQV1"                      4 bytes
    dims   n_i, n_j, n_k               3 x u32
    spacing (mm per voxel, per axis)   3 x f32
    voxels, k-fastest order            n_i*n_j*n_k x f32

No compression, no padding; a load/save cycle is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, FormatError, GeometryError, ParameterError

_MAGIC = b"IQV1"
_HEADER = struct.Struct("<4s3I3f")


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A dense 3-D scalar field with per-axis voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 3:
            raise ParameterError(f"expected 3-D voxel data, got {arr.ndim}-D")
        if min(arr.shape) < 1:
            raise ParameterError(f"volume has an empty axis: dims {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("volume contains non-finite voxels")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ParameterError(f"spacing must be three positive reals, got {self.spacing}")
        arr.flags.writeable = False  # immutable: safe to share across threads
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class PatchSpec:
    """Geometry of the cubic patch decomposition.

    Args:
        size_m: patch edge length in voxels.
        overlap_p: voxels shared between adjacent patches, 0 <= overlap_p < size_m.
        background_threshold: intensity below which a voxel counts as background.
        background_fraction_max: patches whose background fraction exceeds this
            are dropped from training libraries (exclusion happens in the
            harvesting code, not in extract_patches itself).
    """

    size_m: int
    overlap_p: int = 0
    background_threshold: float = 0.0
    background_fraction_max: float = 0.8

    def __post_init__(self) -> None:
        if self.size_m < 1:
            raise ParameterError(f"size_m must be >= 1, got {self.size_m}")
        if not 0 <= self.overlap_p < self.size_m:
            raise ParameterError(
                f"overlap_p must satisfy 0 <= overlap_p < size_m, got {self.overlap_p}"
            )
        if not 0.0 <= self.background_fraction_max <= 1.0:
            raise ParameterError(
                f"background_fraction_max must lie in [0, 1], got {self.background_fraction_max}"
            )

    @property
    def stride(self) -> int:
        return self.size_m - self.overlap_p


@dataclass(frozen=True, eq=False)
class Patch:
    """One cubic patch: origin, flattened values, and its mean at extraction."""

    origin: tuple[int, int, int]
    values: np.ndarray
    mean_mu: float

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=np.float32, copy=True).reshape(-1)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        object.__setattr__(self, "mean_mu", float(self.mean_mu))


def save_volume(vol: Volume3D, path) -> None:
    """Write `vol` to `path` in the IQV format."""
    n_i, n_j, n_k = vol.dims
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, n_i, n_j, n_k, *vol.spacing))
        fh.write(vol.data.astype("<f4", copy=False).tobytes())


def load_volume(path) -> Volume3D:
    """Read an IQV file back into a Volume3D.

    Raises:
        FormatError: the file is too short for a header or has a bad magic.
        CorruptionError: the payload disagrees with the header.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, n_i, n_j, n_k, s_i, s_j, s_k = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    count = n_i * n_j * n_k
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * count:
        raise CorruptionError(
            f"{path}: header promises {count} voxels, payload holds {len(payload) // 4}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(n_i, n_j, n_k)
    try:
        return Volume3D(data, (s_i, s_j, s_k))
    except ParameterError as exc:
        raise CorruptionError(f"{path}: {exc}") from exc


def _axis_origins(dim: int, size: int, stride: int) -> list[int]:
    # Regular stride from 0; the final origin is clamped so the last patch
    # ends exactly at the boundary.
    last = dim - size
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def patch_origins(dims: tuple[int, int, int], spec: PatchSpec) -> list[tuple[int, int, int]]:
    """Enumerate patch origins in lexicographic (i, j, k) order."""
    if spec.size_m > min(dims):
        raise GeometryError(f"size_m {spec.size_m} exceeds volume dims {dims}")
    per_axis = [_axis_origins(d, spec.size_m, spec.stride) for d in dims]
    return [(i, j, k) for i in per_axis[0] for j in per_axis[1] for k in per_axis[2]]


def extract_patches(vol: Volume3D, spec: PatchSpec) -> list[Patch]:
    """Decompose `vol` into overlapping cubic patches.

    Patches are enumerated from the volume corner in lexicographic (i, j, k)
    order with stride size_m - overlap_p; trailing origins are clamped so the
    final patch per axis ends at the boundary.  Every voxel is covered.
    """
    m = spec.size_m
    out = []
    for (i, j, k) in patch_origins(vol.dims, spec):
        values = np.ascontiguousarray(vol.data[i:i + m, j:j + m, k:k + m]).reshape(-1)
        out.append(Patch((i, j, k), values, float(values.mean(dtype=np.float64))))
    return out


def background_fraction(patch: Patch, threshold: float) -> float:
    """Fraction of patch voxels strictly below `threshold`."""
    vals = patch.values
    return float(np.count_nonzero(vals < threshold)) / vals.size


def reconstruct_from_patches(
    patches: list[Patch],
    dims: tuple[int, int, int],
    spec: PatchSpec,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Volume3D:
    """Assemble a volume from patches, averaging overlapping contributions.

    Accumulation runs in float64 with integer coverage counts, so feeding the
    output of extract_patches straight back in reproduces the input volume
    bit-exactly.
    """
    m = spec.size_m
    total = np.zeros(dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.int64)
    for patch in patches:
        i, j, k = patch.origin
        if min(i, j, k) < 0 or i + m > dims[0] or j + m > dims[1] or k + m > dims[2]:
            raise GeometryError(f"patch at {patch.origin} extends beyond dims {dims}")
        if patch.values.size != m ** 3:
            raise GeometryError(
                f"patch at {patch.origin} holds {patch.values.size} values, expected {m ** 3}"
            )
        cube = patch.values.reshape(m, m, m).astype(np.float64)
        total[i:i + m, j:j + m, k:k + m] += cube
        count[i:i + m, j:j + m, k:k + m] += 1
    if np.any(count == 0):
        raise GeometryError("patches do not cover the volume")
    return Volume3D((total / count).astype(np.float32), spacing)


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    # Catmull-Rom weights (a = -0.5).
    at = np.abs(t)
    near = ((1.5 * at - 2.5) * at * at + 1.0) * (at <= 1.0)
    far = (((-0.5 * at + 2.5) * at - 4.0) * at + 2.0) * ((at > 1.0) & (at < 2.0))
    return near + far


def _upsample_axis(arr: np.ndarray, axis: int, s: int) -> np.ndarray:
    n = arr.shape[axis]
    x = np.arange(n * s, dtype=np.float64) / s
    base = np.floor(x).astype(np.intp)
    frac = x - base
    idx = np.clip(np.stack([base - 1, base, base + 1, base + 2]), 0, n - 1)
    weights = _cubic_kernel(np.stack([frac + 1.0, frac, frac - 1.0, frac - 2.0]))
    moved = np.moveaxis(arr, axis, -1)
    gathered = moved[..., idx]  # (..., 4, n*s)
    out = np.einsum("...to,to->...o", gathered, weights)
    return np.moveaxis(out, -1, axis)


def upsample_cubic(vol: Volume3D, factors: tuple[int, int, int]) -> Volume3D:
    """Upsample by integer factors with separable Catmull-Rom interpolation.

    Output sample x along an axis reads source coordinate x / s, so source
    grid points are reproduced exactly; boundary taps are edge-clamped.
    Constant volumes stay constant and linear ramps are reproduced on
    interior voxels.  Spacing shrinks by the factors.
    """
    factors = tuple(int(f) for f in factors)
    if len(factors) != 3 or any(f < 1 for f in factors):
        raise ParameterError(f"factors must be three integers >= 1, got {factors}")
    out = vol.data.astype(np.float64)
    for axis, s in enumerate(factors):
        if s > 1:
            out = _upsample_axis(out, axis, s)
    spacing = tuple(sp / f for sp, f in zip(vol.spacing, factors))
    return Volume3D(out.astype(np.float32), spacing)
