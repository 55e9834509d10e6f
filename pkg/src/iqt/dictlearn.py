"""Coupled dictionary construction from aligned volume pairs.

The low-quality side of a training pair is described by first- and
second-difference features of the cubic-upsampled volume, compressed by PCA;
the high-quality side by the residual of the true patch over its interpolated
counterpart.  A K-SVD pass learns the feature dictionary, and the residual
dictionary is the least-squares map from the final sparse codes back to the
residuals, so one code decodes both sides.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, DataError, FormatError, GeometryError, ParameterError
from .seeds import substream
from .sparse import Dictionary, _omp_batch
from .volume import PatchSpec, Volume3D, patch_origins, upsample_cubic

_IQD_MAGIC = b"IQD1"
_IQD_HEADER = struct.Struct("<4s9I")
_RIDGE_EPS = 1e-8

# Correlation taps of the six zero-DC feature filters, applied along each
# axis in turn: central first differences, then second differences.
_FILTER_TAPS = ((-1.0, 0.0, 1.0), (1.0, -2.0, 1.0))


@dataclass(frozen=True, eq=False)
class PcaProjection:
    """Projection onto the leading principal components of the training features.

    The basis comes from a mean-centered fit, so explained_variance_ratio has
    its usual meaning, but `project` itself is linear (no mean subtraction):
    an all-zero feature vector, e.g. from a constant patch, maps to zero and
    therefore codes to the empty sparse code whatever the penalty.  The mean
    is kept for `reconstruct`, which re-embeds codes around it.
    """

    basis: np.ndarray  # (reduced_dim, raw_dim), orthonormal rows
    mean: np.ndarray  # (raw_dim,)
    explained_variance_ratio: float

    def __post_init__(self) -> None:
        basis = np.array(self.basis, dtype=np.float32, copy=True)
        mean = np.array(self.mean, dtype=np.float32, copy=True).reshape(-1)
        if basis.ndim != 2 or basis.shape[1] != mean.size:
            raise ParameterError("basis must be (reduced_dim x raw_dim) matching the mean length")
        gram = basis.astype(np.float64) @ basis.astype(np.float64).T
        if not np.allclose(gram, np.eye(basis.shape[0]), atol=1e-5):
            raise ParameterError("basis rows must be orthonormal")
        if not 0.0 <= self.explained_variance_ratio <= 1.0 + 1e-12:
            raise ParameterError("explained_variance_ratio must lie in [0, 1]")
        basis.flags.writeable = False
        mean.flags.writeable = False
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "explained_variance_ratio", float(self.explained_variance_ratio))

    @property
    def reduced_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def raw_dim(self) -> int:
        return self.basis.shape[1]

    def project(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        return x @ self.basis.astype(np.float64).T

    def reconstruct(self, codes: np.ndarray) -> np.ndarray:
        """Best rank-k re-embedding of projected codes: mean + (z - Bm)B."""
        z = np.asarray(codes, dtype=np.float64)
        basis = self.basis.astype(np.float64)
        mean = self.mean.astype(np.float64)
        return mean + (z - mean @ basis.T) @ basis


@dataclass(frozen=True)
class PatchGeometry:
    """Patch size, training overlap, and decimation scale baked into a dictionary."""

    size_m: int
    overlap_p: int
    scale: tuple[int, int, int]

    def __post_init__(self) -> None:
        if self.size_m < 1 or not 0 <= self.overlap_p < self.size_m:
            raise ParameterError(f"bad patch geometry: size {self.size_m}, overlap {self.overlap_p}")
        scale = tuple(int(s) for s in self.scale)
        if len(scale) != 3 or any(s < 1 for s in scale):
            raise ParameterError(f"scale must be three integers >= 1, got {self.scale}")
        object.__setattr__(self, "scale", scale)


@dataclass(frozen=True, eq=False)
class CoupledDictionary:
    """Paired dictionaries sharing one sparse code per patch.

    d_low codes PCA-reduced features (unit-norm atoms); d_high decodes the
    same code into a high-frequency patch residual and keeps its
    least-squares scale, so its columns are deliberately not renormalized.
    All matrices are stored float32, matching the on-disk format, so a
    save/load cycle is exact.
    """

    d_low: Dictionary
    d_high: Dictionary
    pca: PcaProjection
    geometry: PatchGeometry
    ksvd_objectives: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.d_low.n_atoms != self.d_high.n_atoms:
            raise ParameterError(
                f"atom counts differ: d_low {self.d_low.n_atoms}, d_high {self.d_high.n_atoms}"
            )
        if self.d_low.n_dim != self.pca.reduced_dim:
            raise ParameterError("d_low dimension must match the PCA reduced dimension")
        if self.d_high.n_dim != self.geometry.size_m ** 3:
            raise ParameterError("d_high dimension must equal size_m^3")
        object.__setattr__(self, "ksvd_objectives", tuple(float(v) for v in self.ksvd_objectives))

    @property
    def n_atoms(self) -> int:
        return self.d_low.n_atoms


def _feature_volumes(data: np.ndarray) -> list[np.ndarray]:
    """Six filtered copies of the volume (float64), edge-clamped at borders."""
    work = data.astype(np.float64)
    out = []
    for taps in _FILTER_TAPS:
        for axis in range(3):
            moved = np.moveaxis(work, axis, -1)
            padded = np.pad(moved, [(0, 0), (0, 0), (1, 1)], mode="edge")
            n = moved.shape[-1]
            acc = np.zeros_like(moved)
            for t, w in enumerate(taps):
                if w != 0.0:
                    acc += w * padded[..., t:t + n]
            out.append(np.moveaxis(acc, -1, axis))
    return out


def extract_lq_features(upsampled: Volume3D, origin: tuple[int, int, int], size_m: int) -> np.ndarray:
    """Feature vector of one patch: the six filter responses over its footprint.

    Filters are applied to the full upsampled volume (so patch borders see
    their true neighbors) and the responses are cropped to the patch cube and
    concatenated, giving a vector of length 6 * size_m^3.
    """
    i, j, k = (int(o) for o in origin)
    dims = upsampled.dims
    if min(i, j, k) < 0 or i + size_m > dims[0] or j + size_m > dims[1] or k + size_m > dims[2]:
        raise GeometryError(f"patch at {origin} size {size_m} exceeds volume dims {dims}")
    feats = _feature_volumes(upsampled.data)
    return np.concatenate(
        [f[i:i + size_m, j:j + size_m, k:k + size_m].reshape(-1) for f in feats]
    )


def extract_hq_residual(high_patch: np.ndarray, upsampled_low_patch: np.ndarray) -> np.ndarray:
    """High-frequency residual: the true patch minus its interpolated base."""
    high = np.asarray(high_patch, dtype=np.float64).reshape(-1)
    base = np.asarray(upsampled_low_patch, dtype=np.float64).reshape(-1)
    if high.size != base.size:
        raise ParameterError(f"patch lengths differ: {high.size} vs {base.size}")
    return high - base


def fit_pca(features, min_variance: float = 0.9) -> PcaProjection:
    """Smallest projection whose cumulative explained variance >= min_variance."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        x = np.stack([np.asarray(f, dtype=np.float64).reshape(-1) for f in features])
    if x.shape[0] < 2:
        raise ParameterError("PCA needs at least 2 samples")
    if not 0.0 < min_variance <= 1.0:
        raise ParameterError(f"min_variance must lie in (0, 1], got {min_variance}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    energy = singular ** 2
    total = energy.sum()
    if total <= 1e-24:
        basis = np.zeros((1, x.shape[1]), dtype=np.float64)
        basis[0, 0] = 1.0
        return PcaProjection(basis, mean, 1.0)
    cumulative = np.cumsum(energy) / total
    k = int(np.searchsorted(cumulative, min_variance) + 1)
    k = min(k, vt.shape[0])
    return PcaProjection(vt[:k], mean, float(cumulative[k - 1]))


def _ksvd(
    z: np.ndarray,
    k_atoms: int,
    iters: int,
    sparsity_t: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """K-SVD on columns of z; returns (atoms, codes, objective per iteration)."""
    dim, n_samples = z.shape
    norms = np.linalg.norm(z, axis=0)
    candidates = np.nonzero(norms > 1e-12)[0]
    if candidates.size < k_atoms:
        raise ParameterError(
            f"only {candidates.size} usable samples for {k_atoms} atoms; need more data"
        )
    init = rng.choice(candidates, size=k_atoms, replace=False)
    atoms = z[:, init] / norms[init]

    codes = np.zeros((k_atoms, n_samples))
    objectives: list[float] = []
    for _ in range(iters):
        # Coding stage; keep the previous code wherever greedy pursuit is worse,
        # so the objective can only go down.
        proposal = _omp_batch(atoms, z, sparsity_t)
        old_err = ((z - atoms @ codes) ** 2).sum(axis=0)
        new_err = ((z - atoms @ proposal) ** 2).sum(axis=0)
        keep_old = old_err < new_err
        if keep_old.any():
            proposal[:, keep_old] = codes[:, keep_old]
        codes = proposal

        residual = z - atoms @ codes
        sample_err = (residual ** 2).sum(axis=0)
        reseeded: list[int] = []
        for a in range(k_atoms):
            members = np.nonzero(codes[a] != 0.0)[0]
            if members.size == 0:
                # Dead atom: reseed from the worst-represented sample.
                err = sample_err.copy()
                err[reseeded] = -1.0
                worst = int(np.argmax(err))
                reseeded.append(worst)
                norm = np.linalg.norm(z[:, worst])
                if norm > 1e-12:
                    atoms[:, a] = z[:, worst] / norm
                continue
            block = residual[:, members] + np.outer(atoms[:, a], codes[a, members])
            u, s, vt = np.linalg.svd(block, full_matrices=False)
            atoms[:, a] = u[:, 0]
            codes[a, members] = s[0] * vt[0]
            residual[:, members] = block - np.outer(atoms[:, a], codes[a, members])
            sample_err[members] = (residual[:, members] ** 2).sum(axis=0)
        objectives.append(float((residual ** 2).sum()))
    return atoms, codes, objectives


def train_coupled(
    pairs,
    k_atoms: int,
    ksvd_iters: int = 20,
    sparsity_t: int = 3,
    *,
    geometry: PatchGeometry,
    pca_min_variance: float = 0.9,
    seed: int = 0,
) -> CoupledDictionary:
    """Two-stage coupled training over (lq_feature, hq_residual) pairs.

    Stage 1 fits the PCA on raw feature vectors; stage 2 runs K-SVD with
    greedy coding on the projected features; stage 3 solves the ridge
    least-squares problem mapping the final codes to the residuals, which
    gives the high dictionary its (unnormalized) scale.

    `pairs` is a sequence of (feature, residual) vector pairs, or a 2-tuple
    of stacked matrices with samples in rows.
    """
    if (
        isinstance(pairs, tuple)
        and len(pairs) == 2
        and isinstance(pairs[0], np.ndarray)
        and pairs[0].ndim == 2
    ):
        feats, resids = (np.asarray(p, dtype=np.float64) for p in pairs)
    else:
        pairs = list(pairs)
        if not pairs:
            raise ParameterError("training needs at least one pair")
        feats = np.stack([np.asarray(f, dtype=np.float64).reshape(-1) for f, _ in pairs])
        resids = np.stack([np.asarray(r, dtype=np.float64).reshape(-1) for _, r in pairs])
    n_samples = feats.shape[0]
    if resids.shape[0] != n_samples:
        raise ParameterError("feature and residual counts differ")
    if k_atoms < 1 or k_atoms > n_samples:
        raise ParameterError(f"k_atoms must lie in [1, {n_samples}], got {k_atoms}")
    if ksvd_iters < 1:
        raise ParameterError("ksvd_iters must be >= 1")
    if not 1 <= sparsity_t <= k_atoms:
        raise ParameterError(f"sparsity_t must lie in [1, k_atoms], got {sparsity_t}")
    if not 0.9 <= pca_min_variance <= 1.0:
        raise ParameterError(
            f"trained dictionaries must keep >= 90% feature variance, got {pca_min_variance}"
        )
    expected_hq = geometry.size_m ** 3
    if resids.shape[1] != expected_hq:
        raise ParameterError(
            f"residual length {resids.shape[1]} does not match size_m^3 = {expected_hq}"
        )

    pca = fit_pca(feats, pca_min_variance)
    projected = pca.project(feats).T  # (reduced_dim, S)
    sparsity = min(sparsity_t, projected.shape[0])
    rng = np.random.default_rng(substream(seed, "training"))
    atoms, codes, objectives = _ksvd(projected, k_atoms, ksvd_iters, sparsity, rng)

    gram = codes @ codes.T + _RIDGE_EPS * np.eye(k_atoms)
    d_high = np.linalg.solve(gram, codes @ resids).T

    # Publish in float32: the in-memory dictionary and its file image agree.
    low32 = atoms.astype(np.float32)
    low32 /= np.linalg.norm(low32.astype(np.float64), axis=0)
    return CoupledDictionary(
        d_low=Dictionary(low32.astype(np.float32), normalized=True),
        d_high=Dictionary(d_high.astype(np.float32), normalized=False),
        pca=pca,
        geometry=geometry,
        ksvd_objectives=tuple(objectives),
    )


def harvest_training_pairs(
    volume_pairs,
    spec: PatchSpec,
    scale: tuple[int, int, int],
    max_patches: int = 100_000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Collect (feature, residual) training data from aligned volume pairs.

    For every (high, low) pair the low volume is cubic-upsampled, features
    and residuals are gathered at the patch grid of `spec`, and patches whose
    ground-truth cube is mostly background (fraction > background_fraction_max
    at background_threshold) are excluded.  If more than max_patches survive,
    a seeded uniform subsample is kept.

    Returns (features (S, 6 m^3), residuals (S, m^3), origins (S, 3),
    volume_index (S,)).
    """
    m = spec.size_m
    feats_out: list[np.ndarray] = []
    resid_out: list[np.ndarray] = []
    origin_out: list[np.ndarray] = []
    volume_out: list[np.ndarray] = []
    for v, (high, low) in enumerate(volume_pairs):
        up = upsample_cubic(low, scale)
        if up.dims != high.dims:
            raise GeometryError(
                f"pair {v}: upsampled low dims {up.dims} do not match high dims {high.dims}"
            )
        feats = _feature_volumes(up.data)
        high64 = high.data.astype(np.float64)
        base64 = up.data.astype(np.float64)
        rows_f, rows_r, rows_o = [], [], []
        for origin in patch_origins(high.dims, spec):
            i, j, k = origin
            cube = high64[i:i + m, j:j + m, k:k + m]
            bg = np.count_nonzero(cube < spec.background_threshold) / cube.size
            if bg > spec.background_fraction_max:
                continue
            rows_f.append(
                np.concatenate([f[i:i + m, j:j + m, k:k + m].reshape(-1) for f in feats])
            )
            rows_r.append((cube - base64[i:i + m, j:j + m, k:k + m]).reshape(-1))
            rows_o.append(origin)
        if rows_f:
            feats_out.append(np.stack(rows_f))
            resid_out.append(np.stack(rows_r))
            origin_out.append(np.asarray(rows_o, dtype=np.int64))
            volume_out.append(np.full(len(rows_f), v, dtype=np.int64))
    if not feats_out:
        raise DataError("no training patches survive background exclusion")
    features = np.concatenate(feats_out)
    residuals = np.concatenate(resid_out)
    origins = np.concatenate(origin_out)
    volumes = np.concatenate(volume_out)
    if features.shape[0] > max_patches:
        rng = np.random.default_rng(substream(seed, "training", 1))
        keep = np.sort(rng.choice(features.shape[0], size=max_patches, replace=False))
        features, residuals = features[keep], residuals[keep]
        origins, volumes = origins[keep], volumes[keep]
    return features, residuals, origins, volumes


def save_dictionary(cdict: CoupledDictionary, path) -> None:
    """Write a coupled dictionary to `path` in the IQD format.

    Layout (little-endian): magic "IQD1"; u32 K, raw_feature_dim,
    reduced_dim, hq_dim, size_m, overlap_p, s_i, s_j, s_k; then f32 payload:
    explained variance ratio, PCA mean, PCA basis (row-major), d_low
    (column-major), d_high (column-major).
    """
    geo = cdict.geometry
    header = _IQD_HEADER.pack(
        _IQD_MAGIC,
        cdict.n_atoms,
        cdict.pca.raw_dim,
        cdict.pca.reduced_dim,
        cdict.d_high.n_dim,
        geo.size_m,
        geo.overlap_p,
        *geo.scale,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.float32(cdict.pca.explained_variance_ratio).tobytes())
        fh.write(cdict.pca.mean.astype("<f4", copy=False).tobytes())
        fh.write(np.ascontiguousarray(cdict.pca.basis, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cdict.d_low.atoms.T, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cdict.d_high.atoms.T, dtype="<f4").tobytes())


def load_dictionary(path) -> CoupledDictionary:
    """Read an IQD file back; inverse of save_dictionary, bit-exact."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _IQD_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, k, raw_dim, reduced_dim, hq_dim, size_m, overlap_p, s_i, s_j, s_k = \
        _IQD_HEADER.unpack_from(blob)
    if magic != _IQD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    counts = (1, raw_dim, reduced_dim * raw_dim, reduced_dim * k, hq_dim * k)
    expected = 4 * sum(counts)
    payload = blob[_IQD_HEADER.size:]
    if len(payload) != expected:
        raise CorruptionError(f"{path}: payload holds {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f4")
    splits = np.cumsum(counts)[:-1]
    ratio, mean, basis, low, high = np.split(values, splits)
    try:
        return CoupledDictionary(
            d_low=Dictionary(low.reshape(k, reduced_dim).T, normalized=True),
            d_high=Dictionary(high.reshape(k, hq_dim).T, normalized=False),
            pca=PcaProjection(basis.reshape(reduced_dim, raw_dim), mean, float(ratio[0])),
            geometry=PatchGeometry(size_m, overlap_p, (s_i, s_j, s_k)),
        )
    except ParameterError as exc:
        raise CorruptionError(f"{path}: {exc}") from exc
