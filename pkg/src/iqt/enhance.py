"""Patch-based volume enhancement with a coupled dictionary.

The low-quality volume is cubic-upsampled, every overlapping patch is coded
against the feature dictionary, the shared code is decoded into a
high-frequency residual, and residuals are added onto the interpolated base
before average-overlap reassembly.  An empty code therefore degrades
gracefully to plain interpolation, and the patch mean obeys
mean(out) = mean(interpolated) + mean(decoded residual).
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dictlearn import CoupledDictionary, _feature_volumes
from .errors import ParameterError
from .sparse import DEFAULT_MAX_ITER, DEFAULT_TOL, SparseCode, _lasso_cd_batch
from .volume import PatchSpec, Volume3D, patch_origins, upsample_cubic

_CHUNK = 2048  # patches per solver batch; caps peak memory


@dataclass(frozen=True)
class EnhanceConfig:
    """Solver and geometry settings for enhancement.

    overlap_p of None means dense overlap (size_m - 1).  size_m and scale, if
    given, must agree with the dictionary; they exist so a config file can
    assert what it was written for.  beta is accepted for interface
    compatibility with the solver's parameter list but has no effect.
    """

    lam: float = 0.01
    overlap_p: int | None = None
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    size_m: int | None = None
    scale: tuple[int, int, int] | None = None
    beta: float = 0.0
    threads: int | None = None

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ParameterError(f"lambda must be positive, got {self.lam}")
        if not self.tol > 0:
            raise ParameterError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ParameterError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.threads is not None and self.threads < 1:
            raise ParameterError(f"threads must be >= 1, got {self.threads}")
        if self.scale is not None:
            object.__setattr__(self, "scale", tuple(int(s) for s in self.scale))


@dataclass(frozen=True)
class RunReport:
    """Per-run diagnostics: size, code density, solver health, timing."""

    patch_count: int
    mean_l0: float
    solver_warnings: int
    wall_time_s: float

    def to_text(self) -> str:
        return (
            f"patch_count = {self.patch_count}\n"
            f"mean_l0 = {self.mean_l0:.10g}\n"
            f"solver_warnings = {self.solver_warnings}\n"
            f"wall_time_s = {self.wall_time_s:.3f}\n"
        )


def _resolve_threads(cfg: EnhanceConfig) -> int:
    if cfg.threads is not None:
        return cfg.threads
    env = os.environ.get("IQT_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ParameterError(f"IQT_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ParameterError(f"IQT_THREADS must be >= 1, got {n}")
        return n
    return 1


def _check_geometry(cdict: CoupledDictionary, cfg: EnhanceConfig) -> PatchSpec:
    geo = cdict.geometry
    if cfg.size_m is not None and cfg.size_m != geo.size_m:
        raise ParameterError(f"config patch size {cfg.size_m} != dictionary size {geo.size_m}")
    if cfg.scale is not None and cfg.scale != geo.scale:
        raise ParameterError(f"config scale {cfg.scale} != dictionary scale {geo.scale}")
    overlap = geo.size_m - 1 if cfg.overlap_p is None else cfg.overlap_p
    return PatchSpec(geo.size_m, overlap)


def _gather_patches(volumes: list[np.ndarray], origins: np.ndarray, m: int) -> np.ndarray:
    """Rows of flattened m-cubes cut from each volume at `origins`, concatenated."""
    oi, oj, ok = origins[:, 0], origins[:, 1], origins[:, 2]
    blocks = [
        sliding_window_view(v, (m, m, m))[oi, oj, ok].reshape(len(origins), -1)
        for v in volumes
    ]
    return blocks[0] if len(blocks) == 1 else np.concatenate(blocks, axis=1)


def _code_chunk(
    cdict: CoupledDictionary,
    cfg: EnhanceConfig,
    feats: list[np.ndarray],
    base: np.ndarray,
    origins: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Solve one chunk: returns (patch values (B, m^3), kkt residuals, total L0)."""
    m = cdict.geometry.size_m
    raw = _gather_patches(feats, origins, m)
    z = cdict.pca.project(raw)
    codes, kkt = _lasso_cd_batch(cdict.d_low.atoms, z.T, cfg.lam, cfg.tol, cfg.max_iter)
    residuals = (cdict.d_high.atoms @ codes).T
    patches = _gather_patches([base], origins, m) + residuals
    return patches, kkt, int(np.count_nonzero(codes))


def enhance_with_report(
    low: Volume3D, cdict: CoupledDictionary, cfg: EnhanceConfig = EnhanceConfig()
) -> tuple[Volume3D, RunReport]:
    """Enhance `low` and report patch count, mean code density, and warnings.

    Patches are processed in fixed-size chunks; chunk results are accumulated
    in enumeration order, so the output is bit-identical for any thread
    count (IQT_THREADS or cfg.threads only schedules the solves).
    """
    start = time.perf_counter()
    spec = _check_geometry(cdict, cfg)
    up = upsample_cubic(low, cdict.geometry.scale)
    origins = np.asarray(patch_origins(up.dims, spec), dtype=np.int64)
    feats = _feature_volumes(up.data)
    base = up.data.astype(np.float64)

    m = spec.size_m
    total = np.zeros(up.dims, dtype=np.float64)
    count = np.zeros(up.dims, dtype=np.int64)
    l0_sum = 0
    warnings_n = 0
    chunks = [origins[i:i + _CHUNK] for i in range(0, len(origins), _CHUNK)]
    threads = _resolve_threads(cfg)

    def solve(chunk: np.ndarray):
        return _code_chunk(cdict, cfg, feats, base, chunk)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = pool.map(solve, chunks)
            outcomes = list(results)
    else:
        outcomes = [solve(c) for c in chunks]

    for chunk, (patches, kkt, l0) in zip(chunks, outcomes):
        l0_sum += l0
        warnings_n += int(np.count_nonzero(kkt > cfg.tol))
        cubes = patches.reshape(-1, m, m, m)
        for (i, j, k), cube in zip(chunk, cubes):
            total[i:i + m, j:j + m, k:k + m] += cube
            count[i:i + m, j:j + m, k:k + m] += 1

    out = Volume3D((total / count).astype(np.float32), up.spacing)
    report = RunReport(
        patch_count=len(origins),
        mean_l0=l0_sum / len(origins),
        solver_warnings=warnings_n,
        wall_time_s=time.perf_counter() - start,
    )
    return out, report


def enhance(low: Volume3D, cdict: CoupledDictionary, cfg: EnhanceConfig = EnhanceConfig()) -> Volume3D:
    """Enhanced volume only; see enhance_with_report for diagnostics."""
    return enhance_with_report(low, cdict, cfg)[0]


def enhance_patch(
    y_patch: np.ndarray, cdict: CoupledDictionary, cfg: EnhanceConfig = EnhanceConfig()
) -> tuple[np.ndarray, SparseCode, float]:
    """Code and decode a single upsampled-grid patch.

    The standalone path filters the patch cube itself (edge-clamped), so
    border features differ from the in-volume pipeline, which sees true
    neighbors; interiors agree.  Returns (decoded patch, code, KKT residual).
    """
    m = cdict.geometry.size_m
    _check_geometry(cdict, cfg)
    cube = np.asarray(y_patch, dtype=np.float64).reshape(m, m, m)
    raw = np.concatenate([f.reshape(-1) for f in _feature_volumes(cube)])
    z = cdict.pca.project(raw)
    codes, kkt = _lasso_cd_batch(cdict.d_low.atoms, z[:, None], cfg.lam, cfg.tol, cfg.max_iter)
    dense = codes[:, 0]
    x = cube.reshape(-1) + cdict.d_high.atoms @ dense
    return x, SparseCode.from_dense(dense, cdict.n_atoms), float(kkt[0])
