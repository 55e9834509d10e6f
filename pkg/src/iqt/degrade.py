"""Measurement simulator: blur + decimation + noise, SNR regimes, phantoms.

The low-quality observation of a volume X is modeled as a separable Gaussian
blur followed by block-average decimation plus white Gaussian noise on the
coarse grid.  Noise level and tissue contrast both derive from a per-tissue
SNR pair (snr_gm, snr_wm) drawn from a bivariate Gaussian; Mahalanobis
distance to that Gaussian defines the in-distribution and out-of-distribution
test regimes.  Procedural ellipsoid phantoms stand in for real anatomy so the
whole pipeline runs at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import GeometryError, ParameterError, SamplingError
from .seeds import substream
from .volume import Volume3D

REGIMES = ("ind1", "ind2", "ood")
_IND1_MAX_DISTANCE = 1.0
_IND2_MIN_DISTANCE = 3.0
_MAX_REJECTIONS = 10_000

# Invented defaults, configurable everywhere they are used: the training
# distribution sits at comfortable SNR, the OOD one is markedly noisier.
DEFAULT_IND_SNR = ((40.0, 60.0), ((25.0, 15.0), (15.0, 25.0)))
DEFAULT_OOD_SNR = ((12.0, 16.0), ((4.0, 2.0), (2.0, 4.0)))


@dataclass(frozen=True, eq=False)
class DegradationParams:
    """Knobs of the forward model.

    scale: integer decimation per axis (slice axis last).
    blur_sigma: Gaussian sigma in high-quality-grid voxels; None picks the
        anti-aliasing default (0, 0, s_k / 2).
    snr: (snr_gm, snr_wm); math.inf disables noise.
    noise_seed: seed of the additive-noise stream.
    """

    scale: tuple[int, int, int] = (1, 1, 4)
    blur_sigma: tuple[float, float, float] | None = None
    snr: tuple[float, float] = (math.inf, math.inf)
    noise_seed: int = 0

    def __post_init__(self) -> None:
        scale = tuple(int(s) for s in self.scale)
        if len(scale) != 3 or any(s < 1 for s in scale):
            raise ParameterError(f"scale must be three integers >= 1, got {self.scale}")
        sigma = self.blur_sigma
        if sigma is None:
            sigma = (0.0, 0.0, scale[2] / 2.0)
        sigma = tuple(float(s) for s in sigma)
        if len(sigma) != 3 or any(s < 0 for s in sigma):
            raise ParameterError(f"blur_sigma must be three reals >= 0, got {self.blur_sigma}")
        snr = tuple(float(s) for s in self.snr)
        if len(snr) != 2 or any(not s > 0 for s in snr):
            raise ParameterError(f"snr components must be positive, got {self.snr}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "blur_sigma", sigma)
        object.__setattr__(self, "snr", snr)
        object.__setattr__(self, "noise_seed", int(self.noise_seed))


@dataclass(frozen=True, eq=False)
class SnrDistribution:
    """Bivariate Gaussian over (snr_gm, snr_wm)."""

    mean: tuple[float, float]
    covariance: np.ndarray

    def __post_init__(self) -> None:
        mean = tuple(float(m) for m in self.mean)
        cov = np.array(self.covariance, dtype=np.float64)
        if len(mean) != 2 or cov.shape != (2, 2):
            raise ParameterError("SNR distribution needs a 2-vector mean and 2x2 covariance")
        if not np.allclose(cov, cov.T):
            raise ParameterError("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ParameterError("covariance must be positive-definite") from exc
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class PhantomSpec:
    """Procedural phantom: nested smooth ellipsoids over three tissue classes.

    class_means orders (background, gm_mean, wm_mean) and must increase;
    size_range gives inner-ellipsoid semi-axes relative to the outer shell.
    """

    dims: tuple[int, int, int] = (32, 32, 32)
    class_means: tuple[float, float, float] = (0.0, 0.52, 0.78)
    n_ellipsoids: int = 4
    size_range: tuple[float, float] = (0.12, 0.30)
    seed: int = 0

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        bg, gm, wm = (float(v) for v in self.class_means)
        if not (wm > gm > bg >= 0.0):
            raise ParameterError(
                f"class means must satisfy wm > gm > background >= 0, got {self.class_means}"
            )
        lo, hi = (float(v) for v in self.size_range)
        if not (0.0 < lo <= hi < 1.0):
            raise ParameterError(f"size_range must satisfy 0 < lo <= hi < 1, got {self.size_range}")
        if self.n_ellipsoids < 1:
            raise ParameterError("n_ellipsoids must be >= 1")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "class_means", (bg, gm, wm))
        object.__setattr__(self, "size_range", (lo, hi))


def mahalanobis(dist: SnrDistribution, point) -> float:
    """sqrt((p - mu)^T Sigma^-1 (p - mu)) via the Cholesky factor."""
    delta = np.asarray(point, dtype=np.float64).reshape(2) - np.asarray(dist.mean)
    chol = np.linalg.cholesky(dist.covariance)
    z = np.linalg.solve(chol, delta)
    return float(np.sqrt(z @ z))


def sample_snr(
    dist: SnrDistribution,
    regime: str,
    ood_dist: SnrDistribution | None = None,
    seed: int = 0,
) -> tuple[float, float]:
    """Draw one SNR pair for the requested regime.

    ind1 rejection-samples `dist` until the Mahalanobis distance is < 1;
    ind2 until it is > 3 with snr_wm > snr_gm; ood draws from `ood_dist`
    unconstrained.  Components are clamped positive.  Ten thousand
    consecutive rejections raise a SamplingError.
    """
    regime = str(regime).lower()
    if regime not in REGIMES:
        raise ParameterError(f"regime must be one of {REGIMES}, got {regime!r}")
    if regime == "ood":
        if ood_dist is None:
            raise ParameterError("ood regime requires ood_dist")
        source = ood_dist
    else:
        source = dist
    rng = np.random.default_rng(seed)
    for _ in range(_MAX_REJECTIONS):
        raw = rng.multivariate_normal(np.asarray(source.mean), source.covariance)
        pair = np.maximum(raw, 1e-6)
        if regime == "ood":
            return float(pair[0]), float(pair[1])
        distance = mahalanobis(source, pair)
        if regime == "ind1" and distance < _IND1_MAX_DISTANCE:
            return float(pair[0]), float(pair[1])
        if regime == "ind2" and distance > _IND2_MIN_DISTANCE and pair[1] > pair[0]:
            return float(pair[0]), float(pair[1])
    raise SamplingError(
        f"no admissible {regime} sample after {_MAX_REJECTIONS} rejections; "
        "check the SNR distribution parameters"
    )


def tissue_means(vol: Volume3D, background_threshold: float = 0.0) -> tuple[float, float]:
    """Estimate (gm_mean, wm_mean) from intensities alone.

    Foreground voxels (above the background threshold) are split once at
    their mean; the lower group is read as GM, the upper as WM.  Exact for
    noise-free two-tissue phantoms, a documented heuristic otherwise.
    """
    data = vol.data.astype(np.float64)
    fg = data[data > background_threshold]
    if fg.size == 0:
        value = float(data.mean())
        return value, value
    pivot = fg.mean()
    low = fg[fg <= pivot]
    high = fg[fg > pivot]
    gm = float(low.mean()) if low.size else float(pivot)
    wm = float(high.mean()) if high.size else gm
    return gm, wm


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(4.0 * sigma + 0.5))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _blur_axis(arr: np.ndarray, axis: int, sigma: float) -> np.ndarray:
    kernel = _gauss_kernel(sigma)
    radius = kernel.size // 2
    moved = np.moveaxis(arr, axis, -1)
    pad = [(0, 0)] * (moved.ndim - 1) + [(radius, radius)]
    padded = np.pad(moved, pad, mode="edge")
    n = moved.shape[-1]
    out = np.zeros_like(moved)
    for t, w in enumerate(kernel):
        out += w * padded[..., t:t + n]
    return np.moveaxis(out, -1, axis)


def degrade(x: Volume3D, params: DegradationParams) -> Volume3D:
    """Apply the forward model: blur, block-average decimation, then noise.

    The noise level is sigma_n = gm_mean(x) / snr_gm, added as white Gaussian
    noise on the decimated grid (deterministic in noise_seed); with infinite
    SNR the operator is linear in x.  Contrast shaping from the SNR pair is a
    separate step (`contrast_remap`) so linearity holds here.
    """
    s_i, s_j, s_k = params.scale
    n_i, n_j, n_k = x.dims
    if n_i % s_i or n_j % s_j or n_k % s_k:
        raise GeometryError(f"dims {x.dims} not divisible by scale {params.scale}")
    work = x.data.astype(np.float64)
    for axis, sigma in enumerate(params.blur_sigma):
        if sigma > 0.0:
            work = _blur_axis(work, axis, sigma)
    work = work.reshape(n_i // s_i, s_i, n_j // s_j, s_j, n_k // s_k, s_k).mean(axis=(1, 3, 5))
    gm_mean, _ = tissue_means(x)
    sigma_n = 0.0 if math.isinf(params.snr[0]) else gm_mean / params.snr[0]
    if sigma_n > 0.0:
        rng = np.random.default_rng(params.noise_seed)
        work = work + rng.normal(0.0, sigma_n, size=work.shape)
    spacing = tuple(sp * s for sp, s in zip(x.spacing, params.scale))
    return Volume3D(work.astype(np.float32), spacing)


def noise_sigma(x: Volume3D, snr_gm: float) -> float:
    """The additive-noise standard deviation degrade() uses for this volume."""
    gm_mean, _ = tissue_means(x)
    return 0.0 if math.isinf(snr_gm) else gm_mean / snr_gm


def contrast_remap(x: Volume3D, snr: tuple[float, float]) -> Volume3D:
    """Rescale above-GM intensities so wm_mean / sigma_n equals snr_wm.

    Intensities at or below the GM mean are untouched; the ramp above it is
    scaled linearly so the WM mean lands on snr_wm * sigma_n.  Applied to the
    clean volume before degrade(), this couples contrast to the sampled SNR
    pair while keeping degrade() itself linear.
    """
    gm_mean, wm_mean = tissue_means(x)
    if math.isinf(snr[0]) or math.isinf(snr[1]):
        return x
    sigma_n = gm_mean / snr[0]
    target_wm = sigma_n * snr[1]
    if wm_mean <= gm_mean or sigma_n == 0.0:
        return x
    gain = (target_wm - gm_mean) / (wm_mean - gm_mean)
    data = x.data.astype(np.float64)
    out = np.where(data > gm_mean, gm_mean + (data - gm_mean) * gain, data)
    return Volume3D(out.astype(np.float32), x.spacing)


def make_phantom(spec: PhantomSpec) -> tuple[Volume3D, np.ndarray, np.ndarray]:
    """Rasterize a seeded phantom; returns (volume, gm_mask, wm_mask).

    One outer ellipsoid carries the GM intensity; n_ellipsoids inner
    ellipsoids carry WM and are kept strictly inside the shell.  Voxels
    outside everything are background.  All three classes are guaranteed
    non-empty, so the histogram has exactly the three class means.
    """
    if min(spec.dims) < 16:
        raise GeometryError(f"phantom dims must be >= 16 per axis, got {spec.dims}")
    rng = np.random.default_rng(spec.seed)
    dims = np.asarray(spec.dims, dtype=np.float64)
    center = dims / 2.0 + rng.uniform(-0.03, 0.03, 3) * dims
    semi = dims * rng.uniform(0.34, 0.44, 3)

    grid = np.indices(spec.dims, dtype=np.float64)
    # Normalized coordinates of every voxel w.r.t. the outer shell.
    u = [(grid[a] - center[a]) / semi[a] for a in range(3)]
    head = u[0] ** 2 + u[1] ** 2 + u[2] ** 2 <= 1.0

    lo, hi = spec.size_range
    wm = np.zeros(spec.dims, dtype=bool)
    for _ in range(spec.n_ellipsoids):
        radius = rng.uniform(lo, hi, 3)
        margin = 1.0 - radius.max() - 0.05
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        direction = direction / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0])
        offset = direction * rng.uniform(0.0, max(margin, 0.0))
        dist2 = sum(((u[a] - offset[a]) / radius[a]) ** 2 for a in range(3))
        wm |= dist2 <= 1.0
    wm &= head
    if not wm.any():
        # Degenerate draw (tiny ellipsoids on a coarse grid can rasterize to
        # nothing): carve a central core so all three classes exist.
        dist2 = sum((u[a] / max(hi, 0.25)) ** 2 for a in range(3))
        wm = (dist2 <= 1.0) & head
    gm = head & ~wm

    bg_val, gm_val, wm_val = spec.class_means
    data = np.full(spec.dims, bg_val, dtype=np.float32)
    data[gm] = gm_val
    data[wm] = wm_val
    return Volume3D(data), gm, wm


def build_dataset(
    n_volumes: int,
    regime: str,
    dists: tuple[SnrDistribution, SnrDistribution],
    spec: PhantomSpec,
    params: DegradationParams,
) -> list[tuple[Volume3D, Volume3D, tuple[float, float]]]:
    """Synthesize aligned (high, low, snr_pair) triples for one regime.

    Each volume gets a fresh phantom, a regime-sampled SNR pair, the contrast
    remap, and the forward model; per-volume seeds derive from spec.seed and
    params.noise_seed, so the set is reproducible element by element.
    """
    if n_volumes < 0:
        raise ParameterError("n_volumes must be >= 0")
    ind_dist, ood_dist = dists
    out = []
    for v in range(n_volumes):
        phantom_spec = replace(spec, seed=substream(spec.seed, "phantom", v))
        high, _, _ = make_phantom(phantom_spec)
        snr = sample_snr(ind_dist, regime, ood_dist, seed=substream(spec.seed, "snr", v))
        shaped = contrast_remap(high, snr)
        vol_params = replace(params, snr=snr, noise_seed=substream(params.noise_seed, "noise", v))
        low = degrade(shaped, vol_params)
        out.append((high, low, snr))
    return out
