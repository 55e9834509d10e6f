"""Volume error metrics, improvement maps, and the evaluation harness.

NRMSE is root-mean-square error over all voxels divided by the ground-truth
maximum.  SSIM uses a 7x7x7 uniform window with population statistics,
averaged over valid window positions only.  evaluate_run scores every
(method, volume) pair in a dataset manifest and writes a machine-readable
TSV, a human-readable table, absolute-error maps, and binary maps of where
each method beats plain interpolation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .degrade import REGIMES
from .dictlearn import CoupledDictionary
from .enhance import EnhanceConfig, enhance
from .errors import DataError, GeometryError, ParameterError
from .volume import Volume3D, load_volume, save_volume, upsample_cubic

INTERPOLATION = "interpolation"
SSIM_WINDOW = 7


def _paired(x: Volume3D, xhat: Volume3D) -> tuple[np.ndarray, np.ndarray]:
    if x.dims != xhat.dims:
        raise GeometryError(f"volume dims differ: {x.dims} vs {xhat.dims}")
    return x.data.astype(np.float64), xhat.data.astype(np.float64)


def nrmse(x: Volume3D, xhat: Volume3D) -> float:
    """sqrt(mean((x - xhat)^2)) / max(x), over all voxels."""
    a, b = _paired(x, xhat)
    peak = float(a.max())
    if peak <= 0.0:
        raise DataError("nrmse undefined: ground-truth maximum is not positive")
    return float(np.sqrt(np.mean((a - b) ** 2)) / peak)


def _window_sums(a: np.ndarray, w: int) -> np.ndarray:
    """Sum of a over every w-cube position, via an integral volume."""
    c = a
    for axis in range(3):
        c = np.cumsum(c, axis=axis)
    p = np.pad(c, [(1, 0)] * 3)
    hi = [slice(w, n + 1) for n in a.shape]
    lo = [slice(0, n - w + 1) for n in a.shape]
    return (
        p[hi[0], hi[1], hi[2]]
        - p[lo[0], hi[1], hi[2]] - p[hi[0], lo[1], hi[2]] - p[hi[0], hi[1], lo[2]]
        + p[lo[0], lo[1], hi[2]] + p[lo[0], hi[1], lo[2]] + p[hi[0], lo[1], lo[2]]
        - p[lo[0], lo[1], lo[2]]
    )


def ssim(
    x: Volume3D,
    xhat: Volume3D,
    window: int = SSIM_WINDOW,
    data_range: float | None = None,
) -> float:
    """Mean local structural similarity over all full-window positions.

    Local means, variances, and covariance are population statistics over
    each window (divide by the window volume); stabilizers C1 = (0.01 L)^2
    and C2 = (0.03 L)^2 with L = data_range, defaulting to max(x).  Identical
    inputs score exactly 1 because numerator and denominator are then the
    same floating-point quantities.
    """
    a, b = _paired(x, xhat)
    if window < 1 or window > min(a.shape):
        raise GeometryError(f"window {window} does not fit volume dims {a.shape}")
    level = float(a.max()) if data_range is None else float(data_range)
    if level <= 0.0:
        raise DataError("ssim undefined: data range is not positive")
    n = float(window ** 3)
    mu_a = _window_sums(a, window) / n
    mu_b = _window_sums(b, window) / n
    var_a = _window_sums(a * a, window) / n - mu_a * mu_a
    var_b = _window_sums(b * b, window) / n - mu_b * mu_b
    cov = _window_sums(a * b, window) / n - mu_a * mu_b
    c1 = (0.01 * level) ** 2
    c2 = (0.03 * level) ** 2
    score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def error_map(x: Volume3D, xhat: Volume3D) -> Volume3D:
    """Per-voxel absolute error |x - xhat| as a volume."""
    a, b = _paired(x, xhat)
    return Volume3D(np.abs(a - b).astype(np.float32), x.spacing)


def binary_improvement_map(x: Volume3D, est_a: Volume3D, est_b: Volume3D) -> Volume3D:
    """1 where est_a is strictly closer to x than est_b, else 0."""
    truth, ea = _paired(x, est_a)
    _, eb = _paired(x, est_b)
    better = np.abs(truth - ea) < np.abs(truth - eb)
    return Volume3D(better.astype(np.float32), x.spacing)


@dataclass(frozen=True)
class ManifestEntry:
    """One aligned pair in a dataset manifest; paths are manifest-relative."""

    high_path: str
    low_path: str
    regime: str
    snr_gm: float
    snr_wm: float
    seed: int

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise DataError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")


def write_manifest(path, entries) -> None:
    """Write one tab-separated record per pair.

    Columns: high-path, low-path, regime, snr_gm, snr_wm, seed.
    """
    lines = ["# high\tlow\tregime\tsnr_gm\tsnr_wm\tseed"]
    for e in entries:
        lines.append(
            f"{e.high_path}\t{e.low_path}\t{e.regime}\t{e.snr_gm:.10g}\t{e.snr_wm:.10g}\t{e.seed}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a manifest; blank lines and #-comments are skipped."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise DataError(f"{path}:{ln}: expected 6 tab-separated fields, got {len(parts)}")
            try:
                entries.append(
                    ManifestEntry(
                        parts[0], parts[1], parts[2],
                        float(parts[3]), float(parts[4]), int(parts[5]),
                    )
                )
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: {exc}") from exc
    return entries


@dataclass(frozen=True)
class EvalRow:
    method: str
    regime: str
    volume: str
    nrmse: float
    ssim: float


@dataclass(frozen=True)
class EvalReport:
    """Per-volume rows plus one aggregate (mean) row per (method, regime)."""

    rows: tuple[EvalRow, ...]
    aggregates: tuple[EvalRow, ...]
    map_paths: tuple[str, ...]

    def to_tsv(self) -> str:
        lines = ["method\tregime\tvolume\tnrmse\tssim"]
        for r in (*self.rows, *self.aggregates):
            lines.append(f"{r.method}\t{r.regime}\t{r.volume}\t{r.nrmse:.10g}\t{r.ssim:.10g}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = f"{'method':<16}{'regime':<8}{'volume':<20}{'nrmse':>10}{'ssim':>10}"
        rule = "-" * len(header)
        body = [
            f"{r.method:<16}{r.regime:<8}{r.volume:<20}{r.nrmse:>10.4f}{r.ssim:>10.4f}"
            for r in (*self.rows, *self.aggregates)
        ]
        return "\n".join([header, rule, *body]) + "\n"


def _derive_scale(high: Volume3D, low: Volume3D, entry: ManifestEntry) -> tuple[int, int, int]:
    scale = []
    for h, l in zip(high.dims, low.dims):
        if h % l:
            raise GeometryError(
                f"{entry.high_path}: high dims {high.dims} not an integer multiple of low {low.dims}"
            )
        scale.append(h // l)
    return tuple(scale)


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def evaluate_run(
    manifest_path,
    methods,
    out_dir,
    dictionary: CoupledDictionary | None = None,
    enhance_cfg: EnhanceConfig | None = None,
) -> EvalReport:
    """Score estimates against ground truth for every pair in the manifest.

    The interpolation baseline is always scored (it is prepended when
    missing) and always recomputed.  The method "srep" is computed and
    persisted when a dictionary is passed; any other method, and "srep"
    without a dictionary, is read from
    <out_dir>/estimates/<method>/<stem of high path>.iqv.  Writes report.tsv,
    report.txt, per-method absolute-error maps, and binary maps against
    interpolation under <out_dir>/maps/.
    """
    methods = list(methods)
    if INTERPOLATION not in methods:
        methods.insert(0, INTERPOLATION)
    if len(set(methods)) != len(methods):
        raise ParameterError(f"duplicate method names: {methods}")
    entries = read_manifest(manifest_path)
    if not entries:
        raise DataError(f"{manifest_path}: manifest lists no pairs")
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    rows: list[EvalRow] = []
    maps: list[str] = []
    by_key: dict[tuple[str, str], list[EvalRow]] = {}
    for entry in entries:
        high = load_volume(os.path.join(base_dir, entry.high_path))
        low = load_volume(os.path.join(base_dir, entry.low_path))
        stem = _stem(entry.high_path)
        estimates: dict[str, Volume3D] = {}
        for method in methods:
            est_path = os.path.join(out_dir, "estimates", method, stem + ".iqv")
            if method == INTERPOLATION:
                est = upsample_cubic(low, _derive_scale(high, low, entry))
            elif method == "srep" and dictionary is not None:
                est = enhance(low, dictionary, enhance_cfg or EnhanceConfig())
                os.makedirs(os.path.dirname(est_path), exist_ok=True)
                save_volume(est, est_path)
            elif os.path.exists(est_path):
                est = load_volume(est_path)
            else:
                raise DataError(f"missing estimate for method {method!r}: {est_path}")
            if est.dims != high.dims:
                raise DataError(
                    f"{method} estimate for {stem} has dims {est.dims}, expected {high.dims}"
                )
            estimates[method] = est
            row = EvalRow(method, entry.regime, stem, nrmse(high, est), ssim(high, est))
            rows.append(row)
            by_key.setdefault((method, entry.regime), []).append(row)

            emap_path = os.path.join(out_dir, "maps", "error", method, stem + ".iqv")
            os.makedirs(os.path.dirname(emap_path), exist_ok=True)
            save_volume(error_map(high, est), emap_path)
            maps.append(emap_path)
            if method != INTERPOLATION:
                bmap_path = os.path.join(
                    out_dir, "maps", "better", f"{method}_vs_{INTERPOLATION}", stem + ".iqv"
                )
                os.makedirs(os.path.dirname(bmap_path), exist_ok=True)
                save_volume(
                    binary_improvement_map(high, est, estimates[INTERPOLATION]), bmap_path
                )
                maps.append(bmap_path)

    aggregates = []
    for method in methods:
        for regime in REGIMES:
            group = by_key.get((method, regime))
            if not group:
                continue
            aggregates.append(
                EvalRow(
                    method,
                    regime,
                    "mean",
                    float(np.mean([r.nrmse for r in group])),
                    float(np.mean([r.ssim for r in group])),
                )
            )
    report = EvalReport(tuple(rows), tuple(aggregates), tuple(maps))
    with open(os.path.join(out_dir, "report.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_tsv())
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_table())
    return report
