"""Command-line front end: simulate, train, enhance, evaluate, phantom.

Configuration is a line-oriented text file of `section.key = value` entries;
every key has a default, unknown or duplicate keys are rejected, and command
flags override file values.  All randomness flows from the single root seed
through named substreams, so every artifact is reproducible byte for byte
(run reports carry wall-clock time and are the documented exception).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver
convergence failures above the configured threshold.
"""

from __future__ import annotations

import argparse
import os
import sys

from .degrade import (
    DEFAULT_IND_SNR,
    DEFAULT_OOD_SNR,
    REGIMES,
    DegradationParams,
    PhantomSpec,
    SnrDistribution,
    build_dataset,
    make_phantom,
)
from .dictlearn import PatchGeometry, harvest_training_pairs, load_dictionary, save_dictionary, train_coupled
from .enhance import EnhanceConfig, enhance_with_report
from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
    GeometryError,
    ParameterError,
    SamplingError,
)
from .metrics import ManifestEntry, evaluate_run, read_manifest, write_manifest
from .seeds import substream
from .volume import PatchSpec, Volume3D, load_volume, save_volume


def _int(text: str):
    return int(text)


def _float(text: str):
    return float(text)


def _tuple(conv, n: int):
    def parse(text: str):
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated values")
        return tuple(conv(p) for p in parts)

    return parse


def _choice(*options: str):
    def parse(text: str):
        value = text.strip().lower()
        if value not in options:
            raise ValueError(f"expected one of {options}")
        return value

    return parse


def _names(text: str):
    items = tuple(p.strip() for p in text.split(",") if p.strip())
    if not items:
        raise ValueError("expected at least one name")
    return items


def _auto_or(conv):
    def parse(text: str):
        return None if text.strip().lower() == "auto" else conv(text)

    return parse


# key -> (default value, parser); the complete configuration surface.
_SCHEMA: dict[str, tuple[object, object]] = {
    "seed": (0, _int),
    "dataset.dims": ((32, 32, 32), _tuple(_int, 3)),
    "dataset.count": (5, _int),
    "dataset.regime": ("ind1", _choice(*REGIMES)),
    "dataset.scale": ((1, 1, 4), _tuple(_int, 3)),
    "dataset.blur_sigma": (None, _auto_or(_tuple(_float, 3))),
    "dataset.class_means": ((0.0, 0.52, 0.78), _tuple(_float, 3)),
    "dataset.n_ellipsoids": (4, _int),
    "dataset.size_range": ((0.12, 0.30), _tuple(_float, 2)),
    "dataset.ind_mean": (DEFAULT_IND_SNR[0], _tuple(_float, 2)),
    "dataset.ind_cov": (sum(DEFAULT_IND_SNR[1], ()), _tuple(_float, 4)),
    "dataset.ood_mean": (DEFAULT_OOD_SNR[0], _tuple(_float, 2)),
    "dataset.ood_cov": (sum(DEFAULT_OOD_SNR[1], ()), _tuple(_float, 4)),
    "training.atoms": (256, _int),
    "training.patch": (5, _int),
    "training.overlap": (2, _int),
    "training.sparsity": (3, _int),
    "training.iterations": (20, _int),
    "training.pca_variance": (0.9, _float),
    "training.max_patches": (100_000, _int),
    "training.background_threshold": (0.05, _float),
    "training.background_fraction": (0.8, _float),
    "enhance.lambda": (0.01, _float),
    "enhance.tol": (1e-6, _float),
    "enhance.max_iter": (1000, _int),
    "enhance.overlap": (None, _auto_or(_int)),
    "enhance.max_warning_fraction": (1.0, _float),
    "eval.methods": (("interpolation", "srep"), _names),
}


def load_config(path: str | None) -> dict:
    """Defaults, then the config file if given; strict about keys."""
    cfg = {key: default for key, (default, _) in _SCHEMA.items()}
    if path is None:
        return cfg
    seen: set[str] = set()
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for ln, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{path}:{ln}: expected `section.key = value`, got {line!r}")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
        seen.add(key)
        try:
            cfg[key] = _SCHEMA[key][1](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}:{ln}: bad value for {key}: {exc}") from exc
    return cfg


def _cov(flat) -> tuple[tuple[float, float], tuple[float, float]]:
    return ((flat[0], flat[1]), (flat[2], flat[3]))


def _snr_dists(cfg: dict) -> tuple[SnrDistribution, SnrDistribution]:
    return (
        SnrDistribution(cfg["dataset.ind_mean"], _cov(cfg["dataset.ind_cov"])),
        SnrDistribution(cfg["dataset.ood_mean"], _cov(cfg["dataset.ood_cov"])),
    )


def _phantom_spec(cfg: dict, seed: int) -> PhantomSpec:
    return PhantomSpec(
        dims=cfg["dataset.dims"],
        class_means=cfg["dataset.class_means"],
        n_ellipsoids=cfg["dataset.n_ellipsoids"],
        size_range=cfg["dataset.size_range"],
        seed=seed,
    )


def _enhance_config(cfg: dict) -> EnhanceConfig:
    return EnhanceConfig(
        lam=cfg["enhance.lambda"],
        overlap_p=cfg["enhance.overlap"],
        tol=cfg["enhance.tol"],
        max_iter=cfg["enhance.max_iter"],
    )


def _derive_scale(high: Volume3D, low: Volume3D, label: str) -> tuple[int, int, int]:
    scale = []
    for h, l in zip(high.dims, low.dims):
        if h % l:
            raise DataError(f"{label}: high dims {high.dims} not a multiple of low dims {low.dims}")
        scale.append(h // l)
    return tuple(scale)


def cmd_simulate(args, cfg: dict) -> int:
    """Synthesize aligned phantom pairs for one regime and write a manifest."""
    dims, scale = cfg["dataset.dims"], cfg["dataset.scale"]
    if any(d % s for d, s in zip(dims, scale)):
        raise ConfigError(f"dataset.dims {dims} must be divisible by dataset.scale {scale}")
    seed = cfg["seed"]
    params = DegradationParams(scale=scale, blur_sigma=cfg["dataset.blur_sigma"], noise_seed=seed)
    triples = build_dataset(
        cfg["dataset.count"],
        cfg["dataset.regime"],
        _snr_dists(cfg),
        _phantom_spec(cfg, seed),
        params,
    )
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for v, (high, low, snr) in enumerate(triples):
        hq_name, lq_name = f"hq_{v:03d}.iqv", f"lq_{v:03d}.iqv"
        save_volume(high, os.path.join(args.out, hq_name))
        save_volume(low, os.path.join(args.out, lq_name))
        entries.append(
            ManifestEntry(
                hq_name, lq_name, cfg["dataset.regime"],
                snr[0], snr[1], substream(seed, "phantom", v),
            )
        )
    write_manifest(os.path.join(args.out, "manifest.tsv"), entries)
    print(f"wrote {len(entries)} {cfg['dataset.regime']} pairs to {args.out}")
    return 0


def cmd_train(args, cfg: dict) -> int:
    """Learn a coupled dictionary from the pairs listed in a manifest."""
    entries = read_manifest(args.manifest)
    if not entries:
        raise DataError(f"{args.manifest}: manifest lists no pairs")
    base = os.path.dirname(os.path.abspath(args.manifest))
    pairs = []
    scale = None
    for e in entries:
        high = load_volume(os.path.join(base, e.high_path))
        low = load_volume(os.path.join(base, e.low_path))
        pair_scale = _derive_scale(high, low, e.high_path)
        if scale is None:
            scale = pair_scale
        elif pair_scale != scale:
            raise DataError(f"{e.high_path}: scale {pair_scale} differs from {scale}")
        pairs.append((high, low))

    spec = PatchSpec(
        cfg["training.patch"],
        cfg["training.overlap"],
        cfg["training.background_threshold"],
        cfg["training.background_fraction"],
    )
    feats, resids, _, _ = harvest_training_pairs(
        pairs, spec, scale, cfg["training.max_patches"], cfg["seed"]
    )
    if feats.shape[0] < cfg["training.atoms"]:
        raise DataError(
            f"{feats.shape[0]} usable patches after background exclusion, "
            f"need at least training.atoms = {cfg['training.atoms']}"
        )
    cdict = train_coupled(
        (feats, resids),
        k_atoms=cfg["training.atoms"],
        ksvd_iters=cfg["training.iterations"],
        sparsity_t=cfg["training.sparsity"],
        geometry=PatchGeometry(cfg["training.patch"], cfg["training.overlap"], scale),
        pca_min_variance=cfg["training.pca_variance"],
        seed=cfg["seed"],
    )
    os.makedirs(args.out, exist_ok=True)
    dict_path = os.path.join(args.out, "dictionary.iqd")
    save_dictionary(cdict, dict_path)
    with open(os.path.join(args.out, "training_log.txt"), "w", encoding="utf-8") as fh:
        fh.write("iteration\tobjective\n")
        for i, obj in enumerate(cdict.ksvd_objectives, 1):
            fh.write(f"{i}\t{obj:.10g}\n")
    print(
        f"trained {cdict.n_atoms} atoms on {feats.shape[0]} patches "
        f"(pca {cdict.pca.raw_dim} -> {cdict.pca.reduced_dim}); wrote {dict_path}"
    )
    return 0


def cmd_enhance(args, cfg: dict) -> int:
    """Enhance one low-quality volume with a trained dictionary."""
    print(f"enhance.lambda = {cfg['enhance.lambda']:g}")
    cdict = load_dictionary(args.dict)
    low = load_volume(args.volume)
    out_vol, report = enhance_with_report(low, cdict, _enhance_config(cfg))
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.volume))[0]
    out_path = os.path.join(args.out, f"{stem}_enhanced.iqv")
    save_volume(out_vol, out_path)
    with open(os.path.join(args.out, f"{stem}_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    print(f"wrote {out_path} ({report.patch_count} patches, mean L0 {report.mean_l0:.2f})")
    fraction = report.solver_warnings / max(report.patch_count, 1)
    if fraction > cfg["enhance.max_warning_fraction"]:
        print(
            f"solver warnings on {fraction:.1%} of patches exceed "
            f"enhance.max_warning_fraction = {cfg['enhance.max_warning_fraction']}",
            file=sys.stderr,
        )
        return 4
    return 0


def cmd_evaluate(args, cfg: dict) -> int:
    """Score configured methods against ground truth over a manifest."""
    cdict = load_dictionary(args.dict) if args.dict else None
    report = evaluate_run(
        args.manifest,
        cfg["eval.methods"],
        args.out,
        dictionary=cdict,
        enhance_cfg=_enhance_config(cfg),
    )
    print(report.to_table(), end="")
    return 0


def cmd_phantom(args, cfg: dict) -> int:
    """Write one seeded phantom volume plus its tissue masks."""
    spec = _phantom_spec(cfg, substream(cfg["seed"], "phantom"))
    vol, gm, wm = make_phantom(spec)
    os.makedirs(args.out, exist_ok=True)
    save_volume(vol, os.path.join(args.out, "phantom.iqv"))
    save_volume(Volume3D(gm.astype("float32")), os.path.join(args.out, "gm_mask.iqv"))
    save_volume(Volume3D(wm.astype("float32")), os.path.join(args.out, "wm_mask.iqv"))
    print(f"wrote phantom.iqv, gm_mask.iqv, wm_mask.iqv to {args.out}")
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iqt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", metavar="PATH", help="config file of section.key = value lines")
        p.add_argument("--seed", type=int, metavar="N", help="root random seed")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")

    p = sub.add_parser("simulate", help="synthesize aligned phantom pairs plus a manifest")
    common(p)
    p.add_argument("--regime", choices=REGIMES, help="SNR regime of the set")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="learn a coupled dictionary from a dataset manifest")
    common(p)
    p.add_argument("manifest", help="dataset manifest path")
    p.add_argument("--atoms", type=int, metavar="K", help="dictionary size")
    p.add_argument("--patch", type=int, metavar="M", help="patch edge length")
    p.add_argument("--overlap", type=int, metavar="P", help="training patch overlap")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one volume with a trained dictionary")
    common(p)
    p.add_argument("volume", help="low-quality IQV volume")
    p.add_argument("--dict", required=True, metavar="PATH", help="trained IQD dictionary")
    p.add_argument("--lambda", dest="lam", type=float, metavar="F", help="sparsity penalty")
    p.add_argument("--overlap", type=int, metavar="P", help="patch overlap at test time")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="score methods listed in eval.methods over a manifest")
    common(p)
    p.add_argument("manifest", help="dataset manifest path")
    p.add_argument("--dict", metavar="PATH", help="dictionary for computing srep estimates")
    p.add_argument("--lambda", dest="lam", type=float, metavar="F", help="sparsity penalty")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("phantom", help="write one phantom volume and tissue masks")
    common(p)
    p.set_defaults(func=cmd_phantom)
    return parser


def _apply_overrides(cfg: dict, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "regime", None) is not None:
        cfg["dataset.regime"] = args.regime
    if getattr(args, "lam", None) is not None:
        if args.lam <= 0:
            raise ConfigError(f"--lambda must be positive, got {args.lam}")
        cfg["enhance.lambda"] = args.lam
    if getattr(args, "atoms", None) is not None:
        cfg["training.atoms"] = args.atoms
    if getattr(args, "patch", None) is not None:
        cfg["training.patch"] = args.patch
    if getattr(args, "overlap", None) is not None:
        if args.command == "train":
            cfg["training.overlap"] = args.overlap
        else:
            cfg["enhance.overlap"] = args.overlap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        return args.func(args, cfg)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, CorruptionError, GeometryError, SamplingError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
