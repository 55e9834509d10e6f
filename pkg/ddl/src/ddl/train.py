"""Training loop: paired volumes in, checkpoint plus loss curve out.

Two Adam optimizers run side by side (the atom generator takes a higher
learning rate than the rest of the network), the loss is plain mean
absolute error, and for the first few steps the atom order is shuffled
every forward pass so no coefficient channel can latch onto one atom
before the dictionary settles.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .io import IoError, PairEntry, load_volume, read_manifest
from .model import DdlConfig, DdlModel, ShapeError


@dataclass(frozen=True)
class TrainResult:
    steps: int
    losses: list[float]
    checkpoint_path: str
    log_path: str

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def load_pairs(manifest_path, root=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """All (low, high) volumes named by a manifest, as float32 arrays."""
    entries = read_manifest(manifest_path)
    if not entries:
        raise IoError(f"empty manifest: {manifest_path}")
    base = os.path.dirname(os.fspath(manifest_path)) if root is None else os.fspath(root)
    pairs = []
    for entry in entries:
        low, _ = load_volume(os.path.join(base, entry.low_path))
        high, _ = load_volume(os.path.join(base, entry.high_path))
        pairs.append((low, high))
    return pairs


def _check_geometry(pairs, cfg: DdlConfig) -> None:
    low0, high0 = pairs[0]
    want_high = tuple(d * s for d, s in zip(low0.shape, cfg.scale))
    for idx, (low, high) in enumerate(pairs):
        if low.shape != low0.shape or high.shape != want_high:
            raise ShapeError(
                f"pair {idx}: low {low.shape} high {high.shape}, "
                f"expected low {low0.shape} high {want_high}")


def save_checkpoint(model: DdlModel, path) -> None:
    """Serialize config and weights; the write is atomic via rename."""
    payload = {"config": asdict(model.cfg), "state_dict": model.state_dict()}
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            torch.save(payload, handle)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> DdlModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise IoError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "config" not in payload or "state_dict" not in payload:
        raise IoError(f"checkpoint {path} is missing config or weights")
    cfg = payload["config"]
    cfg["scale"] = tuple(cfg["scale"])
    cfg["adam_betas"] = tuple(cfg["adam_betas"])
    model = DdlModel(DdlConfig(**cfg))
    model.load_state_dict(payload["state_dict"])
    return model


def train(pairs, cfg: DdlConfig, out_dir, log_every: int = 10) -> TrainResult:
    """Fit a model to (low, high) array pairs and write checkpoint plus log."""
    _check_geometry(pairs, cfg)
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = DdlModel(cfg)
    model.train()

    gen_params, main_params = model.parameter_groups()
    opt_gen = torch.optim.Adam(gen_params, lr=cfg.lr_generator,
                               betas=cfg.adam_betas, eps=cfg.adam_eps)
    opt_main = torch.optim.Adam(main_params, lr=cfg.lr_main,
                                betas=cfg.adam_betas, eps=cfg.adam_eps)

    lows = torch.stack([torch.from_numpy(lo).unsqueeze(0) for lo, _ in pairs])
    highs = torch.stack([torch.from_numpy(hi).unsqueeze(0) for _, hi in pairs])
    rng = np.random.default_rng(cfg.seed)
    perm_gen = torch.Generator().manual_seed(cfg.seed)

    losses: list[float] = []
    log_path = os.path.join(out_dir, "loss_log.txt")
    ckpt_path = os.path.join(out_dir, "checkpoint.pt")
    with open(log_path, "w", encoding="ascii") as log:
        log.write("step\tloss\n")
        for step in range(cfg.steps):
            batch = rng.integers(0, len(pairs), size=min(cfg.batch_size, len(pairs)))
            idx = torch.from_numpy(batch)
            order = None
            if step < cfg.shuffle_until:
                order = torch.randperm(cfg.n_atoms, generator=perm_gen)
            loss = model.loss(lows[idx], highs[idx], atom_order=order)
            opt_gen.zero_grad()
            opt_main.zero_grad()
            loss.backward()
            opt_gen.step()
            opt_main.step()
            losses.append(float(loss.detach()))
            log.write(f"{step}\t{losses[-1]:.8f}\n")
            if (step + 1) % log_every == 0 or step + 1 == cfg.steps:
                log.flush()
                save_checkpoint(model, ckpt_path)
    save_checkpoint(model, ckpt_path)
    return TrainResult(cfg.steps, losses, ckpt_path, log_path)


def enhance_volume(model: DdlModel, low: np.ndarray) -> np.ndarray:
    """Upscaled estimate for one volume, deterministic at inference."""
    model.eval()
    with torch.no_grad():
        batch = torch.from_numpy(np.ascontiguousarray(low, dtype=np.float32))
        out = model(batch.unsqueeze(0).unsqueeze(0))
    return out[0, 0].numpy().astype(np.float32)
