"""Dictionary-generating upsampling network.

A tree-structured generator grows N = 2^d atoms out of one seeded noise
vector (depth d = log2(N), Tanh range); a grouped convolution encodes the
atoms into a per-atom code; a three-level encoder-decoder over the input
volume, concatenated with that code, feeds ten bottleneck residual blocks
whose softmax head emits one coefficient map over atoms per voxel.  The
output volume is the nearest-neighbor-upscaled coefficient maps multiplied
against grid-tiled atoms and summed, with a complementary half-voxel map
fused in by a zero-initialized convolution to compensate patch boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


class ParameterError(ValueError):
    """A configuration value violates its contract."""


class ShapeError(ValueError):
    """Tensor shapes disagree with the declared geometry."""


@dataclass(frozen=True)
class DdlConfig:
    """Network and training settings; depth is tied to the atom count."""

    n_atoms: int = 16
    scale: tuple[int, int, int] = (1, 1, 4)
    features: int = 8
    gen_channels: int = 16
    block_width: int = 0  # 0: pick from the atom count
    batch_size: int = 2
    steps: int = 500
    lr_generator: float = 5e-3
    lr_main: float = 2e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    shuffle_steps: int = -1  # -1: proportional milestone, steps // 400
    seed: int = 0

    def __post_init__(self) -> None:
        n = self.n_atoms
        if n < 2 or n & (n - 1):
            raise ParameterError(f"n_atoms must be a power of two >= 2, got {n}")
        object.__setattr__(self, "scale", tuple(int(s) for s in self.scale))
        if len(self.scale) != 3 or any(s < 1 for s in self.scale):
            raise ParameterError(f"scale must be three factors >= 1, got {self.scale}")
        for name in ("features", "gen_channels", "batch_size", "steps"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.block_width == 0:
            object.__setattr__(self, "block_width", max(4, self.n_atoms // 2))

    @property
    def depth(self) -> int:
        """Generator depth d with N = 2^d exactly."""
        return self.n_atoms.bit_length() - 1

    @property
    def shuffle_until(self) -> int:
        if self.shuffle_steps >= 0:
            return self.shuffle_steps
        return max(1, self.steps // 400)


class AtomGenerator(nn.Module):
    """Grow 2^depth atoms from one noise vector by branching twice per level."""

    def __init__(self, cfg: DdlConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.gen_channels
        self.register_buffer("noise", torch.randn(1, c))
        self.levels = nn.ModuleList(nn.Linear(c, 2 * c) for _ in range(cfg.depth))
        self.head = nn.Linear(c, cfg.scale[0] * cfg.scale[1] * cfg.scale[2])

    def forward(self) -> torch.Tensor:
        h = self.noise
        for level in self.levels:
            h = F.relu(level(h).reshape(h.shape[0] * 2, -1))
        return torch.tanh(self.head(h)).view(self.cfg.n_atoms, *self.cfg.scale)


class AtomEncoder(nn.Module):
    """Per-atom code: grouped full-extent convolution, ReLU, 1x1x1 mix."""

    def __init__(self, cfg: DdlConfig):
        super().__init__()
        n = cfg.n_atoms
        self.grouped = nn.Conv3d(n, n, kernel_size=cfg.scale, groups=n)
        self.mix = nn.Conv3d(n, n, kernel_size=1)

    def forward(self, atoms: torch.Tensor) -> torch.Tensor:
        h = self.grouped(atoms.unsqueeze(0))
        return self.mix(F.relu(h)).view(-1, 1, 1, 1)


def _conv_bn(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, kernel_size=3, padding=1),
        nn.BatchNorm3d(c_out),
        nn.ReLU(inplace=True),
    )


class FeatureExtractor(nn.Module):
    """Three-level encoder-decoder with skip connections, full-resolution out."""

    def __init__(self, cfg: DdlConfig):
        super().__init__()
        f = cfg.features
        self.enc1 = _conv_bn(1, f)
        self.enc2 = _conv_bn(f, 2 * f)
        self.enc3 = _conv_bn(2 * f, 4 * f)
        self.dec2 = _conv_bn(4 * f + 2 * f, 2 * f)
        self.dec1 = _conv_bn(2 * f + f, f)
        self.pool = nn.MaxPool3d(2, ceil_mode=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[2:]), e2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[2:]), e1], dim=1))
        return d1 + e1  # long skip from the first encoder level


class BottleneckBlock(nn.Module):
    def __init__(self, channels: int, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(channels, width, kernel_size=1),
            nn.BatchNorm3d(width),
            nn.ReLU(inplace=True),
            nn.Conv3d(width, width, kernel_size=3, padding=1),
            nn.BatchNorm3d(width),
            nn.ReLU(inplace=True),
            nn.Conv3d(width, channels, kernel_size=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


def generate_dictionary(noise_seed: int, cfg: DdlConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Freshly seeded atoms (N, s_i, s_j, s_k) in [-1, 1] plus their code (N, 1, 1, 1)."""
    torch.manual_seed(noise_seed)
    generator = AtomGenerator(cfg)
    encoder = AtomEncoder(cfg)
    with torch.no_grad():
        atoms = generator()
        code = encoder(atoms)
    return atoms, code


def reconstruct(coeff: torch.Tensor, atoms: torch.Tensor,
                scale: tuple[int, int, int]) -> torch.Tensor:
    """Upscale-multiply-sum: out[a] = sum_n U(M)[n, a] * tiled(D)[n, a].

    `coeff` is (N, i, j, k) or batched (B, N, i, j, k); coefficient maps are
    nearest-neighbor upscaled by `scale`, atoms are tiled across the output
    grid, and the product is summed over atoms.  Output (s_i*i, s_j*j, s_k*k)
    per item.
    """
    squeeze = coeff.dim() == 4
    if squeeze:
        coeff = coeff.unsqueeze(0)
    if coeff.dim() != 5 or atoms.dim() != 4 or coeff.shape[1] != atoms.shape[0]:
        raise ShapeError(f"incompatible shapes {tuple(coeff.shape)} vs {tuple(atoms.shape)}")
    if tuple(atoms.shape[1:]) != tuple(scale):
        raise ShapeError(f"atoms {tuple(atoms.shape[1:])} do not match scale {scale}")
    up = coeff
    for axis, s in enumerate(scale, start=2):
        up = up.repeat_interleave(s, dim=axis)
    tiled = atoms.repeat(1, *coeff.shape[2:])
    out = (up * tiled).sum(dim=1)
    return out[0] if squeeze else out


class DdlModel(nn.Module):
    """End-to-end volume upsampler with a generated dictionary."""

    def __init__(self, cfg: DdlConfig):
        super().__init__()
        self.cfg = cfg
        self.generator = AtomGenerator(cfg)
        self.encoder = AtomEncoder(cfg)
        self.features = FeatureExtractor(cfg)
        channels = cfg.features + cfg.n_atoms
        self.blocks = nn.Sequential(
            *(BottleneckBlock(channels, cfg.block_width) for _ in range(10)))
        self.head = nn.Conv3d(channels, cfg.n_atoms, kernel_size=1)
        self.comp_head = nn.Conv3d(channels, cfg.n_atoms, kernel_size=2)
        self.fusion = nn.Conv3d(2, 1, kernel_size=5, padding=2)
        nn.init.zeros_(self.fusion.weight)
        nn.init.zeros_(self.fusion.bias)

    def predict(self, volume: torch.Tensor,
                atoms: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Coefficient maps (M, M') for a (B, 1, i, j, k) input batch.

        M is softmax-normalized per voxel with shape (B, N, i, j, k); the
        complementary map is one voxel smaller per axis.
        """
        if volume.dim() != 5 or volume.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, i, j, k) input, got {tuple(volume.shape)}")
        if min(volume.shape[2:]) < 2:
            raise ShapeError(f"input dims {tuple(volume.shape[2:])} below receptive minimum 2")
        if atoms is None:
            atoms = self.generator()
        code = self.encoder(atoms)
        feats = self.features(volume)
        b, _, i, j, k = feats.shape
        rep = code.view(1, -1, 1, 1, 1).expand(b, -1, i, j, k)
        h = self.blocks(torch.cat([feats, rep], dim=1))
        coeff = torch.softmax(self.head(h), dim=1)
        comp = torch.softmax(self.comp_head(h), dim=1)
        sums = coeff.sum(dim=1)
        if not torch.allclose(sums, torch.ones_like(sums), atol=1e-5):
            raise AssertionError("coefficient maps must sum to one per voxel")
        return coeff, comp

    def compose_final(self, x: torch.Tensor, x_comp: torch.Tensor) -> torch.Tensor:
        """Fuse the complementary estimate into the overlap, borders from x."""
        s = self.cfg.scale
        want = tuple(x.shape[axis + 2] - s[axis] for axis in range(3))
        if tuple(x_comp.shape[2:]) != want:
            raise ShapeError(
                f"complementary dims {tuple(x_comp.shape[2:])}, expected {want}")
        off = [f // 2 for f in s]
        region = (slice(None), slice(None)) + tuple(
            slice(off[a], off[a] + x_comp.shape[a + 2]) for a in range(3))
        inner = x[region]
        fused = inner + self.fusion(torch.cat([inner, x_comp], dim=1))
        out = x.clone()
        out[region] = fused
        return out

    def forward(self, volume: torch.Tensor,
                atoms: torch.Tensor | None = None,
                atom_order: torch.Tensor | None = None) -> torch.Tensor:
        """Enhanced batch (B, 1, s_i*i, s_j*j, s_k*k) for a (B, 1, i, j, k) input."""
        if atoms is None:
            atoms = self.generator()
        if atom_order is not None:
            atoms = atoms[atom_order]
        coeff, comp = self.predict(volume, atoms)
        x = reconstruct(coeff, atoms, self.cfg.scale).unsqueeze(1)
        x_comp = reconstruct(comp, atoms, self.cfg.scale).unsqueeze(1)
        return self.compose_final(x, x_comp)

    def loss(self, low: torch.Tensor, high: torch.Tensor,
             atoms: torch.Tensor | None = None,
             atom_order: torch.Tensor | None = None) -> torch.Tensor:
        """Mean absolute error of the enhanced batch against ground truth."""
        out = self.forward(low, atoms=atoms, atom_order=atom_order)
        if out.shape != high.shape:
            raise ShapeError(f"output {tuple(out.shape)} vs target {tuple(high.shape)}")
        return (out - high).abs().mean()

    def parameter_groups(self) -> tuple[list, list]:
        """(generator parameters, everything else) for the two optimizers."""
        gen = list(self.generator.parameters())
        gen_ids = {id(p) for p in gen}
        rest = [p for p in self.parameters() if id(p) not in gen_ids]
        return gen, rest
