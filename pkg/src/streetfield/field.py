"""Hash-grid radiance field with a direction-only sky head and per-image
affine appearance compensation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

HASH_PRIMES = (1, 2654435761, 805459861)

# Checkpoint block names, in serialization order.
BLOCK_NAMES = (
    "hash",
    "mlp_density",
    "mlp_color",
    "mlp_sky",
    "appearance_latents",
    "appearance_decoder",
)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    table_size: int = 2**16
    features_per_level: int = 2
    resolution_min: int = 16
    resolution_max: int = 512

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be >= 1")
        if not 1 <= self.resolution_min <= self.resolution_max:
            raise ValueError("need 1 <= resolution_min <= resolution_max")
        res = self.resolutions
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError(f"per-level resolutions not strictly increasing: {res}")

    @property
    def growth_factor(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.resolution_max) - math.log(self.resolution_min)) / (self.levels - 1)
        )

    @property
    def resolutions(self) -> list[int]:
        b = self.growth_factor
        # round() guards against exp/log landing just under an integer
        return [int(math.floor(round(self.resolution_min * b**l, 9))) for l in range(self.levels)]

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


@dataclass(frozen=True)
class FieldConfig:
    grid: HashGridConfig = HashGridConfig()
    ipe_levels: int = 6
    dir_levels: int = 4
    hidden: int = 64
    bottleneck: int = 15
    sky_hidden: int = 64
    sky_layers: int = 3
    latent_dim: int = 16
    num_images: int = 1
    use_appearance: bool = True
    # a negative raw-density bias starts the volume nearly empty instead of
    # as a uniform fog of density softplus(0)
    density_bias: float = -6.0


class FieldSample(NamedTuple):
    density: torch.Tensor  # (..., )
    rgb: torch.Tensor  # (..., 3)


class AffineColorMap(NamedTuple):
    matrix: torch.Tensor  # (..., 3, 3)
    shift: torch.Tensor  # (..., 3)


def spatial_hash(coords: torch.Tensor, table_size: int) -> torch.Tensor:
    """XOR-fold of per-axis prime products, modulo ``table_size``.

    Args:
        coords: integer grid coordinates of shape (..., 3).
        table_size: power of two.
    """
    h = coords[..., 0] * HASH_PRIMES[0]
    h = h ^ (coords[..., 1] * HASH_PRIMES[1])
    h = h ^ (coords[..., 2] * HASH_PRIMES[2])
    return h & (table_size - 1)


class _WeightedGather(torch.autograd.Function):
    """out[l, n] = sum_c w[c, l, n] * table[idx[c, l, n]], differentiable in ``table`` only.

    The backward is a per-feature bincount scatter, which is much faster than
    the stock index backward on CPU and deterministic.
    """

    @staticmethod
    def forward(ctx, table, idx, w):
        ctx.save_for_backward(idx, w)
        ctx.rows = table.shape[0]
        vals = table.index_select(0, idx.reshape(-1)).reshape(*idx.shape, table.shape[1])
        return (vals * w[..., None]).sum(dim=0)

    @staticmethod
    def backward(ctx, grad):
        idx, w = ctx.saved_tensors
        flat = idx.reshape(-1).long()
        cols = [
            torch.bincount(flat, weights=(grad[None, ..., f] * w).reshape(-1), minlength=ctx.rows)
            for f in range(grad.shape[-1])
        ]
        return torch.stack(cols, dim=-1).to(grad.dtype), None, None


def hash_encode(
    x: torch.Tensor, tables: torch.Tensor, cfg: HashGridConfig, return_clamped: bool = False
):
    """Multiresolution hash encoding of points in the unit cube.

    Args:
        x: (N, 3) points, normalized to [0, 1]^3. Points outside are clamped.
        tables: (L, T, F) feature tables.
        cfg: grid configuration matching ``tables``.
        return_clamped: also return a (N,) bool mask of points that were clamped.

    Returns:
        (N, L*F) features, level-major.
    """
    if not torch.isfinite(x).all():
        raise ValueError("hash_encode received non-finite coordinates")
    clamped = ((x < 0) | (x > 1)).any(dim=-1)
    n = x.shape[0]
    levels, size, nf = tables.shape
    res = torch.tensor(cfg.resolutions, dtype=x.dtype, device=x.device)
    # axis-major (3, L, N) layout keeps every elementwise op contiguous
    pos = x.clamp(0.0, 1.0).T.contiguous()[:, None, :] * res[None, :, None]
    base = torch.floor(pos)
    frac = pos - base
    lo = base.long()
    mask = size - 1
    # the hash is separable and (a ^ b) & m == (a & m) ^ (b & m) for m = 2^k - 1,
    # so each axis is hashed at {lo, lo + 1} and masked before XOR-folding
    h = [[(((lo[a] + k) * HASH_PRIMES[a]) & mask).int() for k in (0, 1)] for a in range(3)]
    wa = [[1.0 - frac[a], frac[a]] for a in range(3)]
    offset = (torch.arange(levels, device=x.device, dtype=torch.int32) * size)[:, None]
    idx, w = [], []
    for i in (0, 1):
        for j in (0, 1):
            hij = h[0][i] ^ h[1][j]
            wij = wa[0][i] * wa[1][j]
            for k in (0, 1):
                idx.append((hij ^ h[2][k]) + offset)
                w.append(wij * wa[2][k])
    out = _WeightedGather.apply(tables.reshape(-1, nf), torch.stack(idx), torch.stack(w))  # (L, N, F)
    out = out.permute(1, 0, 2).reshape(n, levels * nf)
    if return_clamped:
        return out, clamped
    return out


def ipe_encode(mean: torch.Tensor, variance, levels: int) -> torch.Tensor:
    """Integrated positional encoding of an isotropic Gaussian.

    Frequencies are 2^l for l in [0, levels). Layout is all sines
    (level-major, axis-minor) followed by all cosines.

    Args:
        mean: (..., 3) Gaussian means.
        variance: scalar or (...,) isotropic variances, nonnegative.
        levels: number of frequency levels.

    Returns:
        (..., 6 * levels) encoding.
    """
    variance = torch.as_tensor(variance, dtype=mean.dtype, device=mean.device)
    if (variance < 0).any():
        raise ValueError("IPE variance must be nonnegative")
    scales = 2.0 ** torch.arange(levels, dtype=mean.dtype, device=mean.device)
    scaled = (mean[..., None, :] * scales[:, None]).flatten(-2)  # (..., 3L)
    atten = torch.exp(-0.5 * variance[..., None] * scales**2)  # (..., L)
    atten = atten.repeat_interleave(3, dim=-1)
    return torch.cat([torch.sin(scaled) * atten, torch.cos(scaled) * atten], dim=-1)


def direction_encode(d: torch.Tensor, levels: int) -> torch.Tensor:
    scales = 2.0 ** torch.arange(levels, dtype=d.dtype, device=d.device)
    scaled = (d[..., None, :] * scales[:, None]).flatten(-2)
    return torch.cat([d, torch.sin(scaled), torch.cos(scaled)], dim=-1)


def _check_unit(d: torch.Tensor, tol: float = 1e-6):
    err = (torch.linalg.vector_norm(d, dim=-1) - 1.0).abs()
    if err.numel() and err.max() > tol:
        raise ValueError(f"view directions must be unit-norm (max deviation {err.max().item():.3g})")


def apply_appearance(c: torch.Tensor, cmap: AffineColorMap, clamp: bool = False) -> torch.Tensor:
    """c' = T c + b, optionally clamped to [0, 1] for pixel emission."""
    out = (cmap.matrix @ c[..., None])[..., 0] + cmap.shift
    return out.clamp(0.0, 1.0) if clamp else out


def identity_map(n: int = 1, dtype=torch.float32, device=None) -> AffineColorMap:
    eye = torch.eye(3, dtype=dtype, device=device).expand(n, 3, 3)
    return AffineColorMap(eye, torch.zeros(n, 3, dtype=dtype, device=device))


class DensityMLP(nn.Module):
    """Two hidden layers; hash features are re-injected into the second layer."""

    def __init__(self, hash_dim: int, ipe_dim: int, hidden: int, bottleneck: int, density_bias: float = 0.0):
        super().__init__()
        self.layer1 = nn.Linear(hash_dim + ipe_dim, hidden)
        self.layer2 = nn.Linear(hidden + hash_dim, hidden)
        self.head = nn.Linear(hidden, 1 + bottleneck)
        with torch.no_grad():
            self.head.bias[0] = density_bias

    def forward(self, f_hash, gamma):
        h = F.relu(self.layer1(torch.cat([f_hash, gamma], dim=-1)))
        h = F.relu(self.layer2(torch.cat([h, f_hash], dim=-1)))
        return self.head(h)


def _mlp(in_dim: int, hidden: int, layers: int, out_dim: int) -> nn.Sequential:
    mods: list[nn.Module] = []
    for i in range(layers):
        mods += [nn.Linear(in_dim if i == 0 else hidden, hidden), nn.ReLU()]
    mods.append(nn.Linear(hidden, out_dim))
    return nn.Sequential(*mods)


class SceneField(nn.Module):
    """All trainable state: hash tables, MLPs, sky head and appearance model.

    The top-level attribute names are the checkpoint block names.
    """

    def __init__(self, cfg: FieldConfig, scene_box, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        box = torch.as_tensor(scene_box, dtype=torch.float32).reshape(2, 3)
        if not (box[1] > box[0]).all():
            raise ValueError("scene box must have positive extent on every axis")
        self.register_buffer("scene_box", box)

        gen = torch.Generator().manual_seed(seed)
        g = cfg.grid
        dir_dim = 3 + 6 * cfg.dir_levels
        self.hash = nn.Parameter(
            (torch.rand(g.levels, g.table_size, g.features_per_level, generator=gen) * 2 - 1) * 1e-4
        )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.mlp_density = DensityMLP(
                g.output_dim, 6 * cfg.ipe_levels, cfg.hidden, cfg.bottleneck, cfg.density_bias
            )
            self.mlp_color = _mlp(cfg.bottleneck + dir_dim, cfg.hidden, 2, 3)
            self.mlp_sky = _mlp(dir_dim, cfg.sky_hidden, cfg.sky_layers, 3)
        # latents start random so the zero-initialized decoder receives gradient
        self.appearance_latents = nn.Parameter(
            torch.randn(cfg.num_images, cfg.latent_dim, generator=gen) * 0.1
        )
        self.appearance_decoder = nn.Linear(cfg.latent_dim, 12)
        nn.init.zeros_(self.appearance_decoder.weight)
        nn.init.zeros_(self.appearance_decoder.bias)

    # -- helpers -----------------------------------------------------------
    @property
    def extent(self) -> torch.Tensor:
        return self.scene_box[1] - self.scene_box[0]

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.scene_box[0]) / self.extent

    def blocks(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Parameters grouped by checkpoint block, in a fixed order."""
        out: dict[str, list] = {name: [] for name in BLOCK_NAMES}
        for name, p in self.named_parameters():
            out[name.split(".")[0]].append((name, p))
        return out

    # -- evaluation --------------------------------------------------------
    def forward(self, x: torch.Tensor, d: torch.Tensor, variance) -> FieldSample:
        """Evaluate density and radiance.

        Args:
            x: (N, 3) world-space points.
            d: (N, 3) unit view directions.
            variance: (N,) or scalar world-space isotropic sample variance.
        """
        _check_unit(d)
        xn = self.normalize(x)
        f_hash = hash_encode(xn, self.hash, self.cfg.grid)
        # IPE works in [-1, 1] coordinates scaled by the largest box extent
        scale = 2.0 / self.extent.max()
        variance = torch.as_tensor(variance, dtype=x.dtype, device=x.device)
        gamma = ipe_encode(xn * 2 - 1, variance * scale**2, self.cfg.ipe_levels)
        raw = self.mlp_density(f_hash, gamma)
        density = F.softplus(raw[..., 0])
        h = torch.cat([raw[..., 1:], direction_encode(d, self.cfg.dir_levels)], dim=-1)
        rgb = torch.sigmoid(self.mlp_color(h))
        return FieldSample(density, rgb)

    def sky(self, d: torch.Tensor) -> torch.Tensor:
        _check_unit(d)
        return torch.sigmoid(self.mlp_sky(direction_encode(d, self.cfg.dir_levels)))

    def decode_appearance(self, latents: torch.Tensor) -> AffineColorMap:
        out = self.appearance_decoder(latents)
        eye = torch.eye(3, dtype=out.dtype, device=out.device)
        return AffineColorMap(eye + out[..., :9].unflatten(-1, (3, 3)), out[..., 9:])

    def appearance_for(self, image_index: torch.Tensor | None, n: int) -> AffineColorMap:
        """Per-ray affine maps; identity when appearance is disabled or no index is given."""
        dtype = self.hash.dtype
        if image_index is None or not self.cfg.use_appearance:
            return identity_map(n, dtype=dtype, device=self.hash.device)
        return self.decode_appearance(self.appearance_latents[image_index])


def eval_field(x, d, sample_variance, field: SceneField) -> FieldSample:
    return field(x, d, sample_variance)


def eval_sky(d, field: SceneField) -> torch.Tensor:
    return field.sky(d)


def decode_appearance(latent, field: SceneField) -> AffineColorMap:
    return field.decode_appearance(latent)
