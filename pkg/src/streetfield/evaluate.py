"""Held-out evaluation: PSNR per region, probe-fitted appearance latents."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import RaySampler, SceneDataset
from .field import SceneField
from .optim import AdamState, adam_step
from .render import render_rays

REGIONS = ("all", "static", "sky", "ground")


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) over all channels; ``math.inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("PSNR mask selects no pixels")
        a, b = a[mask], b[mask]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class ViewResult:
    index: int
    color: np.ndarray  # (H, W, 3) clamped
    depth: np.ndarray  # (H, W)
    opacity: np.ndarray  # (H, W)
    psnr: dict[str, float]
    latent: torch.Tensor | None = None


@torch.no_grad()
def _render_all(field, rays, num_samples, latents=None, chunk=4096):
    outs = []
    for s in range(0, len(rays), chunk):
        lat = None if latents is None else latents.expand(len(rays[s : s + chunk]), -1)
        outs.append(render_rays(field, rays[s : s + chunk], num_samples, latents=lat))
    return (
        torch.cat([o.color for o in outs]),
        torch.cat([o.depth for o in outs]),
        torch.cat([o.opacity for o in outs]),
    )


def fit_probe_latent(
    field: SceneField,
    sampler: RaySampler,
    num_samples: int,
    pixels: int = 32,
    steps: int = 200,
    lr: float = 0.05,
    init: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Fit one appearance latent to a few pixels of a single view, field frozen.

    The foreground radiance, opacity and sky color of the probe rays are
    independent of the latent, so they are rendered once and only the affine
    map is re-evaluated per step.
    """
    flat = torch.nonzero(~sampler.flat_masks["transient"] & ~sampler.flat_masks["sky"])[:, 0]
    if len(flat) == 0:
        flat = torch.arange(sampler.total)
    pick = flat[torch.randperm(len(flat), generator=generator)[:pixels]]
    rays, gt = sampler.rays_for(pick)
    with torch.no_grad():
        # under the identity map, color = sum_k w_k c_k + (1 - alpha) sky
        out = render_rays(field, rays, num_samples, use_image_appearance=False)
        alpha = out.opacity[:, None]
        sky = field.sky(rays.directions)
        fg = out.color - (1 - alpha) * sky
    latent = (init if init is not None else field.appearance_latents.detach().mean(0)).clone()
    latent.requires_grad_(True)
    state = AdamState.zeros_like({"z": latent})
    for _ in range(steps):
        cmap = field.decode_appearance(latent)
        pred = (cmap.matrix @ fg[..., None])[..., 0] + alpha * cmap.shift + (1 - alpha) * sky
        loss = ((pred - gt) ** 2).sum(-1).mean()
        (g,) = torch.autograd.grad(loss, latent)
        adam_step({"z": latent}, {"z": g}, state, lr)
    return latent.detach()


def evaluate_view(
    field: SceneField,
    dataset: SceneDataset,
    index: int,
    num_samples: int,
    fit_latent: bool = True,
    probe_pixels: int = 32,
    probe_steps: int = 200,
    probe_lr: float = 0.05,
    seed: int = 0,
) -> ViewResult:
    sampler = RaySampler(dataset, [index], patch_size=1)
    latent = None
    if field.cfg.use_appearance:
        if fit_latent:
            gen = torch.Generator().manual_seed(seed + index)
            latent = fit_probe_latent(field, sampler, num_samples, probe_pixels, probe_steps, probe_lr,
                                      generator=gen)
        else:
            latent = field.appearance_latents.detach()[index]
    rays, _ = sampler.rays_for(torch.arange(sampler.total))
    color, depth, opacity = _render_all(field, rays, num_samples, latents=latent)
    cam = dataset.cameras[index]
    shape = (cam.height, cam.width)
    color = color.clamp(0, 1).reshape(*shape, 3).double().numpy()
    gt = dataset.images[index]
    m = dataset.masks[index]
    regions = {
        "all": np.ones(shape, dtype=bool),
        "static": ~m.transient,
        "sky": m.sky & ~m.transient,
        "ground": m.ground & ~m.transient,
    }
    scores = {k: (psnr(color, gt, r) if r.any() else math.nan) for k, r in regions.items()}
    return ViewResult(
        index, color, depth.reshape(shape).double().numpy(), opacity.reshape(shape).double().numpy(),
        scores, latent,
    )


def mean_psnr(results: list[ViewResult], region: str = "all") -> float:
    vals = [r.psnr[region] for r in results if not math.isnan(r.psnr[region])]
    return float(np.mean(vals)) if vals else math.nan
