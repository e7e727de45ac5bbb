"""Central finite-difference verification of autograd gradients.

Runs in 64-bit precision. For every parameter block a random subsample of
entries is perturbed by +/- step and the numeric slope is compared against
the autograd gradient.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import torch

from .config import TrainConfig
from .dataset import RaySampler, SceneDataset
from .field import SceneField
from .render import RayBatch
from .train import batch_losses

LOSS_TERMS = ("l_rgb", "l_sky", "l_ground", "l_total")
# rounding budget of one loss evaluation, in units of eps * |loss|
ROUNDOFF_ULPS = 4.0


@dataclass
class BlockReport:
    name: str
    output: str
    max_rel_error: float
    num_checked: int
    flagged: bool = False  # degenerate configuration, excluded from pass/fail


@dataclass
class GradReport:
    blocks: list[BlockReport] = dc_field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        vals = [b.max_rel_error for b in self.blocks if not b.flagged]
        return max(vals) if vals else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def table(self) -> str:
        lines = [f"{'output':<10} {'block':<20} {'checked':>8} {'max rel err':>12}"]
        for b in self.blocks:
            tag = "  (flagged: degenerate)" if b.flagged else ""
            lines.append(f"{b.output:<10} {b.name:<20} {b.num_checked:>8} {b.max_rel_error:>12.3e}{tag}")
        return "\n".join(lines)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor) -> torch.Tensor:
    """|a - n| / max(|a|, |n|, floor).

    The floor (scalar or per entry) keeps entries whose true gradient is tiny
    from being judged on round-off alone.
    """
    floor = torch.as_tensor(floor, dtype=analytic.dtype).expand_as(analytic)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), floor)
    return (analytic - numeric).abs() / denom


def _pick(grad: torch.Tensor, count: int, generator: torch.Generator) -> torch.Tensor:
    """Flat indices to check: half among nonzero-gradient entries, half uniform."""
    n = grad.numel()
    if n <= count:
        return torch.arange(n)
    nz = torch.nonzero(grad.reshape(-1))[:, 0]
    k = min(len(nz), count // 2)
    chosen = nz[torch.randperm(len(nz), generator=generator)[:k]]
    rest = torch.randperm(n, generator=generator)[: count - k]
    return torch.unique(torch.cat([chosen, rest]))


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    blocks: dict[str, list[torch.Tensor]],
    step: float = 1e-5,
    samples: int = 200,
    outputs: tuple[str, ...] | None = None,
    flagged: dict[str, bool] | None = None,
    rel_floor: float = 1e-3,
    seed: int = 0,
    tolerance: float = 1e-4,
) -> GradReport:
    """Compare autograd gradients against central differences.

    Args:
        loss_fn: deterministic closure returning a scalar or a 1-D tensor of
            losses; each entry is checked separately.
        blocks: named groups of float64 leaf tensors with ``requires_grad``.
        step: central-difference step.
        samples: entries checked per block (all entries if the block is smaller).
        outputs: names of the loss entries, for the report.
        flagged: per-output flag marking a degenerate configuration.
        rel_floor: denominator floor as a fraction of the block's largest
            analytic gradient magnitude.

    A central difference cannot resolve slopes below roughly
    ``eps * |loss| / step``: the two evaluations are each rounded to a few
    ulps. Each entry's denominator is therefore also floored at that
    resolution divided by ``tolerance``, so an entry fails only when its
    discrepancy exceeds both ``tolerance * |grad|`` and the rounding bound.
    """
    params = [p for ps in blocks.values() for p in ps]
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("finite_diff_check runs in 64-bit mode; convert parameters to float64")
    gen = torch.Generator().manual_seed(seed)
    value = loss_fn().reshape(-1)
    names = outputs or tuple(f"out{i}" for i in range(value.numel()))
    flagged = flagged or {}

    analytic = []
    for i in range(value.numel()):
        gs = torch.autograd.grad(value[i], params, retain_graph=i + 1 < value.numel(), allow_unused=True)
        analytic.append([torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)])

    report = GradReport(tolerance=tolerance)
    pos = 0
    for bname, ps in blocks.items():
        span = range(pos, pos + len(ps))
        pos += len(ps)
        sizes = [p.numel() for p in ps]
        flat_grads = [torch.cat([analytic[o][j].reshape(-1) for j in span]) for o in range(value.numel())]
        # pick entries once per block, using the gradient of the last output
        # (the total loss in the usual ordering) to find the active entries
        idx = _pick(flat_grads[-1] if sum(sizes) else torch.zeros(0), samples, gen)
        numeric = torch.zeros(value.numel(), len(idx), dtype=torch.float64)
        scale = torch.zeros(value.numel(), len(idx), dtype=torch.float64)
        offsets = torch.tensor([0] + sizes).cumsum(0)
        with torch.no_grad():
            for c, flat in enumerate(idx.tolist()):
                j = int(torch.searchsorted(offsets, flat, right=True)) - 1
                p, local = ps[j], flat - int(offsets[j])
                view = p.view(-1)
                orig = view[local].item()
                view[local] = orig + step
                up = loss_fn().reshape(-1)
                view[local] = orig - step
                down = loss_fn().reshape(-1)
                view[local] = orig
                numeric[:, c] = (up - down) / (2 * step)
                scale[:, c] = torch.maximum(torch.maximum(up.abs(), down.abs()), value.detach().abs())
        for o in range(value.numel()):
            a = flat_grads[o][idx]
            floor = max(rel_floor * float(flat_grads[o].abs().max()) if flat_grads[o].numel() else 0.0, 1e-10)
            resolution = ROUNDOFF_ULPS * torch.finfo(torch.float64).eps * scale[o] / (2 * step)
            err = relative_error(a, numeric[o], torch.clamp(resolution / tolerance, min=floor))
            worst = float(err.max()) if len(err) else 0.0
            if math.isnan(worst):
                worst = math.inf
            report.blocks.append(BlockReport(bname, names[o], worst, len(idx), flagged.get(names[o], False)))
    return report


def field_gradient_check(
    field: SceneField,
    dataset: SceneDataset,
    config: TrainConfig,
    rays_per_batch: int = 4,
    patch_rays: int = 4,
    num_samples: int = 8,
    samples: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    perturb_decoder: float = 0.05,
) -> GradReport:
    """Check every loss term against every parameter block on a micro-batch.

    A float64 copy of ``field`` is used. The micro-batch holds
    ``rays_per_batch`` random rays plus one square ground patch of about
    ``patch_rays`` rays. A freshly initialized appearance decoder is exactly
    zero, which makes the latent gradient vanish identically; it is
    perturbed by ``perturb_decoder`` so that pathway is exercised too.
    """
    f64 = copy.deepcopy(field).double()
    gen = torch.Generator().manual_seed(seed)
    if perturb_decoder:
        with torch.no_grad():
            dec = f64.appearance_decoder
            if not dec.weight.any():
                dec.weight.add_(torch.randn(dec.weight.shape, generator=gen, dtype=torch.float64) * perturb_decoder)
                dec.bias.add_(torch.randn(dec.bias.shape, generator=gen, dtype=torch.float64) * perturb_decoder)

    side = max(int(math.isqrt(patch_rays)), 2)
    sampler = RaySampler(dataset, list(range(len(dataset))), config.near_min, patch_size=side,
                         patch_ground_fraction=1.0)
    rays, gt = sampler.sample(rays_per_batch, gen)
    sizes: list[int] = []
    patches = sampler.sample_patches(1, gen) if patch_rays >= 3 else []
    if patches:
        pr, pg = patches[0]
        rays = RayBatch.cat([rays, pr])
        gt = torch.cat([gt, pg])
        sizes = [len(pr)]
    rays = rays.to(torch.float64)
    gt = gt.double()
    cfg = copy.copy(config)
    cfg.num_samples = num_samples

    def loss_fn():
        res = batch_losses(f64, rays, gt, sizes, cfg, stratified=False)
        bd = res.breakdown
        return torch.stack([bd.l_rgb, bd.l_sky, bd.l_ground.to(bd.l_rgb.dtype), bd.l_total])

    res = batch_losses(f64, rays, gt, sizes, cfg, stratified=False)
    degenerate = any(f.degenerate for f in res.plane_fits)
    flags = {"l_ground": degenerate, "l_total": degenerate and cfg.lambda_ground > 0}
    blocks = {name: [p for _, p in ps] for name, ps in f64.blocks().items()}
    return finite_diff_check(loss_fn, blocks, step=step, samples=samples, outputs=LOSS_TERMS,
                             flagged=flags, seed=seed)
