"""Training loop: batch sampling, losses, Adam with cosine schedule, checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .dataset import RaySampler, SceneDataset, holdout_split
from .evaluate import evaluate_view, mean_psnr
from .field import SceneField
from .losses import LossBreakdown, MetricsLog, rgb_loss, sky_decay_loss, total_loss
from .optim import AdamState, adam_step, cosine_lr
from .plane import PlaneFit, ground_loss, unproject_patch
from .render import RayBatch, RenderOutput, render_rays

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class BatchResult:
    breakdown: LossBreakdown
    render: RenderOutput
    plane_fits: list[PlaneFit]


def batch_losses(
    field: SceneField,
    rays: RayBatch,
    gt: torch.Tensor,
    patch_sizes: list[int],
    config: TrainConfig,
    generator: torch.Generator | None = None,
    stratified: bool = True,
) -> BatchResult:
    """Render a batch and compute every loss term.

    The last ``sum(patch_sizes)`` rays of the batch are the ground patches, in
    order; their depths come from the same forward pass as the RGB loss.
    """
    out = render_rays(field, rays, config.num_samples, generator, stratified)
    if config.use_transient_mask:
        transient = rays.transient
    else:
        transient = torch.zeros_like(rays.transient)
    l_rgb = rgb_loss(out.color, gt, transient)
    l_sky = sky_decay_loss(out.weights, rays.sky, transient)
    fits: list[PlaneFit] = []
    l_ground = torch.zeros((), dtype=l_rgb.dtype)
    if patch_sizes:
        start = len(rays) - sum(patch_sizes)
        patches = []
        for n in patch_sizes:
            sl = slice(start, start + n)
            patches.append(unproject_patch(rays[sl], out.depth[sl]))
            start += n
        l_ground, fits = ground_loss(patches)
    bd = total_loss(l_rgb, l_sky, l_ground, config.lambda_sky, config.lambda_ground)
    return BatchResult(bd, out, fits)


def sample_training_batch(sampler: RaySampler, config: TrainConfig, generator):
    rays, gt = sampler.sample(config.batch_size, generator)
    sizes: list[int] = []
    if config.lambda_ground > 0 and config.num_patches > 0:
        parts = [(r, g) for r, g in sampler.sample_patches(config.num_patches, generator) if len(r) >= 3]
        if parts:
            rays = RayBatch.cat([rays] + [r for r, _ in parts])
            gt = torch.cat([gt] + [g for _, g in parts])
            sizes = [len(r) for r, _ in parts]
    return rays, gt, sizes


@dataclass
class TrainResult:
    field: SceneField
    adam: AdamState
    iteration: int
    history: list[dict] = dc_field(default_factory=list)
    val_history: list[dict] = dc_field(default_factory=list)


def validate(field: SceneField, dataset: SceneDataset, indices: list[int], config: TrainConfig):
    k = config.eval_samples or config.num_samples
    return [
        evaluate_view(field, dataset, i, k, probe_pixels=config.probe_pixels,
                      probe_steps=config.probe_steps, probe_lr=config.probe_lr, seed=config.seed)
        for i in indices
    ]


def train(
    dataset: SceneDataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Optimize a scene field on the training split of ``dataset``.

    Args:
        out_dir: if given, receives ``metrics.csv`` and ``checkpoint.sgnf``.
        resume: checkpoint to continue from; its config replaces ``config``.
        stop_at: stop after this iteration count (schedule still spans max_iters).
    """
    train_idx, val_idx = holdout_split(len(dataset), config.holdout_every)
    generator = torch.Generator().manual_seed(config.seed)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        config, field, start = ckpt.config, ckpt.field, ckpt.iteration
        adam = ckpt.adam or AdamState.zeros_like(dict(field.named_parameters()))
        if ckpt.rng_state is not None:
            generator.set_state(ckpt.rng_state)
    else:
        field = SceneField(config.field_config(len(dataset)), dataset.scene_box, seed=config.seed)
        adam = AdamState.zeros_like(dict(field.named_parameters()))
        start = 0
    end = config.max_iters if stop_at is None else min(stop_at, config.max_iters)
    sampler = RaySampler(dataset, train_idx, config.near_min, config.patch_size,
                         config.patch_ground_fraction)
    params = dict(field.named_parameters())

    metrics = None
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = MetricsLog(out_dir / "metrics.csv", append=resume is not None)
        ckpt_path = out_dir / "checkpoint.sgnf"
        if resume is None:
            save_checkpoint(ckpt_path, field, config, adam, start, generator)

    result = TrainResult(field, adam, start)
    do_val = config.val_interval > 0 and bool(val_idx)

    def run_val(it):
        views = validate(field, dataset, val_idx, config)
        row = {"iteration": it, "psnr": mean_psnr(views)}
        result.val_history.append(row)
        log.info("iter %d: validation PSNR %.2f dB", it, row["psnr"])

    try:
        if do_val and start == 0:
            run_val(0)
        for it in range(start, end):
            lr = cosine_lr(it, config.max_iters, config.lr_init, config.lr_final)
            rays, gt, sizes = sample_training_batch(sampler, config, generator)
            res = batch_losses(field, rays, gt, sizes, config, generator)
            bd = res.breakdown
            if not torch.isfinite(bd.l_total):
                raise TrainingDiverged(f"non-finite loss at iteration {it}")
            for p in params.values():
                p.grad = None
            bd.l_total.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, adam, lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
            row = {"iteration": it, **bd.as_floats(), "lr": lr}
            result.history.append(row)
            if metrics is not None:
                metrics.write(it, bd, lr)
            done = it + 1
            result.iteration = done
            if ckpt_path is not None and config.checkpoint_interval > 0 and done % config.checkpoint_interval == 0:
                save_checkpoint(ckpt_path, field, config, adam, done, generator)
            if do_val and (done % config.val_interval == 0 or done == end):
                run_val(done)
    finally:
        if metrics is not None:
            metrics.close()
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, field, config, adam, result.iteration, generator)
    for p in params.values():
        p.grad = None
    return result
