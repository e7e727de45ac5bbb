"""Training losses: transient-masked RGB, sky decay, ground plane and their sum."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import torch

DEFAULT_LAMBDA_SKY = 1e-4
DEFAULT_LAMBDA_GROUND = 1e-4


@dataclass
class LossBreakdown:
    l_rgb: torch.Tensor
    l_sky: torch.Tensor
    l_ground: torch.Tensor
    l_total: torch.Tensor
    lambda_sky: float
    lambda_ground: float

    def as_floats(self) -> dict[str, float]:
        return {
            k: float(getattr(self, k).detach()) for k in ("l_rgb", "l_sky", "l_ground", "l_total")
        }


def rgb_loss(pred: torch.Tensor, gt: torch.Tensor, transient: torch.Tensor) -> torch.Tensor:
    """Mean over rays of (1 - M_t) * ||pred - gt||^2.

    Transient rays are selected out rather than multiplied by zero, so they
    get exactly zero gradient even when their prediction is non-finite.
    """
    if pred.shape != gt.shape or pred.shape[0] != transient.shape[0]:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, "
            f"mask {tuple(transient.shape)}"
        )
    keep = ~transient.bool()[:, None]
    # mask the residual, not the square: the backward of where() routes an
    # exact zero to the dropped branch, which the square would turn into 0 * inf
    diff = torch.where(keep, pred - gt, torch.zeros_like(pred))
    return (diff**2).sum() / pred.shape[0]


def sky_decay_loss(
    weights: torch.Tensor, sky: torch.Tensor, transient: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean over rays of M_s * sum w^2 - (1 - M_s) * sum w^2.

    The first term suppresses density along sky rays, the second rewards
    concentrated opacity along everything else. Transient rays are dropped.
    """
    if weights.shape[0] != sky.shape[0]:
        raise ValueError("weights and sky mask disagree on ray count")
    if (weights < 0).any():
        raise ValueError("weights must be nonnegative")
    sq = (weights**2).sum(dim=-1)
    sign = torch.where(sky.bool(), 1.0, -1.0).to(sq.dtype)
    per_ray = sign * sq
    if transient is not None:
        per_ray = torch.where(transient.bool(), torch.zeros_like(per_ray), per_ray)
    return per_ray.sum() / weights.shape[0]


def total_loss(
    l_rgb: torch.Tensor,
    l_sky: torch.Tensor,
    l_ground: torch.Tensor,
    lambda_sky: float = DEFAULT_LAMBDA_SKY,
    lambda_ground: float = DEFAULT_LAMBDA_GROUND,
) -> LossBreakdown:
    if lambda_sky < 0 or lambda_ground < 0:
        raise ValueError("loss weights must be nonnegative")
    l_total = l_rgb
    # zero weights leave l_total bitwise equal to l_rgb
    if lambda_sky:
        l_total = l_total + lambda_sky * l_sky
    if lambda_ground:
        l_total = l_total + lambda_ground * l_ground
    return LossBreakdown(l_rgb, l_sky, l_ground, l_total, lambda_sky, lambda_ground)


METRIC_FIELDS = ("iteration", "l_rgb", "l_sky", "l_ground", "l_total", "lr")


class MetricsLog:
    """Comma-separated per-iteration loss log."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._writer.writerow(METRIC_FIELDS)

    def write(self, iteration: int, breakdown: LossBreakdown, lr: float):
        vals = breakdown.as_floats()
        self._writer.writerow(
            [iteration] + [repr(vals[k]) for k in METRIC_FIELDS[1:-1]] + [repr(float(lr))]
        )

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
