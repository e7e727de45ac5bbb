"""Adam with bias correction and a cosine learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch

log = logging.getLogger(__name__)


def cosine_lr(t: int, total: int, lr0: float, lr1: float) -> float:
    """Cosine annealing from ``lr0`` at t=0 to ``lr1`` at t=total; clamps past the end."""
    if t >= total:
        return lr1
    t = max(t, 0)
    w = 0.5 * (1.0 + math.cos(math.pi * t / total))
    # convex blend, so both endpoints come out exact
    return w * lr0 + (1.0 - w) * lr1


@dataclass
class AdamState:
    """First/second moments keyed by parameter name, plus the step counter."""

    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """In-place bias-corrected Adam update.

    Parameters whose gradient is None are left untouched. A non-finite
    gradient anywhere skips the whole step and leaves the state unchanged.

    Returns:
        True if the step was applied.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            log.warning("non-finite gradient in %s; skipping Adam step %d", name, state.step + 1)
            return False
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m, v = state.m[name], state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return True
