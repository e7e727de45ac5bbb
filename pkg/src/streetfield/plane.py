"""Least-squares plane fitting of rendered ground points.

The smallest singular value of the centered point matrix A is obtained
through the 3x3 Gram matrix A^T A with a closed-form symmetric eigen
solver, so the cost is linear in the number of points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .render import RayBatch

# relative threshold below which an eigenvalue is treated as repeated
_REPEATED_TOL = 1e-10
DEGENERATE_GAP = 1e-6


def _trig_eigvals(g: np.ndarray) -> np.ndarray:
    """Closed-form (trigonometric) eigenvalues of a symmetric 3x3 matrix, ascending."""
    p1 = g[0, 1] ** 2 + g[0, 2] ** 2 + g[1, 2] ** 2
    if p1 == 0.0:
        return np.sort(np.diag(g).copy())
    q = np.trace(g) / 3.0
    p2 = (g[0, 0] - q) ** 2 + (g[1, 1] - q) ** 2 + (g[2, 2] - q) ** 2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    b = (g - q * np.eye(3)) / p
    r = np.linalg.det(b) / 2.0
    phi = math.acos(min(1.0, max(-1.0, r))) / 3.0
    hi = q + 2.0 * p * math.cos(phi)
    lo = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    mid = 3.0 * q - hi - lo
    return np.array([lo, mid, hi])


def _sym2_eigvals(a: float, b: float, d: float) -> tuple[float, float]:
    """Eigenvalues of [[a, b], [b, d]] without cancellation in the smaller one."""
    m = 0.5 * (a + d)
    r = math.hypot(0.5 * (a - d), b)
    big = m + r if m >= 0 else m - r
    det = a * d - b * b
    small = det / big if big != 0.0 else 0.0
    return tuple(sorted((small, big)))


def sym3_eigvals(g: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric 3x3 matrix, ascending.

    The trigonometric formula loses about half the digits of a nearly repeated
    pair, so it only seeds the computation: the most isolated root (which it
    gets accurately) yields a well-conditioned eigenvector, the root is
    refined by its Rayleigh quotient and the remaining pair comes from the
    deflated 2x2 block.
    """
    g = np.asarray(g, dtype=np.float64)
    g = 0.5 * (g + g.T)
    lam = _trig_eigvals(g)
    scale = max(abs(lam[0]), abs(lam[2]))
    if scale == 0.0 or lam[2] - lam[0] <= 1e-14 * scale:
        return lam
    iso = 0 if (lam[1] - lam[0]) > (lam[2] - lam[1]) else 2
    v = _null_vector(g - lam[iso] * np.eye(3), scale)
    if v is None:
        return lam
    u1 = _orthogonal_to(v)
    u2 = np.cross(v, u1)
    pair = _sym2_eigvals(u1 @ g @ u1, u1 @ g @ u2, u2 @ g @ u2)
    return np.sort(np.array([float(v @ g @ v), *pair]))


def _null_vector(m: np.ndarray, scale: float) -> np.ndarray | None:
    """Unit vector spanning the null space of a rank-2 symmetric matrix, via row cross products."""
    rows = m
    cands = [np.cross(rows[0], rows[1]), np.cross(rows[0], rows[2]), np.cross(rows[1], rows[2])]
    norms = [float(c @ c) for c in cands]
    best = int(np.argmax(norms))
    if norms[best] <= (_REPEATED_TOL * scale * scale) ** 2:
        return None
    return cands[best] / math.sqrt(norms[best])


def _orthogonal_to(v: np.ndarray) -> np.ndarray:
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(v)))] = 1.0
    u = np.cross(v, axis)
    return u / np.linalg.norm(u)


def sym3_min_eigvec(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix.

    Returns:
        (eigenvalues ascending, unit eigenvector, determinate). ``determinate``
        is False when the smallest eigenvalue is repeated and the returned
        vector is an arbitrary (but fixed) member of its eigenspace.
    """
    lam = sym3_eigvals(g)
    scale = max(abs(lam[0]), abs(lam[2]), 1e-300)
    v = _null_vector(g - lam[0] * np.eye(3), scale)
    if v is not None:
        return lam, v, True
    # smallest eigenvalue repeated: anything orthogonal to the top eigenvector
    top = _null_vector(g - lam[2] * np.eye(3), scale)
    if top is None:
        return lam, np.array([0.0, 0.0, 1.0]), False
    return lam, _orthogonal_to(top), False


def canonical_sign(n: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip ``n`` so that its last non-negligible component is positive."""
    for c in n[::-1]:
        if abs(c) > tol:
            return n if c > 0 else -n
    return n


@dataclass
class PlaneFit:
    barycenter: np.ndarray
    normal: np.ndarray
    sigma3: float
    sigma2: float
    determinate: bool = True

    @property
    def degenerate(self) -> bool:
        """True when the gradient of sigma3 is not well defined."""
        return (not self.determinate) or (self.sigma2 - self.sigma3) < DEGENERATE_GAP


@dataclass
class PlanePatch:
    rays: RayBatch
    depths: torch.Tensor  # (N,)
    points: torch.Tensor  # (N, 3)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


def unproject_patch(rays: RayBatch, depths: torch.Tensor) -> PlanePatch:
    """p_r = o_r + z_r d_r for every ground ray of a patch."""
    if len(rays) != depths.shape[0]:
        raise ValueError(f"{len(rays)} rays but {depths.shape[0]} depths")
    if len(rays) < 3:
        raise ValueError(f"a plane patch needs at least 3 points, got {len(rays)}")
    if not bool(rays.ground.all()):
        raise ValueError("plane patch contains rays without the ground mask bit")
    if (depths <= 0).any():
        raise ValueError("depths must be positive")
    points = rays.origins + depths[:, None] * rays.directions
    return PlanePatch(rays=rays, depths=depths, points=points)


def smallest_singular_value(points: torch.Tensor) -> tuple[torch.Tensor, PlaneFit]:
    """Differentiable sigma3 of the centered point matrix.

    sigma3 = ||A v|| with v the eigenvector for the smallest eigenvalue of
    A^T A, held constant. Since v is stationary for the Rayleigh quotient,
    autograd through the norm yields d sigma3 / dA = u3 v3^T.
    """
    if points.shape[0] < 3:
        raise ValueError("need at least 3 points")
    center = points.mean(dim=0)
    a = points - center
    gram = (a.T @ a).detach().to(torch.float64).cpu().numpy()
    lam, v, determinate = sym3_min_eigvec(gram)
    v_t = torch.as_tensor(v, dtype=points.dtype, device=points.device)
    # vector_norm backpropagates a zero subgradient for exactly coplanar points
    sigma3 = torch.linalg.vector_norm(a @ v_t)
    sigma2 = math.sqrt(max(lam[1], 0.0))
    fit = PlaneFit(
        barycenter=center.detach().to(torch.float64).cpu().numpy(),
        normal=canonical_sign(v),
        sigma3=float(sigma3.detach()),
        sigma2=sigma2,
        determinate=determinate,
    )
    return sigma3, fit


def fit_plane(patch_or_points) -> PlaneFit:
    """Barycenter, canonical normal and smallest singular value of a point set."""
    pts = patch_or_points.points if isinstance(patch_or_points, PlanePatch) else patch_or_points
    pts = torch.as_tensor(np.asarray(pts) if not torch.is_tensor(pts) else pts, dtype=torch.float64)
    with torch.no_grad():
        _, fit = smallest_singular_value(pts)
    return fit


def ground_loss(patches: list[PlanePatch]) -> tuple[torch.Tensor, list[PlaneFit]]:
    """Mean sigma3 over patches, plus the per-patch fits for diagnostics."""
    if not patches:
        raise ValueError("ground_loss needs at least one patch")
    values, fits = [], []
    for patch in patches:
        s3, fit = smallest_singular_value(patch.points)
        values.append(s3)
        fits.append(fit)
    return torch.stack(values).mean(), fits
