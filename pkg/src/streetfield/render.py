"""Ray sampling, discrete volume rendering and sky/foreground compositing."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import torch

from .field import AffineColorMap, SceneField

OPACITY_EPS = 1e-8


@dataclass
class RayBatch:
    """A batch of rays. Mask bits are independent; a ray may carry several."""

    origins: torch.Tensor  # (N, 3)
    directions: torch.Tensor  # (N, 3), unit norm
    near: torch.Tensor  # (N,)
    far: torch.Tensor  # (N,)
    image_index: torch.Tensor  # (N,) long
    pixels: torch.Tensor  # (N, 2) long, (row, col)
    transient: torch.Tensor  # (N,) bool
    sky: torch.Tensor  # (N,) bool
    ground: torch.Tensor  # (N,) bool

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx) -> "RayBatch":
        return RayBatch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def to(self, dtype) -> "RayBatch":
        return replace(
            self,
            origins=self.origins.to(dtype),
            directions=self.directions.to(dtype),
            near=self.near.to(dtype),
            far=self.far.to(dtype),
        )

    @staticmethod
    def cat(batches: list["RayBatch"]) -> "RayBatch":
        return RayBatch(
            **{f.name: torch.cat([getattr(b, f.name) for b in batches]) for f in fields(RayBatch)}
        )


@dataclass
class SampleSet:
    t: torch.Tensor  # (N, K) sample positions, increasing
    deltas: torch.Tensor  # (N, K) interval widths
    variance: torch.Tensor  # (N, K) isotropic IPE variance


@dataclass
class RenderOutput:
    color: torch.Tensor  # (N, 3), pre-clamp
    depth: torch.Tensor  # (N,)
    opacity: torch.Tensor  # (N,)
    weights: torch.Tensor  # (N, K)
    t: torch.Tensor | None = None  # (N, K)


def sample_ray(near, far, num_samples: int, generator=None, stratified: bool = False) -> SampleSet:
    """Split [near, far] into ``num_samples`` equal intervals.

    Deterministic mode places one sample at each interval midpoint; stratified
    mode jitters each sample uniformly inside its own interval.
    """
    if num_samples < 1:
        raise ValueError("need at least one sample per ray")
    near = torch.as_tensor(near)
    far = torch.as_tensor(far, dtype=near.dtype)
    near, far = near.reshape(-1, 1), far.reshape(-1, 1)
    k = torch.arange(num_samples, dtype=near.dtype)
    width = (far - near) / num_samples
    if stratified:
        u = torch.rand(near.shape[0], num_samples, generator=generator, dtype=near.dtype)
    else:
        u = torch.full((near.shape[0], num_samples), 0.5, dtype=near.dtype)
    t = near + (k + u) * width
    deltas = width.expand(-1, num_samples)
    return SampleSet(t=t, deltas=deltas, variance=(0.5 * deltas) ** 2)


def transmittance(densities: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """T_k = exp(-sum_{j<k} sigma_j delta_j)."""
    tau = densities * deltas
    # shifted cumsum rather than cumsum - tau: the latter can round below the
    # previous partial sum and break monotonicity
    excl = torch.cat([torch.zeros_like(tau[..., :1]), torch.cumsum(tau, dim=-1)[..., :-1]], dim=-1)
    return torch.exp(-excl)


def compute_weights(densities: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """w_k = T_k (1 - exp(-sigma_k delta_k))."""
    if (densities < 0).any():
        raise ValueError("densities must be nonnegative")
    alpha = -torch.expm1(-densities * deltas)
    return transmittance(densities, deltas) * alpha


def composite(
    samples: SampleSet,
    densities: torch.Tensor,
    colors: torch.Tensor,
    sky_color: torch.Tensor,
    cmap: AffineColorMap,
    far: torch.Tensor,
) -> RenderOutput:
    """Blend the appearance-mapped foreground with the sky by the alpha map.

    C = sum_k w_k T c_k + alpha * b + (1 - alpha) * c_sky.
    """
    if densities.shape != samples.t.shape or colors.shape[:-1] != samples.t.shape:
        raise ValueError(
            f"sample count mismatch: t {tuple(samples.t.shape)}, "
            f"densities {tuple(densities.shape)}, colors {tuple(colors.shape)}"
        )
    w = compute_weights(densities, samples.deltas)
    opacity = w.sum(dim=-1)
    fg = (w[..., None] * colors).sum(dim=-2)
    fg = (cmap.matrix @ fg[..., None])[..., 0] + opacity[..., None] * cmap.shift
    color = fg + (1.0 - opacity)[..., None] * sky_color
    hit = opacity > OPACITY_EPS
    depth = torch.where(
        hit, (w * samples.t).sum(dim=-1) / opacity.clamp_min(OPACITY_EPS), far.reshape(opacity.shape)
    )
    return RenderOutput(color=color, depth=depth, opacity=opacity, weights=w, t=samples.t)


def render_rays(
    field: SceneField,
    rays: RayBatch,
    num_samples: int,
    generator=None,
    stratified: bool = False,
    use_image_appearance: bool = True,
    latents: torch.Tensor | None = None,
) -> RenderOutput:
    """Full pipeline for a ray batch.

    Args:
        latents: optional (N, B) per-ray latent override (used for probe fitting).
    """
    n = len(rays)
    samples = sample_ray(rays.near, rays.far, num_samples, generator, stratified)
    pts = rays.origins[:, None, :] + samples.t[..., None] * rays.directions[:, None, :]
    dirs = rays.directions[:, None, :].expand(-1, num_samples, -1)
    out = field(pts.reshape(-1, 3), dirs.reshape(-1, 3), samples.variance.reshape(-1))
    density = out.density.reshape(n, num_samples)
    rgb = out.rgb.reshape(n, num_samples, 3)
    sky = field.sky(rays.directions)
    if latents is not None and field.cfg.use_appearance:
        cmap = field.decode_appearance(latents)
    else:
        cmap = field.appearance_for(rays.image_index if use_image_appearance else None, n)
    return composite(samples, density, rgb, sky, cmap, rays.far)


@torch.no_grad()
def render_image(
    field: SceneField,
    camera,
    num_samples: int,
    image_index: int | None = None,
    chunk: int = 4096,
    generator=None,
    stratified: bool = False,
    near_min: float = 0.05,
):
    """Render a full image from a camera.

    Returns:
        (H, W, 3) clamped colors, (H, W) depth, (H, W) opacity.
    """
    from .dataset import camera_rays

    rays = camera_rays(camera, field.scene_box, image_index=image_index or 0, near_min=near_min)
    rays = rays.to(field.hash.dtype)
    colors, depths, opac = [], [], []
    for s in range(0, len(rays), chunk):
        out = render_rays(
            field,
            rays[s : s + chunk],
            num_samples,
            generator,
            stratified,
            use_image_appearance=image_index is not None,
        )
        colors.append(out.color.clamp(0, 1))
        depths.append(out.depth)
        opac.append(out.opacity)
    h, w = camera.height, camera.width
    return (
        torch.cat(colors).reshape(h, w, 3),
        torch.cat(depths).reshape(h, w),
        torch.cat(opac).reshape(h, w),
    )
