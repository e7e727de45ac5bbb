"""Procedural street scene with exact masks, depth and appearance jitter.

A ground slab at z=0 with a checker texture, a few textured boxes as
buildings, an analytic sky gradient and an optional transient box that moves
between frames. Cameras sit on an arc and look into the scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Camera, MaskSet, SceneDataset, rotmat_to_qvec

SCENE_BOX = np.array([[-5.0, -5.0, -0.5], [5.0, 5.0, 3.0]])

GROUND, TRANSIENT, BUILDING, SKY = 0, 1, 2, 3

_PALETTE = np.array(
    [
        [0.70, 0.45, 0.30],
        [0.30, 0.50, 0.65],
        [0.65, 0.62, 0.35],
        [0.40, 0.62, 0.42],
        [0.60, 0.38, 0.55],
    ]
)


@dataclass(frozen=True)
class SyntheticConfig:
    width: int = 64
    height: int = 64
    num_views: int = 12
    jitter: float = 0.0
    transient: bool = True
    ground_contrast: float = 0.15
    fov_deg: float = 60.0
    arc_radius: float = 3.2
    arc_span_deg: float = 120.0
    camera_height: float = 1.3


def sky_color(d: np.ndarray) -> np.ndarray:
    """Smooth analytic sky: horizon haze blending into a blue zenith."""
    d = np.asarray(d, dtype=np.float64)
    u = 0.5 * (1.0 + np.tanh(3.0 * d[..., 2]))[..., None]
    horizon = np.array([0.88, 0.86, 0.80])
    zenith = np.array([0.30, 0.50, 0.85])
    c = horizon * (1 - u) + zenith * u
    return c + 0.05 * d[..., :1] * np.array([1.0, 0.6, -0.4])


def _box_hit(o, d, lo, hi):
    """Slab test; returns (t, face axis) with t = inf on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(np.abs(d) < 1e-12, 1e-12, d)
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    t_in = tmin.max(axis=-1)
    t_out = tmax.min(axis=-1)
    hit = (t_out >= t_in) & (t_in > 1e-6)
    return np.where(hit, t_in, np.inf), tmin.argmax(axis=-1)


def _building_color(base, p, axis, lo, hi):
    shade = np.array([0.85, 0.72, 1.0])[axis][:, None]
    # windows on the vertical faces
    u = np.where(axis == 0, p[:, 1] - lo[1], p[:, 0] - lo[0])
    v = p[:, 2]
    win = (np.abs((u * 3.0) % 1.0 - 0.5) < 0.2) & (np.abs((v * 3.0) % 1.0 - 0.5) < 0.2) & (axis != 2)
    col = base[None, :] * shade
    return np.where(win[:, None], 0.25 + 0.35 * col, col)


class _Scene:
    def __init__(self, cfg: SyntheticConfig, rng: np.random.Generator):
        self.cfg = cfg
        n = int(rng.integers(2, 5))
        boxes = []
        while len(boxes) < n:
            half = rng.uniform([0.4, 0.4], [0.9, 0.9])
            ctr = rng.uniform([-3.0, -2.5], [-0.3 - half[0], 2.5])
            height = rng.uniform(0.8, 2.2)
            lo = np.array([ctr[0] - half[0], ctr[1] - half[1], 0.0])
            hi = np.array([ctr[0] + half[0], ctr[1] + half[1], height])
            if all(np.any(lo[:2] > b[1][:2] + 0.2) or np.any(hi[:2] < b[0][:2] - 0.2) for b in boxes):
                boxes.append((lo, hi))
        self.buildings = boxes
        self.colors = _PALETTE[rng.permutation(len(_PALETTE))[:n]]
        self.checker_phase = rng.uniform(0, 0.5, size=2)

    def transient_box(self, frame: int):
        n = max(self.cfg.num_views - 1, 1)
        y = -1.5 + 3.0 * frame / n
        ctr = np.array([1.2, y])
        half = np.array([0.35, 0.25])
        return np.array([*(ctr - half), 0.0]), np.array([*(ctr + half), 0.5])

    def trace(self, o, d, frame: int):
        """First-hit label, distance and color of every ray."""
        n = o.shape[0]
        t_best = np.full(n, np.inf)
        label = np.full(n, SKY)
        color = sky_color(d)

        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(d[:, 2] < -1e-9, -o[:, 2] / d[:, 2], np.inf)
        pg = o + np.where(np.isfinite(tg), tg, 0.0)[:, None] * d
        inside = (np.abs(pg[:, 0]) <= SCENE_BOX[1, 0]) & (np.abs(pg[:, 1]) <= SCENE_BOX[1, 1])
        tg = np.where(inside, tg, np.inf)
        sel = tg < t_best
        t_best[sel], label[sel] = tg[sel], GROUND
        checker = (np.floor((pg[:, 0] + self.checker_phase[0]) / 0.5)
                   + np.floor((pg[:, 1] + self.checker_phase[1]) / 0.5)) % 2
        ground_col = np.array([0.45, 0.42, 0.38])[None, :] + self.cfg.ground_contrast * (checker[:, None] - 0.5)
        color[sel] = ground_col[sel]

        for (lo, hi), base in zip(self.buildings, self.colors):
            tb, axis = _box_hit(o, d, lo, hi)
            sel = tb < t_best
            t_best[sel], label[sel] = tb[sel], BUILDING
            p = o + np.where(np.isfinite(tb), tb, 0.0)[:, None] * d
            color[sel] = _building_color(base, p, axis, lo, hi)[sel]

        if self.cfg.transient:
            lo, hi = self.transient_box(frame)
            tt, axis = _box_hit(o, d, lo, hi)
            sel = tt < t_best
            t_best[sel], label[sel] = tt[sel], TRANSIENT
            shade = np.array([0.85, 0.75, 1.0])[axis][:, None]
            color[sel] = (np.array([0.85, 0.20, 0.15])[None, :] * shade)[sel]
        return label, t_best, color


def _look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation for a camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _jitter(rng, amplitude):
    t = np.eye(3)
    noise = rng.uniform(-0.25, 0.25, size=(3, 3))
    noise[np.diag_indices(3)] = rng.uniform(-1.0, 1.0, size=3)
    b = rng.uniform(-0.25, 0.25, size=3)
    return t + amplitude * noise, amplitude * b


def generate_synthetic_scene(cfg: SyntheticConfig = SyntheticConfig(), seed: int = 0) -> SceneDataset:
    if cfg.width < 8 or cfg.height < 8:
        raise ValueError(f"resolution must be at least 8x8, got {cfg.width}x{cfg.height}")
    if cfg.num_views < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(seed)
    scene = _Scene(cfg, rng)
    focal = 0.5 * cfg.height / np.tan(np.radians(cfg.fov_deg) / 2)
    target = np.array([-0.5, 0.0, 0.6])
    span = np.radians(cfg.arc_span_deg)

    cameras, images, masks, depths, app = [], [], [], [], []
    for i in range(cfg.num_views):
        phi = -span / 2 + span * (i / max(cfg.num_views - 1, 1))
        eye = np.array([cfg.arc_radius * np.cos(phi), cfg.arc_radius * np.sin(phi), cfg.camera_height])
        r = _look_at(eye, target)
        cam = Camera(
            cfg.width, cfg.height, focal, focal, cfg.width / 2, cfg.height / 2,
            rotmat_to_qvec(r), -r @ eye, name=f"frame_{i:03d}.png", image_id=i + 1, camera_id=1,
        )
        # trace in float64 from the exact camera pose
        rows, cols = np.meshgrid(np.arange(cfg.height), np.arange(cfg.width), indexing="ij")
        d_cam = np.stack([(cols.ravel() + 0.5 - cam.cx) / cam.fx,
                          (rows.ravel() + 0.5 - cam.cy) / cam.fy,
                          np.ones(rows.size)], axis=-1)
        d = d_cam @ cam.rotation
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(cam.center, d.shape)
        label, t, color = scene.trace(o, d, i)

        tm, bm = _jitter(rng, cfg.jitter)
        fg = label != SKY
        color[fg] = color[fg] @ tm.T + bm
        shape = (cfg.height, cfg.width)
        cameras.append(cam)
        images.append(np.clip(color, 0, 1).reshape(*shape, 3).astype(np.float32))
        masks.append(MaskSet(
            transient=(label == TRANSIENT).reshape(shape),
            sky=(label == SKY).reshape(shape),
            ground=(label == GROUND).reshape(shape),
        ))
        depths.append(np.where(fg, t, 0.0).reshape(shape))
        app.append(np.concatenate([tm.ravel(), bm]))

    return SceneDataset(
        cameras, images, masks, SCENE_BOX.copy(), depths=depths, appearance_gt=np.array(app),
        meta={"seed": seed, "config": cfg},
    )
