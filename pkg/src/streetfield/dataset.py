"""Cameras, images and region masks; ray construction and batch sampling.

On-disk layout::

    sparse/0/cameras.txt, sparse/0/images.txt   SfM text export
    images/<name>                               8-bit RGB
    masks/<stem>.<kind>.png                     kind in {transient, sky, ground}
    depth/<stem>.png, depth/meta.txt            optional 16-bit depth (synthetic)
    appearance_gt.txt                           optional, 12 floats per image
    scene.txt                                   optional ``scene_box = x0 y0 z0 x1 y1 z1``
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .render import RayBatch

log = logging.getLogger(__name__)

MASK_KINDS = ("transient", "sky", "ground")
SUPPORTED_MODELS = ("PINHOLE", "SIMPLE_PINHOLE")
DEPTH_SCALE = 1000.0
QUAT_TOL = 1e-3


class SfmFormatError(ValueError):
    pass


def qvec_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; normalizes first."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
            [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
            [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
        ]
    )


def rotmat_to_qvec(r: np.ndarray) -> np.ndarray:
    """Unit (w, x, y, z) quaternion with w >= 0."""
    rxx, ryx, rzx, rxy, ryy, rzy, rxz, ryz, rzz = np.asarray(r, dtype=np.float64).flat
    k = (
        np.array(
            [
                [rxx - ryy - rzz, 0, 0, 0],
                [ryx + rxy, ryy - rxx - rzz, 0, 0],
                [rzx + rxz, rzy + ryz, rzz - rxx - ryy, 0],
                [ryz - rzy, rzx - rxz, rxy - ryx, rxx + ryy + rzz],
            ]
        )
        / 3.0
    )
    vals, vecs = np.linalg.eigh(k)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    return -q if q[0] < 0 else q


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose (camera looks down +z)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    qvec: np.ndarray
    tvec: np.ndarray
    name: str = ""
    model: str = "PINHOLE"
    image_id: int = 0
    camera_id: int = 0

    def __post_init__(self):
        self.qvec = np.asarray(self.qvec, dtype=np.float64)
        self.tvec = np.asarray(self.tvec, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if abs(np.linalg.norm(self.qvec) - 1.0) > QUAT_TOL:
            raise ValueError(f"quaternion is not unit norm: {self.qvec}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point lies outside the image")

    @property
    def rotation(self) -> np.ndarray:
        return qvec_to_rotmat(self.qvec)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.tvec

    @property
    def stem(self) -> str:
        return Path(self.name).stem

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) to (row, col) pixel coordinates (pixel centers are integers)."""
        p = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.tvec
        u = self.fx * p[:, 0] / p[:, 2] + self.cx
        v = self.fy * p[:, 1] / p[:, 2] + self.cy
        return np.stack([v - 0.5, u - 0.5], axis=-1)


def _floats(tokens, lineno, path):
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise SfmFormatError(f"{path}:{lineno}: {e}") from None


def parse_sfm_text(directory: str | Path) -> list[Camera]:
    """Read ``cameras.txt`` and ``images.txt`` into one Camera per image, sorted by image id."""
    directory = Path(directory)
    intrinsics = {}
    path = directory / "cameras.txt"
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) < 4:
            raise SfmFormatError(f"{path}:{lineno}: expected 'ID MODEL WIDTH HEIGHT PARAMS...'")
        model = tok[1]
        if model not in SUPPORTED_MODELS:
            raise SfmFormatError(f"{path}:{lineno}: unsupported camera model {model!r}")
        try:
            cam_id, width, height = int(tok[0]), int(tok[2]), int(tok[3])
        except ValueError as e:
            raise SfmFormatError(f"{path}:{lineno}: {e}") from None
        params = _floats(tok[4:], lineno, path)
        want = 4 if model == "PINHOLE" else 3
        if len(params) != want:
            raise SfmFormatError(f"{path}:{lineno}: {model} needs {want} parameters, got {len(params)}")
        if model == "SIMPLE_PINHOLE":
            f, cx, cy = params
            params = [f, f, cx, cy]
        intrinsics[cam_id] = (model, width, height, params)

    cameras = []
    path = directory / "images.txt"
    lines = path.read_text().splitlines()
    i = 0
    while i < len(lines):
        lineno, line = i + 1, lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) < 10:
            raise SfmFormatError(
                f"{path}:{lineno}: expected 'IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME'"
            )
        vals = _floats(tok[1:8], lineno, path)
        try:
            image_id, cam_id = int(tok[0]), int(tok[8])
        except ValueError as e:
            raise SfmFormatError(f"{path}:{lineno}: {e}") from None
        if cam_id not in intrinsics:
            raise SfmFormatError(f"{path}:{lineno}: unknown camera id {cam_id}")
        model, width, height, (fx, fy, cx, cy) = intrinsics[cam_id]
        try:
            cameras.append(
                Camera(width, height, fx, fy, cx, cy, vals[:4], vals[4:], name=" ".join(tok[9:]),
                       model=model, image_id=image_id, camera_id=cam_id)
            )
        except ValueError as e:
            raise SfmFormatError(f"{path}:{lineno}: {e}") from None
        i += 1  # 2D point observations
    cameras.sort(key=lambda c: c.image_id)
    return cameras


def write_sfm_text(directory: str | Path, cameras: list[Camera]):
    """Write cameras back in the text export format (no 2D points)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    intr = {}
    for cam in cameras:
        if cam.model == "SIMPLE_PINHOLE":
            params = (cam.fx, cam.cx, cam.cy)
        else:
            params = (cam.fx, cam.fy, cam.cx, cam.cy)
        intr.setdefault(cam.camera_id, (cam.model, cam.width, cam.height, params))
    with open(directory / "cameras.txt", "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cid, (model, w, h, params) in sorted(intr.items()):
            fh.write(" ".join([str(cid), model, str(w), str(h)] + [repr(float(p)) for p in params]) + "\n")
    with open(directory / "images.txt", "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for cam in cameras:
            nums = [repr(float(v)) for v in (*cam.qvec, *cam.tvec)]
            fh.write(" ".join([str(cam.image_id), *nums, str(cam.camera_id), cam.name]) + "\n\n")


@dataclass
class MaskSet:
    transient: np.ndarray  # (H, W) bool
    sky: np.ndarray
    ground: np.ndarray

    @classmethod
    def empty(cls, height: int, width: int) -> "MaskSet":
        z = np.zeros((height, width), dtype=bool)
        return cls(z, z.copy(), z.copy())


def mask_path(directory: str | Path, stem: str, kind: str) -> Path:
    return Path(directory) / f"{stem}.{kind}.png"


def read_mask(path: str | Path) -> np.ndarray:
    """8-bit grayscale thresholded at 128."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def load_mask_set(directory: str | Path, stem: str, shape: tuple[int, int]) -> MaskSet:
    masks = {}
    for kind in MASK_KINDS:
        path = mask_path(directory, stem, kind)
        if not path.exists():
            log.warning("missing %s mask for %s; assuming all zeros", kind, stem)
            masks[kind] = np.zeros(shape, dtype=bool)
            continue
        m = read_mask(path)
        if m.shape != tuple(shape):
            raise ValueError(f"{path}: mask is {m.shape[::-1]} but image is {tuple(shape)[::-1]}")
        masks[kind] = m
    return MaskSet(**masks)


def write_mask(path: str | Path, mask: np.ndarray):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


@dataclass
class SceneDataset:
    cameras: list[Camera]
    images: list[np.ndarray]  # (H, W, 3) float32 in [0, 1]
    masks: list[MaskSet]
    scene_box: np.ndarray  # (2, 3)
    depths: list[np.ndarray] | None = None  # (H, W), 0 where no surface
    appearance_gt: np.ndarray | None = None  # (N, 12): row-major T then b
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("dataset needs at least one image")
        if not (len(self.cameras) == len(self.images) == len(self.masks)):
            raise ValueError("need one camera and one mask set per image")
        self.scene_box = np.asarray(self.scene_box, dtype=np.float64).reshape(2, 3)

    def __len__(self):
        return len(self.cameras)


def holdout_split(n: int, every: int = 8) -> tuple[list[int], list[int]]:
    """Every ``every``-th frame (1-based) is held out for validation."""
    val = [i for i in range(n) if i % every == every - 1] if every > 0 else []
    train = [i for i in range(n) if i not in val]
    return train, val


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path: str | Path, img) -> None:
    arr = np.asarray(img, dtype=np.float64)
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def write_depth(path: str | Path, depth, scale: float = DEPTH_SCALE) -> None:
    d = np.round(np.clip(np.asarray(depth, dtype=np.float64) * scale, 0, 65535)).astype(np.uint16)
    Image.fromarray(d).save(path)


def read_depth(path: str | Path, scale: float = DEPTH_SCALE) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / scale


def _read_kv(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def load_dataset(root: str | Path, scene_box=None) -> SceneDataset:
    root = Path(root)
    cameras = parse_sfm_text(root / "sparse" / "0")
    images, masks, depths = [], [], []
    depth_dir = root / "depth"
    depth_scale = DEPTH_SCALE
    if (depth_dir / "meta.txt").exists():
        depth_scale = float(_read_kv(depth_dir / "meta.txt")["depth_scale"])
    for cam in cameras:
        img = read_image(root / "images" / cam.name)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"{cam.name}: image size {img.shape[1::-1]} != camera {cam.width}x{cam.height}")
        images.append(img)
        masks.append(load_mask_set(root / "masks", cam.stem, img.shape[:2]))
        dpath = depth_dir / f"{cam.stem}.png"
        depths.append(read_depth(dpath, depth_scale) if dpath.exists() else None)
    if scene_box is None:
        meta_path = root / "scene.txt"
        if not meta_path.exists():
            raise ValueError(f"{root}: no scene.txt; pass scene_box explicitly")
        scene_box = [float(v) for v in _read_kv(meta_path)["scene_box"].split()]
    app = None
    if (root / "appearance_gt.txt").exists():
        app = np.loadtxt(root / "appearance_gt.txt", ndmin=2)
    return SceneDataset(
        cameras, images, masks, scene_box,
        depths=depths if all(d is not None for d in depths) else None,
        appearance_gt=app,
    )


def write_dataset(ds: SceneDataset, root: str | Path) -> None:
    root = Path(root)
    for sub in ("sparse/0", "images", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_sfm_text(root / "sparse" / "0", ds.cameras)
    for cam, img, m in zip(ds.cameras, ds.images, ds.masks):
        write_image(root / "images" / cam.name, img)
        for kind in MASK_KINDS:
            write_mask(mask_path(root / "masks", cam.stem, kind), getattr(m, kind))
    box = " ".join(repr(float(v)) for v in ds.scene_box.ravel())
    (root / "scene.txt").write_text(f"scene_box = {box}\n")
    if ds.depths is not None:
        (root / "depth").mkdir(exist_ok=True)
        (root / "depth" / "meta.txt").write_text(
            f"depth_scale = {DEPTH_SCALE!r}  # stored value / depth_scale = depth; 0 = no surface\n"
        )
        for cam, d in zip(ds.cameras, ds.depths):
            write_depth(root / "depth" / f"{cam.stem}.png", d)
    if ds.appearance_gt is not None:
        np.savetxt(root / "appearance_gt.txt", ds.appearance_gt, fmt="%.17g")


# -- rays --------------------------------------------------------------------


def ray_box_bounds(origins: torch.Tensor, dirs: torch.Tensor, box: torch.Tensor, near_min: float):
    """Entry/exit distances of rays through an axis-aligned box.

    Rays missing the box get a tiny segment at ``near_min`` so that near < far.
    """
    d = torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    t0 = (box[0] - origins) / d
    t1 = (box[1] - origins) / d
    t_enter = torch.minimum(t0, t1).amax(dim=-1)
    t_exit = torch.maximum(t0, t1).amin(dim=-1)
    near = torch.clamp(t_enter, min=near_min)
    far = torch.maximum(t_exit, near + 1e-3)
    return near, far


def pixel_rays(cam_r, cam_c, fx, fy, cx, cy, rows, cols):
    """World-space origins and unit directions for integer pixel coordinates.

    All camera arguments are per-ray tensors (float64): R (N,3,3), centers (N,3).
    """
    x = ((cols + 0.5) - cx) / fx
    y = ((rows + 0.5) - cy) / fy
    d_cam = torch.stack([x, y, torch.ones_like(x)], dim=-1)
    d = (cam_r.transpose(-1, -2) @ d_cam[..., None])[..., 0]
    d = d / torch.linalg.vector_norm(d, dim=-1, keepdim=True)
    return cam_c, d


def camera_rays(camera: Camera, scene_box, image_index: int = 0, near_min: float = 0.05) -> RayBatch:
    """One ray per pixel, row-major."""
    h, w = camera.height, camera.width
    rows, cols = torch.meshgrid(
        torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij"
    )
    rows, cols = rows.reshape(-1), cols.reshape(-1)
    n = rows.shape[0]
    r = torch.as_tensor(camera.rotation).expand(n, 3, 3)
    c = torch.as_tensor(camera.center).expand(n, 3)
    o, d = pixel_rays(r, c, camera.fx, camera.fy, camera.cx, camera.cy, rows, cols)
    box = torch.as_tensor(np.asarray(scene_box, dtype=np.float64)).reshape(2, 3)
    near, far = ray_box_bounds(o, d, box, near_min)
    zeros = torch.zeros(n, dtype=torch.bool)
    return RayBatch(
        origins=o.float(), directions=d.float(), near=near.float(), far=far.float(),
        image_index=torch.full((n,), image_index, dtype=torch.long),
        pixels=torch.stack([rows, cols], dim=-1).long(),
        transient=zeros, sky=zeros.clone(), ground=zeros.clone(),
    )


def _window_sums(mask: np.ndarray, size: int) -> np.ndarray:
    """Number of set pixels in every size x size window, indexed by its top-left corner."""
    ii = np.pad(mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    return ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]


class RaySampler:
    """Uniform ray sampling over (image, pixel) pairs of a subset of images,
    plus rectangular ground patches for plane regularization."""

    def __init__(
        self,
        dataset: SceneDataset,
        indices: list[int] | None = None,
        near_min: float = 0.05,
        patch_size: int = 16,
        patch_ground_fraction: float = 0.75,
    ):
        self.dataset = dataset
        self.indices = list(range(len(dataset))) if indices is None else list(indices)
        if not self.indices:
            raise ValueError("sampler needs at least one image")
        self.near_min = near_min
        self.box = torch.as_tensor(dataset.scene_box, dtype=torch.float64)
        cams = [dataset.cameras[i] for i in self.indices]
        self.rot = torch.as_tensor(np.stack([c.rotation for c in cams]))
        self.center = torch.as_tensor(np.stack([c.center for c in cams]))
        self.intr = torch.as_tensor([[c.fx, c.fy, c.cx, c.cy] for c in cams], dtype=torch.float64)
        self.widths = torch.as_tensor([c.width for c in cams])
        counts = torch.as_tensor([c.width * c.height for c in cams])
        self.offsets = torch.cat([torch.zeros(1, dtype=torch.long), counts.cumsum(0)])
        self.total = int(self.offsets[-1])
        self.colors = torch.cat(
            [torch.as_tensor(dataset.images[i]).reshape(-1, 3) for i in self.indices]
        ).float()
        flat = {
            kind: torch.cat(
                [torch.as_tensor(getattr(dataset.masks[i], kind)).reshape(-1) for i in self.indices]
            )
            for kind in MASK_KINDS
        }
        self.flat_masks = flat
        self.patch_size = patch_size
        self.patches = self._valid_patches(patch_size, patch_ground_fraction)

    def _valid_patches(self, size: int, frac: float) -> torch.Tensor:
        """(M, 3) rows of (local image slot, top row, left col)."""
        found = []
        for slot, i in enumerate(self.indices):
            m = self.dataset.masks[i]
            if m.ground.shape[0] < size or m.ground.shape[1] < size:
                continue
            g = _window_sums(m.ground & ~m.transient, size)
            t = _window_sums(m.transient, size)
            r, c = np.nonzero((g >= frac * size * size) & (t == 0))
            found.append(np.stack([np.full_like(r, slot), r, c], axis=-1))
        if not found:
            return torch.zeros(0, 3, dtype=torch.long)
        return torch.as_tensor(np.concatenate(found)).long()

    def rays_for(self, flat_index: torch.Tensor) -> tuple[RayBatch, torch.Tensor]:
        slot = torch.searchsorted(self.offsets, flat_index, right=True) - 1
        local = flat_index - self.offsets[slot]
        w = self.widths[slot]
        rows, cols = (local // w).double(), (local % w).double()
        fx, fy, cx, cy = self.intr[slot].unbind(-1)
        o, d = pixel_rays(self.rot[slot], self.center[slot], fx, fy, cx, cy, rows, cols)
        near, far = ray_box_bounds(o, d, self.box, self.near_min)
        image_index = torch.as_tensor(self.indices)[slot]
        rays = RayBatch(
            origins=o.float(), directions=d.float(), near=near.float(), far=far.float(),
            image_index=image_index, pixels=torch.stack([rows, cols], dim=-1).long(),
            transient=self.flat_masks["transient"][flat_index],
            sky=self.flat_masks["sky"][flat_index],
            ground=self.flat_masks["ground"][flat_index],
        )
        return rays, self.colors[flat_index]

    def sample(self, batch_size: int, generator=None) -> tuple[RayBatch, torch.Tensor]:
        if batch_size < 1:
            raise ValueError("batch size must be >= 1")
        idx = torch.randint(0, self.total, (batch_size,), generator=generator)
        return self.rays_for(idx)

    def sample_patches(self, count: int, generator=None) -> list[tuple[RayBatch, torch.Tensor]]:
        """Ground-masked rays of ``count`` random valid patches."""
        if count < 1 or len(self.patches) == 0:
            return []
        pick = self.patches[torch.randint(0, len(self.patches), (count,), generator=generator)]
        out = []
        s = self.patch_size
        dr, dc = torch.meshgrid(torch.arange(s), torch.arange(s), indexing="ij")
        for slot, r0, c0 in pick.tolist():
            w = int(self.widths[slot])
            flat = self.offsets[slot] + (r0 + dr.reshape(-1)) * w + (c0 + dc.reshape(-1))
            flat = flat[self.flat_masks["ground"][flat]]
            out.append(self.rays_for(flat))
        return out


def sample_ray_batch(dataset: SceneDataset, batch_size: int = 4096, generator=None):
    return RaySampler(dataset).sample(batch_size, generator)
