"""Command-line entry point.

Subcommands::

    synth       generate a synthetic street scene dataset
    train       optimize a field from a config file and a dataset
    render      render a camera path from a checkpoint
    eval        PSNR table on held-out (or all) views, per mask region
    fit-plane   least-squares plane of an XYZ point file
    check-grad  finite-difference gradient report

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("streetfield")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _resolution(text: str) -> tuple[int, int]:
    """``64`` or ``96x64`` (width x height)."""
    try:
        if "x" in text:
            w, h = (int(v) for v in text.lower().split("x"))
        else:
            w = h = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="streetfield", description="Segmentation-guided radiance fields for street scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="dataset directory to create")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--resolution", type=_resolution, default=(64, 64), help="N or WxH (default 64)")
    s.add_argument("--views", type=int, default=12)
    s.add_argument("--jitter", type=float, default=0.0, help="per-frame affine color jitter amplitude")
    s.add_argument("--no-transient", action="store_true", help="omit the moving transient box")

    t = sub.add_parser("train", help="train a field")
    t.add_argument("--config", required=True, help="key = value config file")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="receives checkpoint.sgnf and metrics.csv")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--iters", type=int, help="override max_iters")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")

    r = sub.add_parser("render", help="render a camera path")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--path", required=True, help="camera path: one 'qw qx qy qz tx ty tz' line per frame")
    r.add_argument("--out", required=True)
    r.add_argument("--resolution", type=_resolution, default=(64, 64), help="N or WxH (default 64)")
    r.add_argument("--fov", type=float, default=60.0, help="horizontal field of view in degrees")
    r.add_argument("--samples", type=int, help="samples per ray (default: config value)")
    r.add_argument("--image-index", type=int, help="use this training image's appearance")
    r.add_argument("--deterministic", action="store_true")

    e = sub.add_parser("eval", help="PSNR table overall and per region")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="also write the table to this file")
    e.add_argument("--all-views", action="store_true", help="evaluate every view, not only held-out ones")
    e.add_argument("--samples", type=int, help="samples per ray (default: config value)")
    e.add_argument("--deterministic", action="store_true")

    f = sub.add_parser("fit-plane", help="fit a plane to an XYZ point file")
    f.add_argument("--path", required=True, help="whitespace-separated x y z per line")

    g = sub.add_parser("check-grad", help="finite-difference gradient report")
    g.add_argument("--checkpoint", help="checkpoint to check (default: fresh init)")
    g.add_argument("--config", help="config for a fresh init")
    g.add_argument("--data", help="dataset for the micro-batch (default: small synthetic scene)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=200, help="entries checked per block")
    g.add_argument("--out", help="also write the report to this file")
    return p


def _threads(deterministic: bool = False):
    n = int(os.environ.get("STREETFIELD_THREADS", "0") or 0)
    if deterministic:
        n = 1
        torch.use_deterministic_algorithms(True)
    if n > 0:
        torch.set_num_threads(n)


def _write_report(text: str, out: str | None):
    print(text)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")


def cmd_synth(a) -> int:
    from .dataset import write_dataset
    from .synthetic import SyntheticConfig, generate_synthetic_scene

    w, h = a.resolution
    cfg = SyntheticConfig(width=w, height=h, num_views=a.views, jitter=a.jitter, transient=not a.no_transient)
    ds = generate_synthetic_scene(cfg, seed=a.seed)
    write_dataset(ds, a.out)
    print(f"wrote {len(ds)} views ({w}x{h}) to {a.out}")
    return 0


def cmd_train(a) -> int:
    import dataclasses

    from .config import TrainConfig
    from .dataset import load_dataset
    from .train import train

    _threads(a.deterministic)
    cfg = TrainConfig.load(a.config)
    over = {}
    if a.seed is not None:
        over["seed"] = a.seed
    if a.iters is not None:
        over["max_iters"] = a.iters
    cfg = dataclasses.replace(cfg, **over)
    ds = load_dataset(a.data)
    res = train(ds, cfg, out_dir=a.out, resume=a.checkpoint)
    last = res.history[-1] if res.history else {}
    print(f"trained to iteration {res.iteration}; final l_total {last.get('l_total', float('nan')):.6g}")
    for row in res.val_history:
        print(f"  validation PSNR at {row['iteration']}: {row['psnr']:.2f} dB")
    return 0


def read_camera_path(path: str | Path) -> list[np.ndarray]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        vals = line.split()
        if len(vals) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 numbers, got {len(vals)}")
        try:
            poses.append(np.array([float(v) for v in vals]))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    if not poses:
        raise ValueError(f"{path}: no camera poses")
    return poses


def cmd_render(a) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import DEPTH_SCALE, Camera, write_depth, write_image
    from .render import render_image

    _threads(a.deterministic)
    ckpt = load_checkpoint(a.checkpoint)
    field = ckpt.field.eval()
    k = a.samples or ckpt.config.eval_samples or ckpt.config.num_samples
    w, h = a.resolution
    focal = 0.5 * w / math.tan(math.radians(a.fov) / 2)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    poses = read_camera_path(a.path)
    for i, pose in enumerate(poses):
        cam = Camera(w, h, focal, focal, w / 2, h / 2, pose[:4] / np.linalg.norm(pose[:4]), pose[4:],
                     name=f"frame_{i:04d}.png")
        color, depth, _ = render_image(field, cam, k, image_index=a.image_index, near_min=ckpt.config.near_min)
        write_image(out / f"frame_{i:04d}.png", color.double().numpy())
        write_depth(out / f"depth_{i:04d}.png", depth.double().numpy())
    (out / "depth_meta.txt").write_text(
        f"depth_scale = {DEPTH_SCALE!r}  # 16-bit value / depth_scale = depth in scene units\n"
    )
    print(f"rendered {len(poses)} frames to {out}")
    return 0


def cmd_eval(a) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import holdout_split, load_dataset
    from .evaluate import REGIONS, evaluate_view

    _threads(a.deterministic)
    ckpt = load_checkpoint(a.checkpoint)
    cfg = ckpt.config
    ds = load_dataset(a.data)
    if len(ds) != ckpt.field.cfg.num_images:
        raise ValueError(f"checkpoint was trained on {ckpt.field.cfg.num_images} images, dataset has {len(ds)}")
    _, val = holdout_split(len(ds), cfg.holdout_every)
    views = list(range(len(ds))) if a.all_views or not val else val
    k = a.samples or cfg.eval_samples or cfg.num_samples
    rows = [f"{'view':<8}" + "".join(f"{r:>10}" for r in REGIONS)]
    scores = {r: [] for r in REGIONS}
    for i in views:
        res = evaluate_view(ckpt.field, ds, i, k, probe_pixels=cfg.probe_pixels, probe_steps=cfg.probe_steps,
                            probe_lr=cfg.probe_lr, seed=cfg.seed)
        rows.append(f"{i:<8}" + "".join(f"{res.psnr[r]:>10.2f}" for r in REGIONS))
        for r in REGIONS:
            if not math.isnan(res.psnr[r]):
                scores[r].append(res.psnr[r])
    rows.append(f"{'mean':<8}" + "".join(
        f"{(float(np.mean(scores[r])) if scores[r] else math.nan):>10.2f}" for r in REGIONS))
    _write_report("\n".join(rows), a.out)
    return 0


def cmd_fit_plane(a) -> int:
    from .plane import fit_plane

    pts = np.loadtxt(a.path, ndmin=2, comments="#")
    if pts.shape[1] != 3:
        raise ValueError(f"{a.path}: expected 3 columns, got {pts.shape[1]}")
    fit = fit_plane(torch.as_tensor(pts, dtype=torch.float64))
    c, n = fit.barycenter, fit.normal
    print(f"barycenter {c[0]:.12g} {c[1]:.12g} {c[2]:.12g}")
    print(f"normal {n[0]:.12g} {n[1]:.12g} {n[2]:.12g}")
    print(f"sigma3 {fit.sigma3:.12g}")
    if not fit.determinate:
        print("warning: normal is indeterminate (repeated smallest singular value)")
    elif fit.degenerate:
        print("warning: smallest singular value is nearly repeated; normal is ill-conditioned")
    return 0


def cmd_check_grad(a) -> int:
    from .checkpoint import load_checkpoint
    from .config import TrainConfig
    from .dataset import load_dataset
    from .field import SceneField
    from .gradcheck import field_gradient_check
    from .synthetic import SyntheticConfig, generate_synthetic_scene

    _threads(True)
    if a.data:
        ds = load_dataset(a.data)
    else:
        ds = generate_synthetic_scene(SyntheticConfig(width=16, height=16, num_views=4), seed=a.seed)
    if a.checkpoint:
        ckpt = load_checkpoint(a.checkpoint)
        cfg, field = ckpt.config, ckpt.field
        if field.cfg.num_images != len(ds):
            raise ValueError("checkpoint image count does not match the dataset")
    else:
        cfg = TrainConfig.load(a.config) if a.config else TrainConfig(grid_table_size=2**12)
        field = SceneField(cfg.field_config(len(ds)), ds.scene_box, seed=a.seed)
    report = field_gradient_check(field, ds, cfg, samples=a.samples, seed=a.seed)
    verdict = "PASS" if report.passed else "FAIL"
    _write_report(f"{report.table()}\nworst relative error {report.worst:.3e} "
                  f"(tolerance {report.tolerance:g}): {verdict}", a.out)
    return 0 if report.passed else 2


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "fit-plane": cmd_fit_plane,
    "check-grad": cmd_check_grad,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        sys.stderr.write(f"streetfield {args.command}: {exc}\n")
        return 2


def main():
    sys.exit(run())
