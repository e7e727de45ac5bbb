import hashlib
from pathlib import Path

import numpy as np
import pytest

from streetfield.cli import read_camera_path, run


def _digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_help_exits_zero(capsys):
    assert run(["eval", "--help"]) == 0
    assert "--checkpoint" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    assert run(["train"]) == 1
    assert run([]) == 1
    assert run(["bogus"]) == 1
    assert run(["synth", "--out", "x", "--resolution", "0x4"]) == 1


def test_synth_is_deterministic(tmp_path):
    args = ["synth", "--seed", "7", "--resolution", "16", "--views", "3"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    assert a and a == b


def test_fit_plane_output(tmp_path, capsys):
    pts = tmp_path / "pts.txt"
    pts.write_text("0 0 1\n1 0 1\n0 1 1\n1 1 1\n")
    assert run(["fit-plane", "--path", str(pts)]) == 0
    lines = dict(line.split(" ", 1) for line in capsys.readouterr().out.strip().splitlines())
    assert np.allclose(np.array(lines["barycenter"].split(), float), [0.5, 0.5, 1.0])
    assert np.allclose(np.abs(np.array(lines["normal"].split(), float)), [0, 0, 1])
    assert float(lines["sigma3"]) < 1e-9
    assert "warning" not in lines


def test_fit_plane_warns_on_collinear(tmp_path, capsys):
    pts = tmp_path / "pts.txt"
    pts.write_text("0 0 0\n1 1 0\n2 2 0\n")
    assert run(["fit-plane", "--path", str(pts)]) == 0
    assert "warning" in capsys.readouterr().out


def test_bad_camera_path_exits_two(tmp_path, capsys):
    path = tmp_path / "path.txt"
    path.write_text("1 0 0 0 0 0 0\n1 0 0 0 0 0\n")
    with pytest.raises(ValueError, match=r"path.txt:2: expected 7 numbers"):
        read_camera_path(path)
    assert run(["render", "--checkpoint", str(tmp_path / "none.sgnf"), "--path", str(path),
                "--out", str(tmp_path / "r")]) == 2
    assert "streetfield render" in capsys.readouterr().err


def test_missing_data_exits_two(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("max_iters = 2\n")
    assert run(["train", "--config", str(cfg), "--data", str(tmp_path / "missing"),
                "--out", str(tmp_path / "o")]) == 2


def test_train_render_eval_round_trip(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(["synth", "--out", str(data), "--resolution", "8", "--views", "8", "--seed", "1"]) == 0
    cfg = tmp_path / "c.txt"
    cfg.write_text("batch_size = 32\nnum_samples = 8\ngrid_levels = 2\ngrid_table_size = 1024\n"
                   "grid_resolution_max = 32\npatch_size = 4\nnum_patches = 1\nprobe_steps = 3\n")
    out = tmp_path / "run"
    assert run(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--iters", "4",
                "--deterministic"]) == 0
    assert (out / "checkpoint.sgnf").is_file() and (out / "metrics.csv").is_file()

    path = tmp_path / "path.txt"
    path.write_text("# w x y z tx ty tz\n1 0 0 0 0 0 0\n1 0 0 0 0.1 0 0\n")
    frames = tmp_path / "frames"
    assert run(["render", "--checkpoint", str(out / "checkpoint.sgnf"), "--path", str(path),
                "--out", str(frames), "--resolution", "6x4", "--image-index", "0"]) == 0
    assert sorted(p.name for p in frames.glob("*.png")) == [
        "depth_0000.png", "depth_0001.png", "frame_0000.png", "frame_0001.png"]

    capsys.readouterr()
    table = tmp_path / "table.txt"
    assert run(["eval", "--checkpoint", str(out / "checkpoint.sgnf"), "--data", str(data),
                "--out", str(table)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["view", "all", "static", "sky", "ground"]
    assert lines[1].split()[0] == "7" and lines[-1].split()[0] == "mean"
    assert table.read_text().strip().splitlines() == lines


def test_check_grad_reports(tmp_path, capsys):
    out = tmp_path / "grad.txt"
    code = run(["check-grad", "--samples", "20", "--out", str(out)])
    text = capsys.readouterr().out
    assert code == 0, text
    assert text.strip().endswith("PASS") and out.read_text() == text
