"""Binary checkpoint container.

Layout (little-endian)::

    b"SGNF"  u32 version
    repeated: u32 name_len, name (utf-8), u64 payload_len, payload

Field blocks ("hash", "mlp_density", ...) and the Adam moment blocks
("adam_m.<block>", "adam_v.<block>") carry a u64 element count followed by
float32 values, the block's parameters concatenated in module order.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .field import BLOCK_NAMES, SceneField
from .optim import AdamState

MAGIC = b"SGNF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _float_block(tensors: list[torch.Tensor]) -> bytes:
    flat = np.concatenate([t.detach().cpu().numpy().astype("<f4").ravel() for t in tensors]) \
        if tensors else np.zeros(0, dtype="<f4")
    return struct.pack("<Q", flat.size) + flat.tobytes()


def _read_float_block(payload: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<Q", payload)
    arr = np.frombuffer(payload, dtype="<f4", count=n, offset=8)
    if 8 + 4 * n != len(payload):
        raise CheckpointError("float block length does not match its element count")
    return arr


def write_blocks(path: str | Path, blocks: dict[str, bytes]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, payload in blocks.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_blocks(path: str | Path) -> dict[str, bytes]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, blocks = 8, {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (plen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if pos + plen > len(data):
            raise CheckpointError(f"{path}: truncated block {name!r}")
        blocks[name] = data[pos : pos + plen]
        pos += plen
    return blocks


@dataclass
class Checkpoint:
    field: SceneField
    config: TrainConfig
    adam: AdamState | None
    iteration: int
    rng_state: torch.Tensor | None


def save_checkpoint(
    path: str | Path,
    field: SceneField,
    config: TrainConfig,
    adam: AdamState | None = None,
    iteration: int = 0,
    generator: torch.Generator | None = None,
) -> None:
    box = " ".join(repr(float(v)) for v in field.scene_box.flatten().tolist())
    header = config.to_text() + f"num_images = {field.cfg.num_images}\nscene_box = {box}\n"
    blocks = {"config": header.encode()}
    grouped = field.blocks()
    for name in BLOCK_NAMES:
        blocks[name] = _float_block([p for _, p in grouped[name]])
    if adam is not None:
        for name in BLOCK_NAMES:
            keys = [k for k, _ in grouped[name]]
            blocks[f"adam_m.{name}"] = _float_block([adam.m[k] for k in keys])
            blocks[f"adam_v.{name}"] = _float_block([adam.v[k] for k in keys])
        blocks["adam_step"] = struct.pack("<Q", adam.step)
    blocks["iteration"] = struct.pack("<Q", iteration)
    if generator is not None:
        blocks["rng_state"] = generator.get_state().numpy().tobytes()
    write_blocks(path, blocks)


def _fill(params: list[tuple[str, torch.Tensor]], flat: np.ndarray, what: str) -> None:
    total = sum(p.numel() for _, p in params)
    if flat.size != total:
        raise CheckpointError(f"block {what!r} holds {flat.size} values, model expects {total}")
    pos = 0
    with torch.no_grad():
        for _, p in params:
            n = p.numel()
            p.copy_(torch.from_numpy(flat[pos : pos + n].copy()).reshape(p.shape))
            pos += n


def load_checkpoint(path: str | Path) -> Checkpoint:
    blocks = read_blocks(path)
    text = blocks["config"].decode()
    extra, cfg_lines = {}, []
    for line in text.splitlines():
        key = line.partition("=")[0].strip()
        if key in ("num_images", "scene_box"):
            extra[key] = line.partition("=")[2].strip()
        else:
            cfg_lines.append(line)
    config = TrainConfig.from_text("\n".join(cfg_lines))
    num_images = int(extra["num_images"])
    box = [float(v) for v in extra["scene_box"].split()]
    field = SceneField(config.field_config(num_images), box, seed=config.seed)
    grouped = field.blocks()
    for name in BLOCK_NAMES:
        _fill(grouped[name], _read_float_block(blocks[name]), name)

    adam = None
    if "adam_step" in blocks:
        adam = AdamState.zeros_like(dict(field.named_parameters()))
        for name in BLOCK_NAMES:
            _fill([(k, adam.m[k]) for k, _ in grouped[name]], _read_float_block(blocks[f"adam_m.{name}"]), name)
            _fill([(k, adam.v[k]) for k, _ in grouped[name]], _read_float_block(blocks[f"adam_v.{name}"]), name)
        (adam.step,) = struct.unpack("<Q", blocks["adam_step"])
    (iteration,) = struct.unpack("<Q", blocks["iteration"])
    rng = None
    if "rng_state" in blocks:
        rng = torch.frombuffer(bytearray(blocks["rng_state"]), dtype=torch.uint8).clone()
    return Checkpoint(field, config, adam, iteration, rng)
