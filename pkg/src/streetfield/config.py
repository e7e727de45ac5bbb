"""Training configuration and its flat ``key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .field import FieldConfig, HashGridConfig
from .losses import DEFAULT_LAMBDA_GROUND, DEFAULT_LAMBDA_SKY


@dataclass
class TrainConfig:
    # optimization protocol
    max_iters: int = 50000
    batch_size: int = 4096
    lr_init: float = 0.01
    lr_final: float = 0.001
    lambda_sky: float = DEFAULT_LAMBDA_SKY
    lambda_ground: float = DEFAULT_LAMBDA_GROUND
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # rendering
    num_samples: int = 128
    near_min: float = 0.05
    # region handling
    use_transient_mask: bool = True
    use_appearance: bool = True
    num_patches: int = 4
    patch_size: int = 16
    patch_ground_fraction: float = 0.75
    # field architecture
    grid_levels: int = 8
    grid_table_size: int = 2**16
    grid_features: int = 2
    grid_resolution_min: int = 16
    grid_resolution_max: int = 512
    ipe_levels: int = 6
    dir_levels: int = 4
    hidden: int = 64
    sky_layers: int = 3
    latent_dim: int = 16
    density_bias: float = -6.0
    # bookkeeping and evaluation
    checkpoint_interval: int = 5000
    val_interval: int = 0
    holdout_every: int = 8
    eval_samples: int = 0  # 0: same as num_samples
    probe_pixels: int = 32
    probe_steps: int = 200
    probe_lr: float = 0.05

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.lambda_sky < 0 or self.lambda_ground < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")

    def field_config(self, num_images: int) -> FieldConfig:
        grid = HashGridConfig(
            levels=self.grid_levels,
            table_size=self.grid_table_size,
            features_per_level=self.grid_features,
            resolution_min=self.grid_resolution_min,
            resolution_max=self.grid_resolution_max,
        )
        return FieldConfig(
            grid=grid, ipe_levels=self.ipe_levels, dir_levels=self.dir_levels,
            hidden=self.hidden, sky_layers=self.sky_layers, latent_dim=self.latent_dim,
            density_bias=self.density_bias,
            num_images=num_images, use_appearance=self.use_appearance,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            if key not in types:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _parse(types[key], val, lineno)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path):
        Path(path).write_text(self.to_text())


def _parse(typ: str, val: str, lineno: int):
    try:
        if typ == "bool":
            low = val.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {val!r}")
        if typ == "int":
            return int(float(val)) if "e" in val.lower() else int(val)
        return float(val)
    except ValueError as e:
        raise ValueError(f"line {lineno}: {e}") from None
