"""Run configuration: one flat dataclass, a key=value file format, overrides.

The defaults are the desk-scale profile (64x64 frames, 2000/300 samples,
batch 16, 20 epochs).  ``two_stage_profile`` switches the loss weights to
the alternative low-weight setting used with two-stage detection heads.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass
class DistillConfig:
    # data
    image_size: int = 64
    dt_us: int = 50_000
    bins: int = 5
    clip: float = 5.0
    theta: float = 0.15
    min_objects: int = 1
    max_objects: int = 4
    train_samples: int = 2000
    val_samples: int = 300
    data_seed: int = 0
    data_dir: str = "runs/data"

    # model
    feat_dim: int = 64
    num_categories: int = 3
    slot_iters: int = 3

    # losses
    lambda1: float = 0.1  # direct slot-feature matching
    lambda2: float = 1.0  # attention-masked pixel alignment
    lambda3: float = 0.002  # inter-object relation matching
    lambda4: float = 1.0  # auxiliary head supervision
    beta: float = 50.0  # box-size weight inside the auxiliary loss

    # optimization
    lr_per_sample: float = 7.5e-5
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_epochs: int = 5
    epochs: int = 20
    batch_size: int = 16
    ema_enabled: bool = True
    ema_decay: float = 0.999
    seed: int = 0

    # ablation switches
    disable_relation: bool = False
    disable_coarse: bool = False
    attention_type: str = "ours"  # ours | full-region | fg-region

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.slot_iters < 1:
            raise ValueError("slot_iters must be >= 1")
        if self.epochs < 2:
            raise ValueError("epochs must be >= 2 (epoch 1 is the stabilization epoch)")
        if self.attention_type not in ("ours", "full-region", "fg-region"):
            raise ValueError(f"unknown attention_type {self.attention_type!r}")
        if self.clip <= 0:
            raise ValueError("clip must be positive")

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        lam3 = 0.0 if self.disable_relation else self.lambda3
        return (self.lambda1, self.lambda2, lam3, self.lambda4)

    @property
    def learning_rate(self) -> float:
        return self.lr_per_sample * self.batch_size


def two_stage_profile(**overrides) -> DistillConfig:
    """Loss-weight profile for two-stage heads: lambda = (0.01, 0.1, 0.0002, 0.1)."""
    base = dict(lambda1=0.01, lambda2=0.1, lambda3=2e-4, lambda4=0.1)
    base.update(overrides)
    return DistillConfig(**base)


_FIELDS = {f.name: f for f in dataclasses.fields(DistillConfig)}


def _parse_value(name: str, raw: str):
    if name not in _FIELDS:
        raise KeyError(f"unknown config key {name!r}")
    ftype = _FIELDS[name].type
    raw = raw.strip()
    if ftype in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean for {name}: {raw!r}")
    if ftype in ("int", int):
        return int(raw)
    if ftype in ("float", float):
        return float(raw)
    return raw


def load_config(path=None, overrides=()) -> DistillConfig:
    """Build a config from an optional ``key = value`` file plus overrides.

    Overrides are ``key=value`` strings (CLI ``--set``) applied after the
    file.  Unknown keys and malformed values raise.
    """
    values = {}
    if path is not None:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = line.split("=", 1)
                key = key.strip()
                values[key] = _parse_value(key, raw)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return DistillConfig(**values)


def save_config(cfg: DistillConfig, path) -> None:
    with open(path, "w") as f:
        for fld in dataclasses.fields(DistillConfig):
            f.write(f"{fld.name} = {getattr(cfg, fld.name)}\n")
