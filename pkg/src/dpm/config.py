"""Run configuration: one flat JSON object split into typed sections."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

MASK_VARIANTS = ("P", "F", "Pn", "Fn")
BRANCH_LOSSES = ("SS", "AA", "SA")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def _require(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(name, msg)


def patch_grid(h: int, w: int, patch: int, stride: int) -> tuple[int, int]:
    """Rows and columns of sliding-window positions over an ``h`` x ``w`` image."""
    if patch > h or patch > w:
        raise ConfigError("patch", f"window {patch} larger than image {h}x{w}")
    if stride < 1:
        raise ConfigError("stride", "must be >= 1")
    return (h - patch + stride) // stride, (w - patch + stride) // stride


@dataclass
class EncoderConfig:
    image_h: int = 32
    image_w: int = 16
    in_channels: int = 3
    patch: int = 8
    stride: int = 4
    dim: int = 64
    depth: int = 12
    heads: int = 4
    mlp_ratio: int = 4
    cameras: int = 3
    lambda_cam: float = 3.0

    def validate(self) -> None:
        _require(self.patch <= self.image_h and self.patch <= self.image_w, "patch",
                 "must not exceed image height or width")
        _require(self.stride >= 1, "stride", "must be >= 1")
        _require(self.heads >= 1, "heads", "must be >= 1")
        _require(self.dim % self.heads == 0, "dim", "must be divisible by heads")
        _require(self.depth >= 2, "depth", "must be >= 2")
        _require(self.cameras >= 1, "cameras", "must be >= 1")
        _require(self.mlp_ratio >= 1, "mlp_ratio", "must be >= 1")
        _require(self.in_channels >= 1, "in_channels", "must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        return patch_grid(self.image_h, self.image_w, self.patch, self.stride)

    @property
    def num_patches(self) -> int:
        h, w = self.grid
        return h * w

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class MaskGeneratorConfig:
    hmg_gate: list[int] = field(default_factory=lambda: [2, 4, 10, 12])
    hmg_kernel: int = 3
    hmg_hidden: int | None = None
    mask_variant: str = "Pn"

    def validate(self, depth: int) -> None:
        _require(len(self.hmg_gate) >= 1, "hmg_gate", "at least one block must be selected")
        _require(all(1 <= b <= depth for b in self.hmg_gate), "hmg_gate",
                 f"block indices must lie in 1..{depth}")
        _require(len(set(self.hmg_gate)) == len(self.hmg_gate), "hmg_gate", "duplicate block index")
        _require(self.hmg_kernel >= 1 and self.hmg_kernel % 2 == 1, "hmg_kernel", "must be a positive odd integer")
        _require(self.hmg_hidden is None or self.hmg_hidden >= 1, "hmg_hidden", "must be >= 1")
        _require(self.mask_variant in MASK_VARIANTS, "mask_variant", f"must be one of {MASK_VARIANTS}")

    def gate_vector(self, depth: int) -> list[int]:
        return [1 if (b + 1) in self.hmg_gate else 0 for b in range(depth)]


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.1
    margin_m: float = 0.5
    scale_s: float = 30.0
    triplet_margin: float = 0.3
    branch_losses: str = "SA"

    def validate(self) -> None:
        _require(0.0 <= self.alpha <= 1.0, "alpha", "must lie in [0, 1]")
        _require(self.beta >= 0.0, "beta", "must be >= 0")
        _require(0.0 <= self.margin_m < math.pi / 2, "margin_m", "must lie in [0, pi/2)")
        _require(self.scale_s > 0.0, "scale_s", "must be > 0")
        _require(self.triplet_margin >= 0.0, "triplet_margin", "must be >= 0")
        _require(self.branch_losses in BRANCH_LOSSES, "branch_losses", f"must be one of {BRANCH_LOSSES}")


@dataclass
class TrainConfig:
    iterations: int = 2000
    ids_per_batch: int = 4
    instances_per_id: int = 16
    base_lr: float = 0.008
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        _require(self.iterations >= 0, "iterations", "must be >= 0")
        _require(self.ids_per_batch >= 2, "ids_per_batch", "must be >= 2")
        _require(self.instances_per_id >= 2, "instances_per_id", "must be >= 2")
        _require(self.base_lr >= 0.0, "base_lr", "must be >= 0")
        _require(0.0 <= self.momentum < 1.0, "momentum", "must lie in [0, 1)")
        _require(self.weight_decay >= 0.0, "weight_decay", "must be >= 0")
        _require(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")

    @property
    def batch_size(self) -> int:
        return self.ids_per_batch * self.instances_per_id


@dataclass
class SynthSpec:
    num_identities: int = 20
    images_per_identity: int = 30
    query_per_identity: int = 3
    gallery_per_identity: int = 9
    image_h: int = 32
    image_w: int = 16
    in_channels: int = 3
    cameras: int = 3
    p_occ: float = 0.5
    gallery_p_occ: float = 0.5
    occ_area_min: float = 0.25
    occ_area_max: float = 0.5
    num_obstacles: int = 4
    noise_sigma: float = 0.05
    data_seed: int = 0

    def validate(self) -> None:
        _require(self.num_identities >= 2, "num_identities", "need at least 2 identities")
        _require(self.query_per_identity >= 1, "query_per_identity", "must be >= 1")
        _require(self.gallery_per_identity >= 1, "gallery_per_identity", "must be >= 1")
        _require(self.images_per_identity > self.query_per_identity + self.gallery_per_identity,
                 "images_per_identity", "must exceed query_per_identity + gallery_per_identity")
        _require(0.0 <= self.p_occ <= 1.0, "p_occ", "must lie in [0, 1]")
        _require(0.0 <= self.gallery_p_occ <= 1.0, "gallery_p_occ", "must lie in [0, 1]")
        _require(0.0 < self.occ_area_min <= self.occ_area_max < 1.0, "occ_area_min",
                 "need 0 < occ_area_min <= occ_area_max < 1")
        _require(self.num_obstacles >= 1, "num_obstacles", "must be >= 1")
        _require(self.noise_sigma >= 0.0, "noise_sigma", "must be >= 0")
        _require(self.cameras >= 1, "cameras", "must be >= 1")
        _require(self.image_h >= 2 and self.image_w >= 2, "image_h", "image too small")

    @property
    def train_per_identity(self) -> int:
        return self.images_per_identity - self.query_per_identity - self.gallery_per_identity


@dataclass
class EvalConfig:
    exclude_same_camera: bool = True
    max_rank: int = 20
    diag_samples: int = 50

    def validate(self) -> None:
        _require(self.max_rank >= 1, "max_rank", "must be >= 1")
        _require(self.diag_samples >= 1, "diag_samples", "must be >= 1")


_SECTIONS = {
    "encoder": EncoderConfig,
    "hmg": MaskGeneratorConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "data": SynthSpec,
    "eval": EvalConfig,
}

# keys present in more than one section take a single shared value
_SHARED = {"image_h", "image_w", "in_channels", "cameras"}


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hmg: MaskGeneratorConfig = field(default_factory=MaskGeneratorConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        self.encoder.validate()
        self.hmg.validate(self.encoder.depth)
        self.loss.validate()
        self.train.validate()
        self.data.validate()
        self.eval.validate()
        return self

    @classmethod
    def known_keys(cls) -> set[str]:
        keys = {"output_dir"}
        for sec in _SECTIONS.values():
            keys.update(f.name for f in dataclasses.fields(sec))
        return keys

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        unknown = set(raw) - cls.known_keys()
        if unknown:
            raise ConfigError(sorted(unknown)[0], f"unknown config key(s): {', '.join(sorted(unknown))}")
        cfg = cls()
        for attr, sec_cls in _SECTIONS.items():
            sec = getattr(cfg, attr)
            for f in dataclasses.fields(sec_cls):
                if f.name in raw:
                    setattr(sec, f.name, _coerce(f.name, raw[f.name], getattr(sec, f.name)))
        if "output_dir" in raw:
            cfg.output_dir = str(raw["output_dir"])
        return cfg.validate()

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for attr in _SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, attr)).items():
                if k in out and k in _SHARED and out[k] != v:
                    raise ConfigError(k, f"inconsistent shared value {out[k]!r} vs {v!r}")
                out[k] = v
        out["output_dir"] = self.output_dir
        return out

    def replace(self, **overrides: Any) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **overrides})

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("<file>", "top-level JSON value must be an object")
        return cls.from_dict(raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _coerce(name: str, value: Any, default: Any) -> Any:
    if name == "hmg_gate":
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(name, "must be a list of integers")
        return sorted(value)
    if name == "hmg_hidden":
        if value is None:
            return None
        default = 0
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, "must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, "must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, "must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, "must be a string")
        return value
    return value
