"""Flat key=value run configuration shared by every CLI verb.

One schema covers training, distillation, data generation, and the eval
harness; unknown keys are rejected so configs stay diffable. Booleans are
written as 0/1 and lists as comma-separated values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

_PROFILES: dict[str, dict[str, str]] = {
    # Paper-scale settings for users with real datasets; desk defaults
    # otherwise. Select with `profile=paper` in a config or override.
    "paper": {
        "image_size": "256",
        "stride": "2",
        "r": "24",
        "coarse_stride": "8",
        "r_coarse": "6",
        "upsample_factor": "4",
        "tau": "1.0",
        "lr": "1e-3",
        "batch": "16",
        "epochs": "30",
    }
}


@dataclass
class TrainConfig:
    stage: str = "joint"  # pretrain-self | joint | distill
    profile: str = "desk"

    # geometry / mapping. Unit-norm features bound logits to [-1, 1], so
    # the desk default temperature is 0.1; the paper profile restores 1.0
    # (the paper's raw ResNet dot products are far larger than cosines).
    image_size: int = 64
    stride: int = 2
    channels: str = "16,32,32,32"
    normalize: bool = True
    r: int = 6
    tau: float = 0.1

    # coarse-to-fine student
    coarse_stride: int = 8
    r_coarse: int = 3
    upsample_factor: int = 4

    # supervision
    label_mode: str = "soft"  # dirac | gaussian | soft
    sigma_u: float = 1.0
    sigma_v: float = 1.0
    loss_kl: bool = True
    loss_rec: bool = True
    loss_adv: bool = True
    lambda_adv: float = 1.0
    dropout_p: float = 0.2
    use_lab: bool = True

    # optimization
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 1
    epochs: int = 1
    pairs: int = 2000
    seed: int = 0
    log_every: int = 1
    ckpt_every: int = 0  # 0 = final checkpoint only

    # prerequisite checkpoints
    theta_self: str = ""
    teacher: str = ""

    # synthetic generator (labeled domain)
    gen_sprites_min: int = 2
    gen_sprites_max: int = 4
    gen_sprite_min: int = 12
    gen_sprite_max: int = 26
    gen_max_disp: float = 8.0
    gen_integer_disp: bool = True
    gen_texture: str = "noise"
    gen_texture_scale: int = 5
    gen_noise: float = 0.02
    gen_background_moves: bool = True
    gen_gap: int = 1

    # unlabeled "real" stream (photometric shift on top of the generator)
    real_jitter: float = 0.25
    real_noise: float = 0.04

    # eval harness
    eval_pairs: int = 30
    eval_clips: int = 8
    eval_clip_len: int = 6
    eval_points: int = 12
    eval_seed: int = 900000
    eval_jitter: float = 0.15
    topk: int = 10
    memory: int = 1
    pck_alpha: float = 0.1

    def channel_tuple(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.channels.split(","))


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    if f.type in ("bool", bool):
        if raw not in ("0", "1", "true", "false"):
            raise ValueError(f"config key {name!r} expects 0/1, got {raw!r}")
        return raw in ("1", "true")
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    return raw


def parse_kv_lines(lines) -> dict[str, str]:
    out: dict[str, str] = {}
    for i, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ValueError(f"line {i}: expected key=value, got {text!r}")
        key, value = text.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | None = None, overrides: list[str] | None = None) -> TrainConfig:
    """Build a config from an optional file plus key=value overrides.

    A `profile=paper` entry expands to the paper-scale values before any
    explicitly written keys are applied, so explicit keys always win.
    """
    raw: dict[str, str] = {}
    if path:
        with open(path) as f:
            raw.update(parse_kv_lines(f))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()

    profile = raw.get("profile", "desk")
    merged: dict[str, str] = {}
    if profile != "desk":
        if profile not in _PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        merged.update(_PROFILES[profile])
    merged.update(raw)

    cfg = TrainConfig()
    for key, value in merged.items():
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value))
    validate_config(cfg)
    return cfg


def validate_config(cfg: TrainConfig) -> None:
    if cfg.stage not in ("pretrain-self", "joint", "distill"):
        raise ValueError(f"unknown stage {cfg.stage!r}")
    if cfg.label_mode not in ("dirac", "gaussian", "soft"):
        raise ValueError(f"unknown label_mode {cfg.label_mode!r}")
    if cfg.upsample_factor * cfg.r_coarse < cfg.r:
        raise ValueError(
            "coverage violated: upsample_factor * r_coarse must be >= r "
            f"({cfg.upsample_factor} * {cfg.r_coarse} < {cfg.r})"
        )
    if cfg.coarse_stride != cfg.stride * cfg.upsample_factor:
        raise ValueError(
            "coarse_stride must equal stride * upsample_factor "
            f"({cfg.coarse_stride} != {cfg.stride} * {cfg.upsample_factor})"
        )
    if not 0.0 <= cfg.dropout_p < 1.0:
        raise ValueError("dropout_p must satisfy 0 <= p < 1")


def save_config(path: str, cfg: TrainConfig) -> None:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = int(value)
        lines.append(f"{f.name}={value}")
    with open(path, "w") as fp:
        fp.write("\n".join(lines) + "\n")
