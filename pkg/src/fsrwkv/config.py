"""Model and training configuration with an exact-round-trip text format.

The on-disk format is flat ``key=value`` lines under ``[model]`` and
``[train]`` section headers.  Floats are written with ``repr`` so
``parse(serialize(cfg)) == cfg`` holds bit-exactly; lists are
comma-separated; shift offsets are semicolon-separated ``dy,dx`` pairs.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from typing import Tuple

NEIGHBORHOOD_8: Tuple[Tuple[int, int], ...] = (
    (0, 1),
    (0, -1),
    (1, 0),
    (-1, 0),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    out_channels: int = 1
    stage_widths: Tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: Tuple[int, ...] = (2, 2, 2, 2)
    shift_offsets: Tuple[Tuple[int, int], ...] = NEIGHBORHOOD_8
    lambda_ssim: float = 0.4
    lambda_edge: float = 0.3
    seed: int = 0
    disable_fso: bool = False
    disable_sfeb: bool = False

    def validate(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ValueError("stage_widths and blocks_per_stage must have equal length")
        if len(self.stage_widths) < 2:
            raise ValueError("need at least two stages")
        if any(w < 1 for w in self.stage_widths) or any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("stage widths and block counts must be positive")
        if not self.shift_offsets:
            raise ValueError("shift_offsets must be non-empty")
        return self


SMOKE_MODEL = ModelConfig(stage_widths=(8, 16), blocks_per_stage=(1, 1))


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 2000
    batch_size: int = 1
    lr: float = 2e-4
    min_lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    eval_interval: int = 500
    checkpoint_interval: int = 500
    log_interval: int = 50
    augment: bool = True

    def validate(self):
        self.model.validate()
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eval_interval < 1 or self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ValueError("intervals must be positive")
        return self


# -- value codecs ------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fmt_int_list(vals) -> str:
    return ",".join(str(int(v)) for v in vals)


def _fmt_offsets(offs) -> str:
    return ";".join(f"{int(dy)},{int(dx)}" for dy, dx in offs)


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in s.split(",") if part.strip() != "")


def _parse_offsets(s: str) -> Tuple[Tuple[int, int], ...]:
    out = []
    for pair in s.split(";"):
        if pair.strip() == "":
            continue
        dy, dx = pair.split(",")
        out.append((int(dy), int(dx)))
    return tuple(out)


# -- serialization ------------------------------------------------------------


def serialize_model_config(cfg: ModelConfig) -> str:
    lines = [
        "[model]",
        f"in_channels={cfg.in_channels}",
        f"out_channels={cfg.out_channels}",
        f"stage_widths={_fmt_int_list(cfg.stage_widths)}",
        f"blocks_per_stage={_fmt_int_list(cfg.blocks_per_stage)}",
        f"shift_offsets={_fmt_offsets(cfg.shift_offsets)}",
        f"lambda_ssim={_fmt(cfg.lambda_ssim)}",
        f"lambda_edge={_fmt(cfg.lambda_edge)}",
        f"seed={cfg.seed}",
        f"disable_fso={_fmt(cfg.disable_fso)}",
        f"disable_sfeb={_fmt(cfg.disable_sfeb)}",
    ]
    return "\n".join(lines) + "\n"


def serialize_train_config(cfg: TrainConfig) -> str:
    lines = [
        serialize_model_config(cfg.model).rstrip("\n"),
        "",
        "[train]",
        f"steps={cfg.steps}",
        f"batch_size={cfg.batch_size}",
        f"lr={_fmt(cfg.lr)}",
        f"min_lr={_fmt(cfg.min_lr)}",
        f"beta1={_fmt(cfg.beta1)}",
        f"beta2={_fmt(cfg.beta2)}",
        f"weight_decay={_fmt(cfg.weight_decay)}",
        f"adam_eps={_fmt(cfg.adam_eps)}",
        f"eval_interval={cfg.eval_interval}",
        f"checkpoint_interval={cfg.checkpoint_interval}",
        f"log_interval={cfg.log_interval}",
        f"augment={_fmt(cfg.augment)}",
    ]
    return "\n".join(lines) + "\n"


_MODEL_PARSERS = {
    "in_channels": int,
    "out_channels": int,
    "stage_widths": _parse_int_list,
    "blocks_per_stage": _parse_int_list,
    "shift_offsets": _parse_offsets,
    "lambda_ssim": float,
    "lambda_edge": float,
    "seed": int,
    "disable_fso": _parse_bool,
    "disable_sfeb": _parse_bool,
}

_TRAIN_PARSERS = {
    "steps": int,
    "batch_size": int,
    "lr": float,
    "min_lr": float,
    "beta1": float,
    "beta2": float,
    "weight_decay": float,
    "adam_eps": float,
    "eval_interval": int,
    "checkpoint_interval": int,
    "log_interval": int,
    "augment": _parse_bool,
}


def _read_sections(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc}") from exc
    return cp


def _apply(section_items, parsers, label):
    out = {}
    for key, raw in section_items:
        if key not in parsers:
            raise ValueError(f"unknown key {key!r} in [{label}]")
        try:
            out[key] = parsers[key](raw)
        except ValueError as exc:
            raise ValueError(f"bad value for {key!r} in [{label}]: {exc}") from exc
    return out


def parse_model_config(text: str) -> ModelConfig:
    cp = _read_sections(text)
    if "model" not in cp:
        raise ValueError("missing [model] section")
    overrides = _apply(cp.items("model"), _MODEL_PARSERS, "model")
    return replace(ModelConfig(), **overrides).validate()


def parse_train_config(text: str) -> TrainConfig:
    cp = _read_sections(text)
    if "model" not in cp:
        raise ValueError("missing [model] section")
    model = replace(ModelConfig(), **_apply(cp.items("model"), _MODEL_PARSERS, "model"))
    overrides = _apply(cp.items("train"), _TRAIN_PARSERS, "train") if "train" in cp else {}
    return replace(TrainConfig(), model=model, **overrides).validate()


def config_digest(text: str) -> str:
    """Short stable hash of a serialized config, for report metadata."""
    import hashlib

    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
