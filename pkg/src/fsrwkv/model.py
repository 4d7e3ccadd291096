"""U-Net image translator built from FS-RWKV blocks.

Encoder stages run token blocks at progressively halved resolution;
skip connections pass through the structural-fidelity enhancement block
(or straight through when disabled); the decoder upsamples, fuses the
skip, and runs its own block stack.  A sigmoid head bounds outputs to
the [0, 1] metric domain.

Checkpoints are a self-describing binary: magic ``FSRW``, a format
version, the serialized model config, then one record per parameter
(name, rank, dims, little-endian float32 payload).  Round-trips are
byte-exact.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import engine
from .block import (
    BlockParams,
    fsrwkv_block,
    init_block_params,
    map_to_tokens,
    tokens_to_map,
)
from .config import ModelConfig, parse_model_config, serialize_model_config
from .engine import NumericalError, Tensor
from .layers import Conv2d, make_conv
from .sfeb import SfebParams, init_sfeb_params, sfeb_forward
from .shift import UNI_OFFSET, ShiftSpec, build_shift_spec
from .wkv import TokenSeq

CHECKPOINT_MAGIC = b"FSRW"
CHECKPOINT_VERSION = 1


@dataclass
class FsRwkvModel:
    config: ModelConfig
    specs: List[ShiftSpec]
    embed: Conv2d
    encoder: List[List[BlockParams]]
    downs: List[Conv2d]
    sfebs: List[Optional[SfebParams]]
    ups: List[Conv2d]
    fuse1: List[Conv2d]
    fuse3: List[Conv2d]
    decoder: List[List[BlockParams]]
    head: Conv2d


def build_model(cfg: ModelConfig, dtype=np.float32) -> FsRwkvModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    widths = cfg.stage_widths
    stages = len(widths)
    offsets = UNI_OFFSET if cfg.disable_fso else cfg.shift_offsets
    specs = [build_shift_spec(w, offsets) for w in widths]

    embed = make_conv(rng, cfg.in_channels, widths[0], 3, dtype=dtype)
    encoder = [
        [init_block_params(widths[i], rng, dtype, use_fso=not cfg.disable_fso) for _ in range(cfg.blocks_per_stage[i])]
        for i in range(stages)
    ]
    downs = [make_conv(rng, widths[i], widths[i + 1], 3, stride=2, dtype=dtype) for i in range(stages - 1)]
    sfebs: List[Optional[SfebParams]] = [
        None if cfg.disable_sfeb else init_sfeb_params(rng, widths[i], dtype=dtype) for i in range(stages - 1)
    ]
    ups = [make_conv(rng, widths[i + 1], widths[i], 3, dtype=dtype) for i in range(stages - 1)]
    fuse1 = [make_conv(rng, 2 * widths[i], widths[i], 1, dtype=dtype) for i in range(stages - 1)]
    fuse3 = [make_conv(rng, widths[i], widths[i], 3, dtype=dtype) for i in range(stages - 1)]
    decoder = [
        [init_block_params(widths[i], rng, dtype, use_fso=not cfg.disable_fso) for _ in range(cfg.blocks_per_stage[i])]
        for i in range(stages - 1)
    ]
    head = make_conv(rng, widths[0], cfg.out_channels, 3, dtype=dtype)

    return FsRwkvModel(
        config=cfg,
        specs=specs,
        embed=embed,
        encoder=encoder,
        downs=downs,
        sfebs=sfebs,
        ups=ups,
        fuse1=fuse1,
        fuse3=fuse3,
        decoder=decoder,
        head=head,
    )


def ablation_variant(cfg: ModelConfig, disable_fso: bool = False, disable_sfeb: bool = False, dtype=np.float32) -> FsRwkvModel:
    variant = dataclasses.replace(cfg, disable_fso=disable_fso, disable_sfeb=disable_sfeb)
    return build_model(variant, dtype=dtype)


# -- parameter registry -------------------------------------------------------


def named_parameters(model: FsRwkvModel) -> List[Tuple[str, Tensor]]:
    """Deterministic (name, tensor) list in structural order."""
    out: List[Tuple[str, Tensor]] = []

    def walk(obj, prefix):
        if isinstance(obj, Tensor):
            if obj.requires_grad:
                out.append((prefix, obj))
            return
        if isinstance(obj, ShiftSpec) or isinstance(obj, (ModelConfig, np.ndarray, int, float, str, bool, type(None))):
            return
        if dataclasses.is_dataclass(obj):
            for f in dataclasses.fields(obj):
                walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
            return
        if isinstance(obj, (list, tuple)):
            for i, item in enumerate(obj):
                walk(item, f"{prefix}.{i}")
            return

    walk(model, "")
    names = [n for n, _ in out]
    assert len(set(names)) == len(names), "parameter names must be unique"
    return out


def parameter_count(model: FsRwkvModel) -> int:
    return sum(t.data.size for _, t in named_parameters(model))


# -- forward -------------------------------------------------------------------


def _check_finite(t: Tensor, layer: str):
    if not np.isfinite(t.data).all():
        raise NumericalError(f"non-finite activations after {layer}")


def _validate_input(model: FsRwkvModel, x: Tensor):
    cfg = model.config
    if x.data.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] input, got shape {x.data.shape}")
    if x.data.shape[1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {x.data.shape[1]}")
    stages = len(cfg.stage_widths)
    h, w = x.data.shape[2], x.data.shape[3]
    divisor = 2 ** (stages - 1)
    if h % divisor or w % divisor or (h // divisor) % 2 or (w // divisor) % 2:
        raise ValueError(
            f"input {h}x{w} must be divisible by {divisor} with even dims at the deepest stage"
        )


def _run_blocks(t: Tensor, blocks: List[BlockParams], spec: ShiftSpec, label: str) -> Tensor:
    b, c, h, w = t.data.shape
    tok = TokenSeq(map_to_tokens(t), h, w)
    for j, bp in enumerate(blocks):
        tok = fsrwkv_block(tok, bp, spec)
        _check_finite(tok.data, f"{label}.block{j}")
    return tokens_to_map(tok.data, h, w)


def forward(model: FsRwkvModel, x: Tensor) -> Tensor:
    _validate_input(model, x)
    _check_finite(x, "input")
    stages = len(model.config.stage_widths)

    t = model.embed(x)
    _check_finite(t, "embed")

    skips: List[Tensor] = []
    for i in range(stages):
        t = _run_blocks(t, model.encoder[i], model.specs[i], f"encoder.stage{i}")
        if i < stages - 1:
            skips.append(t)
            t = model.downs[i](t)
            _check_finite(t, f"down{i}")

    for i in range(stages - 2, -1, -1):
        t = engine.upsample_nearest2x(t)
        t = model.ups[i](t)
        _check_finite(t, f"up{i}")
        skip = skips[i]
        if model.sfebs[i] is not None:
            skip = sfeb_forward(skip, model.sfebs[i])
            _check_finite(skip, f"sfeb{i}")
        t = engine.concat([t, skip], axis=1)
        t = model.fuse3[i](model.fuse1[i](t))
        _check_finite(t, f"fuse{i}")
        t = _run_blocks(t, model.decoder[i], model.specs[i], f"decoder.stage{i}")

    t = model.head(t)
    out = engine.sigmoid(t)
    _check_finite(out, "head")
    return out


# -- checkpoint I/O --------------------------------------------------------------


def save_checkpoint(path, model: FsRwkvModel):
    cfg_bytes = serialize_model_config(model.config).encode("utf-8")
    params = named_parameters(model)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def read_checkpoint_arrays(path) -> Tuple[ModelConfig, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        cfg = parse_model_config(_read_exact(fh, cfg_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, 4 * size)
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return cfg, arrays


def load_checkpoint(path, dtype=np.float32) -> FsRwkvModel:
    cfg, arrays = read_checkpoint_arrays(path)
    model = build_model(cfg, dtype=dtype)
    params = named_parameters(model)
    names = {n for n, _ in params}
    missing = [n for n, _ in params if n not in arrays]
    extra = [n for n in arrays if n not in names]
    if missing or extra:
        raise ValueError(f"checkpoint/model parameter mismatch: missing {missing[:3]}, extra {extra[:3]}")
    for name, t in params:
        arr = arrays[name]
        if arr.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
        t.data[...] = arr.astype(dtype)
    return model
