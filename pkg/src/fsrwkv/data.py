"""Synthetic paired-image corpus, augmentation, and tensor/image file I/O.

Targets are procedurally generated "anatomy-like" images: soft random
ellipses over a smooth background plus thin high-contrast curves.  The
paired input is a degraded copy (Gaussian blur, contrast squeeze toward
mid-gray, additive noise) whose PSNR against the target is kept inside
[15, 35] dB by resampling degradation parameters.

Files: ``.ten`` is a little-endian float32 tensor container (magic
``FSRT``); PGM (P5) is provided for eyeballing results.  All generation
is keyed by ``SeedSequence([base_seed, split, index, attempt])`` so any
sample can be produced independently and deterministically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .objectives import psnr

TEN_MAGIC = b"FSRT"
TEN_VERSION = 1

TRAIN_SPLIT = 0
TEST_SPLIT = 1


@dataclass(frozen=True)
class DegradeSpec:
    blur_sigma: Tuple[float, float] = (1.0, 2.0)
    gamma: Tuple[float, float] = (0.6, 0.9)
    noise_sigma: Tuple[float, float] = (0.01, 0.03)

    def validate(self):
        for name, (lo, hi) in (
            ("blur_sigma", self.blur_sigma),
            ("gamma", self.gamma),
            ("noise_sigma", self.noise_sigma),
        ):
            if not (0.0 <= lo <= hi):
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi, got ({lo}, {hi})")
        return self


@dataclass(frozen=True)
class SampleMeta:
    seed: int
    index: int
    blur_sigma: float
    gamma: float
    noise_sigma: float


@dataclass
class PairedSample:
    input: np.ndarray  # [1, H, W] float32 in [0, 1]
    target: np.ndarray  # [1, H, W] float32 in [0, 1]
    meta: Optional[SampleMeta] = None


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# -- image synthesis ----------------------------------------------------------


def _gaussian_blur2d(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; identity for sigma ~ 0."""
    if sigma < 1e-8:
        return img.copy()
    radius = max(1, int(np.ceil(3.0 * sigma)))
    taps = np.exp(-(np.arange(-radius, radius + 1) ** 2) / (2.0 * sigma**2))
    taps /= taps.sum()

    def conv_rows(a):
        padded = np.pad(a, ((0, 0), (radius, radius)), mode="reflect")
        windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1, axis=1)
        return windows @ taps

    out = conv_rows(img)
    out = conv_rows(out.T).T
    return out


def _smooth_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.05, 0.35, size=(max(2, h // 16), max(2, w // 16)))
    reps = (int(np.ceil(h / coarse.shape[0])), int(np.ceil(w / coarse.shape[1])))
    field = np.kron(coarse, np.ones(reps))[:h, :w]
    return _gaussian_blur2d(field, min(h, w) / 12.0)


def _paint_ellipses(rng: np.random.Generator, img: np.ndarray):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    count = int(rng.integers(5, 13))
    for _ in range(count):
        cy = rng.uniform(0.15, 0.85) * h
        cx = rng.uniform(0.15, 0.85) * w
        ay = rng.uniform(0.06, 0.3) * h
        ax = rng.uniform(0.06, 0.3) * w
        theta = rng.uniform(0.0, np.pi)
        intensity = rng.uniform(0.2, 1.0)
        softness = rng.uniform(0.5, 2.0)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        q = (u / ax) ** 2 + (v / ay) ** 2
        z = np.clip((q - 1.0) / (0.1 * softness), -60.0, 60.0)
        mask = 1.0 / (1.0 + np.exp(z))
        img += (intensity - img) * mask


def _draw_curves(rng: np.random.Generator, img: np.ndarray):
    """Thin bright/dark polylines: sharp boundaries the blur must erase."""
    h, w = img.shape
    count = int(rng.integers(2, 5))
    for _ in range(count):
        p0 = rng.uniform(0.1, 0.9, size=2) * (h, w)
        p1 = rng.uniform(0.1, 0.9, size=2) * (h, w)
        p2 = rng.uniform(0.1, 0.9, size=2) * (h, w)
        level = 0.95 if rng.uniform() < 0.5 else 0.05
        t = np.linspace(0.0, 1.0, 4 * (h + w))[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t**2 * p2
        iy = np.clip(np.round(pts[:, 0]).astype(int), 0, h - 1)
        ix = np.clip(np.round(pts[:, 1]).astype(int), 0, w - 1)
        img[iy, ix] = level


def synth_target(seed, h: int, w: int) -> np.ndarray:
    """Deterministic anatomy-like target image, [1, h, w] float32 in [0, 1]."""
    rng = np.random.default_rng(seed)
    img = _smooth_background(rng, h, w)
    _paint_ellipses(rng, img)
    _draw_curves(rng, img)
    np.clip(img, 0.0, 1.0, out=img)
    return img[None].astype(np.float32)


def degrade(target: np.ndarray, spec: DegradeSpec, rng: np.random.Generator):
    """Blur + contrast squeeze + noise; returns (input image, sampled parameters)."""
    spec.validate()
    blur_sigma = float(rng.uniform(*spec.blur_sigma))
    gamma = float(rng.uniform(*spec.gamma))
    noise_sigma = float(rng.uniform(*spec.noise_sigma))

    x = target[0].astype(np.float64)
    x = _gaussian_blur2d(x, blur_sigma)
    if gamma != 1.0:
        x = 0.5 + (x - 0.5) * gamma
    if noise_sigma > 0.0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    np.clip(x, 0.0, 1.0, out=x)
    return x[None].astype(np.float32), (blur_sigma, gamma, noise_sigma)


PSNR_WINDOW_DB = (15.0, 35.0)
_MAX_DEGRADE_ATTEMPTS = 64


def make_pair(base_seed: int, index: int, h: int, w: int, spec: DegradeSpec = DegradeSpec(), split: int = TRAIN_SPLIT) -> PairedSample:
    """Deterministic paired sample with PSNR(input, target) inside the window."""
    target = synth_target(_rng(base_seed, split, index, 0), h, w)
    for attempt in range(_MAX_DEGRADE_ATTEMPTS):
        rng = _rng(base_seed, split, index, 1 + attempt)
        inp, (bs, gm, ns) = degrade(target, spec, rng)
        db = psnr(inp, target)
        if PSNR_WINDOW_DB[0] <= db <= PSNR_WINDOW_DB[1]:
            meta = SampleMeta(seed=base_seed, index=index, blur_sigma=bs, gamma=gm, noise_sigma=ns)
            return PairedSample(input=inp, target=target, meta=meta)
    raise RuntimeError(
        f"could not degrade sample {index} into the {PSNR_WINDOW_DB} dB window"
        f" after {_MAX_DEGRADE_ATTEMPTS} attempts"
    )


# -- augmentation --------------------------------------------------------------


def apply_geometric(pair: PairedSample, flip_h: bool = False, flip_v: bool = False, k_rot: int = 0, crop_origin: Tuple[int, int] = (0, 0), crop_hw: Optional[Tuple[int, int]] = None) -> PairedSample:
    """Apply one geometric transform identically to input and target."""

    def xform(img):
        out = img
        if crop_hw is not None:
            oy, ox = crop_origin
            ch, cw = crop_hw
            if oy < 0 or ox < 0 or oy + ch > img.shape[1] or ox + cw > img.shape[2]:
                raise ValueError("crop window out of bounds")
            out = out[:, oy : oy + ch, ox : ox + cw]
        if flip_h:
            out = out[:, :, ::-1]
        if flip_v:
            out = out[:, ::-1, :]
        if k_rot % 4:
            out = np.rot90(out, k=k_rot % 4, axes=(1, 2))
        return np.ascontiguousarray(out)

    return PairedSample(input=xform(pair.input), target=xform(pair.target), meta=pair.meta)


def mixup(a: PairedSample, b: PairedSample, lam: float) -> PairedSample:
    if a.input.shape != b.input.shape:
        raise ValueError("mixup requires equal shapes")
    lam = float(lam)
    return PairedSample(
        input=(lam * a.input + (1.0 - lam) * b.input).astype(np.float32),
        target=(lam * a.target + (1.0 - lam) * b.target).astype(np.float32),
        meta=a.meta,
    )


def augment(pair: PairedSample, rng: np.random.Generator, other: Optional[PairedSample] = None, crop_hw: Optional[Tuple[int, int]] = None, enable: bool = True) -> PairedSample:
    """Random crop/flips/90-degree rotation, then optional mixup with ``other``."""
    if not enable:
        return pair
    h, w = pair.input.shape[1], pair.input.shape[2]
    origin = (0, 0)
    out_hw = (h, w)
    if crop_hw is not None:
        ch, cw = crop_hw
        if ch > h or cw > w:
            raise ValueError(f"crop {crop_hw} larger than image {h}x{w}")
        origin = (int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)))
        out_hw = (ch, cw)
    flip_h = bool(rng.uniform() < 0.5)
    flip_v = bool(rng.uniform() < 0.5)
    k_rot = int(rng.integers(0, 4)) if out_hw[0] == out_hw[1] else int(rng.integers(0, 2)) * 2
    pair = apply_geometric(pair, flip_h, flip_v, k_rot, origin, crop_hw)
    if other is not None:
        lam = float(rng.beta(0.2, 0.2))
        pair = mixup(pair, other, lam)
    return pair


# -- tensor / image file I/O -----------------------------------------------------


def save_ten(path, arr: np.ndarray):
    arr = np.asarray(arr)
    with open(path, "wb") as fh:
        fh.write(TEN_MAGIC)
        fh.write(struct.pack("<I", TEN_VERSION))
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_ten(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head != TEN_MAGIC:
            raise ValueError(f"not a tensor file (magic {head!r})")
        raw = fh.read(4)
        if len(raw) != 4:
            raise ValueError("truncated tensor file: missing version")
        (version,) = struct.unpack("<I", raw)
        if version != TEN_VERSION:
            raise ValueError(f"unsupported tensor format version {version}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise ValueError("truncated tensor file: missing rank")
        (rank,) = struct.unpack("<I", raw)
        raw = fh.read(4 * rank)
        if len(raw) != 4 * rank:
            raise ValueError(f"truncated tensor file: expected {4 * rank} dim bytes, got {len(raw)}")
        dims = struct.unpack(f"<{rank}I", raw)
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = fh.read(4 * size)
        if len(payload) != 4 * size:
            raise ValueError(f"truncated tensor file: expected {4 * size} payload bytes, got {len(payload)}")
        if fh.read(1):
            raise ValueError("trailing bytes after tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_pgm(path, img: np.ndarray):
    """8-bit binary PGM of a [H, W] or [1, H, W] image in [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected [H, W] or [1, H, W], got shape {img.shape}")
    h, w = img.shape
    quantized = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


# -- dataset directories ----------------------------------------------------------


def split_dir_name(split: int) -> str:
    return {TRAIN_SPLIT: "train", TEST_SPLIT: "test"}[split]


def write_dataset(out_dir, n_train: int, n_test: int, h: int, w: int, base_seed: int, spec: DegradeSpec = DegradeSpec()) -> None:
    out = Path(out_dir)
    for split, count in ((TRAIN_SPLIT, n_train), (TEST_SPLIT, n_test)):
        d = out / split_dir_name(split)
        d.mkdir(parents=True, exist_ok=True)
        for index in range(count):
            pair = make_pair(base_seed, index, h, w, spec, split=split)
            save_ten(d / f"{index:04d}_in.ten", pair.input)
            save_ten(d / f"{index:04d}_gt.ten", pair.target)
    manifest = "\n".join(
        [
            "fsrwkv-dataset v1",
            f"seed={base_seed}",
            f"train={n_train}",
            f"test={n_test}",
            f"height={h}",
            f"width={w}",
            f"blur_sigma={spec.blur_sigma[0]},{spec.blur_sigma[1]}",
            f"gamma={spec.gamma[0]},{spec.gamma[1]}",
            f"noise_sigma={spec.noise_sigma[0]},{spec.noise_sigma[1]}",
        ]
    )
    (out / "manifest.txt").write_text(manifest + "\n", encoding="ascii")


def load_split(data_dir, split: int) -> List[PairedSample]:
    d = Path(data_dir) / split_dir_name(split)
    if not d.is_dir():
        raise FileNotFoundError(f"missing dataset split directory: {d}")
    pairs = []
    for in_path in sorted(d.glob("*_in.ten")):
        gt_path = in_path.with_name(in_path.name.replace("_in.ten", "_gt.ten"))
        if not gt_path.exists():
            raise FileNotFoundError(f"missing target for {in_path.name}")
        pairs.append(PairedSample(input=load_ten(in_path), target=load_ten(gt_path)))
    if not pairs:
        raise FileNotFoundError(f"no samples found in {d}")
    return pairs
