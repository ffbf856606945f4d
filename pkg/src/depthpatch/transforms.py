"""Random physical-style transformations of the patch, differentiable in the patch pixels.

Pipeline (order is part of the contract): contrast, brightness, additive noise,
clamp to [0, 1]; resample to the jittered placement size; rotate about the
placement centre with bilinear sampling; paste; optional occlusion cutout.

Patches are torch tensors of shape (3, S, S); warped outputs are (3, H, W).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from depthpatch.errors import ConfigError, DataError
from depthpatch.masks import PlacementRect

OCCLUSION_FILL = 0.5


@dataclass(frozen=True)
class TransformRanges:
    rotation_deg: float = 20.0  # symmetric, +/-
    scale_jitter: tuple[float, float] = (0.9, 1.1)
    noise: float = 0.1  # symmetric, +/-
    contrast: tuple[float, float] = (0.8, 1.2)
    brightness: float = 0.1  # symmetric, +/-
    occlusion: bool = False
    occlusion_max_fraction: float = 0.1
    contrast_mode: str = "multiplicative"  # or "mean_anchored"

    def __post_init__(self):
        if self.rotation_deg < 0 or self.noise < 0 or self.brightness < 0:
            raise ConfigError("transforms: symmetric ranges must be non-negative")
        for name in ("scale_jitter", "contrast"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ConfigError(f"transforms.{name} must be an increasing positive pair, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not 0.0 < self.occlusion_max_fraction <= 1.0:
            raise ConfigError("transforms.occlusion_max_fraction must be in (0, 1]")
        if self.contrast_mode not in ("multiplicative", "mean_anchored"):
            raise ConfigError(f"transforms.contrast_mode {self.contrast_mode!r} is not supported")

    @classmethod
    def identity(cls) -> "TransformRanges":
        return cls(rotation_deg=0.0, scale_jitter=(1.0, 1.0), noise=0.0,
                   contrast=(1.0, 1.0), brightness=0.0, occlusion=False)


@dataclass(frozen=True, eq=False)
class TransformParams:
    rotation_deg: float = 0.0
    scale_jitter: float = 1.0
    noise: np.ndarray | None = None  # S x S x 3
    contrast: float = 1.0
    brightness: float = 0.0
    occlusion_rect: tuple[float, float, float, float] | None = None  # u0, v0, u1, v1 in patch fractions
    seed: int | None = None
    contrast_mode: str = "multiplicative"

    def __eq__(self, other):
        if not isinstance(other, TransformParams):
            return NotImplemented
        if (self.noise is None) != (other.noise is None):
            return False
        if self.noise is not None and not np.array_equal(self.noise, other.noise):
            return False
        fields = ("rotation_deg", "scale_jitter", "contrast", "brightness",
                  "occlusion_rect", "seed", "contrast_mode")
        return all(getattr(self, f) == getattr(other, f) for f in fields)

    __hash__ = None


IDENTITY = TransformParams()


def sample_params(rng_seed: int, ranges: TransformRanges, patch_side: int) -> TransformParams:
    rng = np.random.default_rng(rng_seed)
    rot = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)
    jitter = rng.uniform(*ranges.scale_jitter)
    contrast = rng.uniform(*ranges.contrast)
    brightness = rng.uniform(-ranges.brightness, ranges.brightness)
    noise = rng.uniform(-ranges.noise, ranges.noise, size=(patch_side, patch_side, 3)) if ranges.noise > 0 else None
    occ = None
    if ranges.occlusion:
        frac = rng.uniform(0.0, ranges.occlusion_max_fraction)
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        w = min(1.0, math.sqrt(frac * aspect))
        h = min(1.0, frac / w) if w > 0 else 0.0
        u0 = rng.uniform(0.0, 1.0 - w)
        v0 = rng.uniform(0.0, 1.0 - h)
        occ = (u0, v0, u0 + w, v0 + h)
    return TransformParams(float(rot), float(jitter), noise, float(contrast), float(brightness),
                           occ, rng_seed, ranges.contrast_mode)


def color_transform(patch: torch.Tensor, params: TransformParams) -> torch.Tensor:
    if params.contrast_mode == "mean_anchored":
        mean = patch.mean(dim=(1, 2), keepdim=True)
        x = (patch - mean) * params.contrast + mean
    else:
        x = patch * params.contrast
    x = x + params.brightness
    if params.noise is not None:
        noise = torch.as_tensor(np.ascontiguousarray(params.noise.transpose(2, 0, 1)), dtype=patch.dtype)
        x = x + noise
    return x.clamp(0.0, 1.0)


def _resize(x: torch.Tensor, n: int) -> torch.Tensor:
    s = x.shape[-1]
    if n == s:
        return x
    if n < s:
        return F.adaptive_avg_pool2d(x[None], n)[0]
    return F.interpolate(x[None], size=(n, n), mode="bilinear", align_corners=False)[0]


def transform_patch(patch: torch.Tensor, params: TransformParams,
                    placement: PlacementRect) -> tuple[torch.Tensor, np.ndarray]:
    """Render the transformed patch at ``placement``.

    Returns the (3, H, W) warped image (zero outside the footprint) and the
    boolean footprint of pixels that received patch content.
    """
    h, w = placement.image_shape
    x = color_transform(patch, params)

    length = placement.side * params.scale_jitter
    n = max(1, int(round(length)))
    x = _resize(x, n)

    theta = math.radians(params.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cx, cy = placement.center
    ext = 0.5 * length * (abs(cos_t) + abs(sin_t))
    ylo, yhi = max(0, int(math.floor(cy - ext))), min(h, int(math.ceil(cy + ext)) + 1)
    xlo, xhi = max(0, int(math.floor(cx - ext))), min(w, int(math.ceil(cx + ext)) + 1)
    if ylo >= yhi or xlo >= xhi:
        raise DataError("transformed patch falls entirely outside the image")

    ys, xs = np.mgrid[ylo:yhi, xlo:xhi]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    ratio = n / length
    pu = (cos_t * dx + sin_t * dy) * ratio + n / 2.0
    pv = (-sin_t * dx + cos_t * dy) * ratio + n / 2.0
    inside = (pu >= 0) & (pu < n) & (pv >= 0) & (pv < n)
    if not inside.any():
        raise DataError("transformed patch has an empty footprint")

    py, px = ys[inside], xs[inside]
    su, sv = pu[inside] - 0.5, pv[inside] - 0.5
    u0 = np.floor(su)
    v0 = np.floor(sv)
    fu, fv = su - u0, sv - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)
    iu0, iu1 = np.clip(u0, 0, n - 1), np.clip(u0 + 1, 0, n - 1)
    iv0, iv1 = np.clip(v0, 0, n - 1), np.clip(v0 + 1, 0, n - 1)

    flat = x.reshape(3, n * n)

    def tap(iv, iu):
        return flat[:, torch.from_numpy(iv * n + iu)]

    wt = lambda a: torch.as_tensor(a, dtype=x.dtype)
    vals = (tap(iv0, iu0) * wt((1 - fu) * (1 - fv)) + tap(iv0, iu1) * wt(fu * (1 - fv))
            + tap(iv1, iu0) * wt((1 - fu) * fv) + tap(iv1, iu1) * wt(fu * fv))

    if params.occlusion_rect is not None:
        a0, b0, a1, b1 = params.occlusion_rect
        fu_rel, fv_rel = pu[inside] / n, pv[inside] / n
        occ = (fu_rel >= a0) & (fu_rel < a1) & (fv_rel >= b0) & (fv_rel < b1)
        vals = torch.where(torch.from_numpy(occ)[None], torch.full_like(vals, OCCLUSION_FILL), vals)

    footprint = np.zeros((h, w), dtype=bool)
    footprint[py, px] = True
    warped = patch.new_zeros((3, h * w))
    flat_idx = torch.from_numpy(py * w + px)
    warped = warped.index_copy(1, flat_idx, vals)
    return warped.reshape(3, h, w), footprint
