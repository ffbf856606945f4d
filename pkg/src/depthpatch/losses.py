"""Penalized depth loss, total variation and the total objective.

Depth terms take disparity maps and boolean masks as torch tensors (numpy
arrays are accepted and converted) and return 0-d tensors, so the same code
serves the optimizer and the tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from depthpatch.errors import ConfigError, DataError


@dataclass(frozen=True)
class TargetDepthSpec:
    mode: str = "constant"  # or "scaled_baseline"
    constant_value: float = 0.0
    scale_factor: float = 0.5

    def __post_init__(self):
        if self.mode not in ("constant", "scaled_baseline"):
            raise ConfigError(f"loss.target_depth.mode {self.mode!r} is not supported")
        if not 0.0 <= self.constant_value <= 1.0:
            raise ConfigError(f"loss.target_depth.constant_value must be in [0, 1], got {self.constant_value}")
        if self.scale_factor < 0:
            raise ConfigError("loss.target_depth.scale_factor must be non-negative")

    def target(self, baseline):
        """Target disparity map for a given clean-image disparity."""
        if self.mode == "constant":
            return torch.full_like(torch.as_tensor(baseline), self.constant_value)
        return self.scale_factor * torch.as_tensor(baseline)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.5
    use_d1: bool = True
    use_d2: bool = True
    use_tv: bool = True
    square_mode: str = "scalar_then_square"  # or "per_pixel_square"
    target_depth: TargetDepthSpec = field(default_factory=TargetDepthSpec)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss.alpha and loss.beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.square_mode not in ("scalar_then_square", "per_pixel_square"):
            raise ConfigError(f"loss.square_mode {self.square_mode!r} is not supported")

    def check_attack(self) -> None:
        if not (self.use_d1 or self.use_d2):
            raise ConfigError("loss: at least one of use_d1 / use_d2 must be enabled for an attack")

    @classmethod
    def from_terms(cls, terms, **kw) -> "LossConfig":
        """Build from a set like ``{"d1", "d2", "tv"}``."""
        terms = set(terms)
        unknown = terms - {"d1", "d2", "tv"}
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}")
        return cls(use_d1="d1" in terms, use_d2="d2" in terms, use_tv="tv" in terms, **kw)


def _mask(m, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(m, dtype=bool) if not isinstance(m, torch.Tensor) else m).to(like.dtype)


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return (values * mask).sum() / mask.sum().clamp(min=1.0)


def loss_d1(d_t, d_adv, patch_mask) -> torch.Tensor:
    """Mean ``|d_t - d_adv|`` over pixels covered by the patch."""
    d_adv = torch.as_tensor(d_adv)
    return _masked_mean((torch.as_tensor(d_t) - d_adv).abs(), _mask(patch_mask, d_adv))


def loss_d1_squared_map(d_t, d_adv, patch_mask) -> torch.Tensor:
    d_adv = torch.as_tensor(d_adv)
    return _masked_mean((torch.as_tensor(d_t) - d_adv) ** 2, _mask(patch_mask, d_adv))


def loss_d2(d_t, d_adv, focus_mask, patch_mask) -> torch.Tensor:
    """Mean ``|d_t - d_adv|`` over the focus region not covered by the patch."""
    d_adv = torch.as_tensor(d_adv)
    mf, mp = _mask(focus_mask, d_adv), _mask(patch_mask, d_adv)
    if bool((mp > mf).any()):
        raise DataError("patch mask is not contained in the focus mask")
    return _masked_mean((torch.as_tensor(d_t) - d_adv).abs(), mf - mp)


def loss_depth(l1, l2, cfg: LossConfig, l1_sq=None):
    """``l1**2 + l2``; with ``per_pixel_square`` the caller passes the mean of squares as ``l1_sq``."""
    if cfg.square_mode == "per_pixel_square":
        if l1_sq is None:
            raise ValueError("per_pixel_square mode needs the squared d1 map mean (l1_sq)")
        first = l1_sq
    else:
        first = l1 * l1
    total = 0.0
    if cfg.use_d1:
        total = total + first
    if cfg.use_d2:
        total = total + l2
    return total


def detection_depth_loss(d_t, d_adv, masks, cfg: LossConfig) -> torch.Tensor:
    """L_depth for one detection's :class:`~depthpatch.masks.MaskPair`."""
    l1 = loss_d1(d_t, d_adv, masks.patch_mask)
    l2 = loss_d2(d_t, d_adv, masks.focus_mask, masks.patch_mask)
    l1_sq = loss_d1_squared_map(d_t, d_adv, masks.patch_mask) if cfg.square_mode == "per_pixel_square" else None
    return loss_depth(l1, l2, cfg, l1_sq)


def loss_tv(patch) -> torch.Tensor:
    """Isotropic total variation of a (C, S, S) patch, summed over channels, per pixel.

    Differences past the last row / column are taken as zero.
    """
    p = torch.as_tensor(patch)
    if p.shape[-1] < 2 or p.shape[-2] < 2:
        raise ValueError("total variation needs a patch of at least 2x2")
    down = torch.zeros_like(p)
    right = torch.zeros_like(p)
    down[..., :-1, :] = p[..., 1:, :] - p[..., :-1, :]
    right[..., :, :-1] = p[..., :, 1:] - p[..., :, :-1]
    sq = down * down + right * right
    nz = sq > 0
    # sqrt has an infinite slope at 0; flat pixels contribute 0 with zero gradient
    mag = torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return mag.sum() / (p.shape[-1] * p.shape[-2])


def loss_total(depth_terms, patch, cfg: LossConfig) -> torch.Tensor:
    """``alpha * mean(depth_terms) + beta * L_tv``."""
    if len(depth_terms) == 0:
        raise DataError("loss_total needs at least one detection")
    depth = torch.stack([torch.as_tensor(t) for t in depth_terms]).mean()
    total = cfg.alpha * depth
    if cfg.use_tv:
        total = total + cfg.beta * loss_tv(patch)
    return total
