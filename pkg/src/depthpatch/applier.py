"""Compositing the transformed patch into scene images."""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from depthpatch.errors import DataError
from depthpatch.masks import MaskPair, build_masks, place_patch_geometry
from depthpatch.scene_io import Detection
from depthpatch.transforms import IDENTITY, TransformParams, transform_patch


def apply_patch(image, warped, patch_mask):
    """``(1 - M_p) * image + M_p * warped``, channelwise.

    Works on numpy (H, W, 3) or torch (3, H, W) images; the mask is (H, W).
    Masked pixels are selected rather than blended, so unmasked pixels are
    bit-identical to the input.
    """
    if image.shape != warped.shape:
        raise DataError(f"image {tuple(image.shape)} and warped patch {tuple(warped.shape)} differ")
    if isinstance(image, torch.Tensor):
        m = torch.as_tensor(np.asarray(patch_mask, dtype=bool))
        if m.shape != image.shape[-2:]:
            raise DataError(f"mask {tuple(m.shape)} does not match image {tuple(image.shape)}")
        return torch.where(m[None], warped, image)
    m = np.asarray(patch_mask, dtype=bool)
    if m.shape != image.shape[:2]:
        raise DataError(f"mask {m.shape} does not match image {image.shape}")
    return np.where(m[..., None], warped, image)


def apply_all(image: torch.Tensor, patch: torch.Tensor, detections: list[Detection],
              patch_scale: float = 0.2,
              params_for: Callable[[int], TransformParams] | None = None,
              placement_mode: str = "side") -> tuple[torch.Tensor, list[MaskPair]]:
    """Paste the patch on every detection, in the given (objectness-descending) order.

    ``params_for(k)`` supplies the transformation for detection ``k``; identity
    when omitted. Later detections overwrite earlier ones where patches overlap.
    """
    h, w = image.shape[-2:]
    out = image
    masks = []
    for k, det in enumerate(detections):
        placement = place_patch_geometry(det, patch_scale, (h, w), placement_mode)
        params = params_for(k) if params_for is not None else IDENTITY
        warped, footprint = transform_patch(patch, params, placement)
        out = apply_patch(out, warped, footprint)
        masks.append(build_masks((h, w), det, placement, footprint, k))
    return out, masks
