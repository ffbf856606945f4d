"""Detection filtering, patch placement and the patch / focus masks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from depthpatch.errors import ConfigError, DataError
from depthpatch.scene_io import Detection, SceneSample


@dataclass(frozen=True)
class DetectorConfig:
    objectness_threshold: float = 0.5
    nms_iou_threshold: float = 0.4
    max_detections: int = 14
    target_classes: frozenset[int] | None = None  # None keeps every class

    def __post_init__(self):
        for name in ("objectness_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"detector.{name} must be in (0, 1), got {v}")
        if self.max_detections < 1:
            raise ConfigError(f"detector.max_detections must be >= 1, got {self.max_detections}")
        if self.target_classes is not None and not isinstance(self.target_classes, frozenset):
            object.__setattr__(self, "target_classes", frozenset(self.target_classes))


def box_iou(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def filter_detections(raw: list[Detection], cfg: DetectorConfig) -> list[Detection]:
    """Objectness threshold, class filter, greedy NMS, then cap at ``max_detections``."""
    cands = [
        d for d in raw
        if d.objectness >= cfg.objectness_threshold
        and (cfg.target_classes is None or d.class_id in cfg.target_classes)
    ]
    # stable sort keeps input order among equal scores
    cands.sort(key=lambda d: -d.objectness)
    keep: list[Detection] = []
    for d in cands:
        if all(box_iou(d.box, k.box) <= cfg.nms_iou_threshold for k in keep):
            keep.append(d)
            if len(keep) == cfg.max_detections:
                break
    return keep


class AnnotationDetector:
    """Boxes computed offline (e.g. by an external detector) and stored with each scene."""

    def __init__(self, cfg: DetectorConfig | None = None):
        self.cfg = cfg or DetectorConfig()

    def __call__(self, sample: SceneSample) -> list[Detection]:
        return filter_detections(sample.detections, self.cfg)


class OracleDetector:
    """Ground-truth boxes of synthetic scenes, only restricted to the target classes."""

    def __init__(self, cfg: DetectorConfig | None = None):
        self.cfg = cfg or DetectorConfig()

    def __call__(self, sample: SceneSample) -> list[Detection]:
        dets = [d for d in sample.detections
                if self.cfg.target_classes is None or d.class_id in self.cfg.target_classes]
        return sorted(dets, key=lambda d: -d.objectness)[: self.cfg.max_detections]


def make_detector(backend: str, cfg: DetectorConfig):
    if backend == "annotation":
        return AnnotationDetector(cfg)
    if backend == "oracle":
        return OracleDetector(cfg)
    raise ConfigError(f"unknown detector backend {backend!r} (expected 'annotation' or 'oracle')")


@dataclass(frozen=True)
class PlacementRect:
    """Square patch placement; ``x0, y0`` may lie outside the image before clipping."""

    x0: int
    y0: int
    side: int
    image_shape: tuple[int, int]

    @property
    def center(self) -> tuple[float, float]:
        return self.x0 + self.side / 2.0, self.y0 + self.side / 2.0

    @property
    def clipped(self) -> tuple[int, int, int, int]:
        h, w = self.image_shape
        return (max(self.x0, 0), max(self.y0, 0),
                min(self.x0 + self.side, w), min(self.y0 + self.side, h))

    @property
    def visible(self) -> bool:
        x0, y0, x1, y1 = self.clipped
        return x1 > x0 and y1 > y0


def place_patch_geometry(det: Detection, patch_scale: float, image_shape,
                         mode: str = "side") -> PlacementRect:
    """Square of side ``round(scale * min(box_w, box_h))`` centred on the box.

    ``mode="area"`` multiplies the side by ``sqrt(1 / scale)`` so that the patch
    area, rather than its side, is ``scale`` times the short-side square.
    """
    if not 0.0 < patch_scale <= 1.0:
        raise ConfigError(f"patch_scale must be in (0, 1], got {patch_scale}")
    side = round(patch_scale * min(det.width, det.height))
    if mode == "area":
        side = round(side * np.sqrt(1.0 / patch_scale))
    elif mode != "side":
        raise ConfigError(f"unknown placement mode {mode!r}")
    if side < 2:
        raise DataError(f"patch too small for object (side {side} px for box {det.box})")
    cx, cy = det.center
    x0 = int(np.floor(cx - side / 2.0 + 0.5))
    y0 = int(np.floor(cy - side / 2.0 + 0.5))
    return PlacementRect(x0, y0, side, tuple(image_shape[:2]))


@dataclass
class MaskPair:
    patch_mask: np.ndarray  # H x W bool, M_p
    focus_mask: np.ndarray  # H x W bool, M_f
    detection_index: int = 0

    @property
    def ring_mask(self) -> np.ndarray:
        return self.focus_mask & ~self.patch_mask


def box_mask(image_shape, box) -> np.ndarray:
    h, w = image_shape[:2]
    m = np.zeros((h, w), dtype=bool)
    x0, y0, x1, y1 = box
    m[y0:y1, x0:x1] = True
    return m


def build_masks(image_shape, det: Detection, placement: PlacementRect,
                footprint: np.ndarray | None = None, detection_index: int = 0) -> MaskPair:
    focus = box_mask(image_shape, det.box)
    if footprint is None:
        patch = box_mask(image_shape, placement.clipped)
    else:
        patch = np.asarray(footprint, dtype=bool).copy()
    patch &= focus
    return MaskPair(patch, focus, detection_index)
