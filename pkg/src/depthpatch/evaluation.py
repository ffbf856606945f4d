"""Attack metrics (mean depth error, affected-region ratio, MSE) and input-transformation defenses."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from depthpatch.applier import apply_all
from depthpatch.errors import ConfigError, DataError
from depthpatch.masks import DetectorConfig, make_detector, place_patch_geometry
from depthpatch.models import to_chw

AFFECTED_THRESHOLD = 0.1

# sweep values used in the defense tables
DEFENSE_SWEEPS = {
    "jpeg": (90, 70, 50, 30),
    "median_blur": (5, 10, 15, 20),
    "gaussian_noise": (0.01, 0.02, 0.05, 0.1),
}


def _focus(d, m):
    m = np.asarray(m, dtype=bool)
    if m.shape != np.shape(d):
        raise DataError(f"mask {m.shape} does not match disparity {np.shape(d)}")
    if not m.any():
        raise DataError("empty focus mask")
    return m


def compute_Ed(d, d_adv, focus_mask) -> float:
    """Mean absolute disparity change inside the focus mask."""
    d, d_adv = np.asarray(d, dtype=np.float64), np.asarray(d_adv, dtype=np.float64)
    m = _focus(d, focus_mask)
    return float(np.abs(d - d_adv)[m].sum() / m.sum())


def compute_Ra(d, d_adv, focus_mask, threshold: float = AFFECTED_THRESHOLD) -> float:
    """Fraction of focus pixels whose disparity moved by strictly more than ``threshold``."""
    d, d_adv = np.asarray(d, dtype=np.float64), np.asarray(d_adv, dtype=np.float64)
    m = _focus(d, focus_mask)
    return float((np.abs(d - d_adv)[m] > threshold).sum() / m.sum())


def compute_MSE(d, d_adv) -> float:
    d, d_adv = np.asarray(d, dtype=np.float64), np.asarray(d_adv, dtype=np.float64)
    if d.shape != d_adv.shape:
        raise DataError(f"disparity shapes differ: {d.shape} vs {d_adv.shape}")
    return float(np.mean((d_adv - d) ** 2))


@dataclass(frozen=True)
class DefenseSpec:
    kind: str
    parameter: float
    seed: int = 0

    def __post_init__(self):
        if self.kind == "jpeg":
            if int(self.parameter) != self.parameter or not 1 <= self.parameter <= 100:
                raise ConfigError(f"jpeg quality must be an integer in [1, 100], got {self.parameter}")
        elif self.kind == "median_blur":
            if int(self.parameter) != self.parameter or self.parameter < 1:
                raise ConfigError(f"median_blur kernel must be a positive integer, got {self.parameter}")
        elif self.kind == "gaussian_noise":
            if self.parameter < 0:
                raise ConfigError(f"gaussian_noise sigma must be >= 0, got {self.parameter}")
        else:
            raise ConfigError(f"unsupported defense {self.kind!r}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "DefenseSpec":
        """``"jpeg:90"``, ``"median_blur:5"``, ``"gaussian_noise:0.05"``."""
        try:
            kind, param = text.split(":")
            value = float(param)
        except ValueError:
            raise ConfigError(f"defense must look like kind:param, got {text!r}") from None
        return cls(kind, value, seed)

    @property
    def label(self) -> str:
        p = self.parameter
        return f"{self.kind}:{int(p) if self.kind != 'gaussian_noise' else p:g}"


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="JPEG", quality=int(quality), subsampling=2)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def median_blur(image: np.ndarray, k: int) -> np.ndarray:
    # for even k the window covers offsets -k/2 .. k/2 - 1 around each pixel
    return ndimage.median_filter(image, size=(int(k), int(k), 1), mode="reflect")


def apply_defense(image: np.ndarray, spec: DefenseSpec, rng_seed: int | None = None) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if spec.kind == "jpeg":
        return jpeg_roundtrip(image, int(spec.parameter))
    if spec.kind == "median_blur":
        return median_blur(image, int(spec.parameter))
    if spec.kind == "gaussian_noise":
        if spec.parameter == 0:
            return image.copy()
        rng = np.random.default_rng(spec.seed if rng_seed is None else rng_seed)
        return np.clip(image + rng.normal(0.0, spec.parameter, size=image.shape), 0.0, 1.0)
    raise ConfigError(f"unsupported defense {spec.kind!r}")


@dataclass
class MetricsReport:
    e_d: float
    r_a: float
    mse: float
    n_scenes: int
    e_d_ring: float = 0.0
    per_scene: list[dict] = field(default_factory=list)
    label: str = "model"

    def __post_init__(self):
        for name in ("e_d", "r_a", "mse"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        return format_table(["Model", "MSE", "E_d", "R_a"],
                            [[self.label, f"{self.mse:.3f}", f"{self.e_d:.3f}", f"{self.r_a:.3f}"]])


REPORT_SCHEMA = {
    "type": "object",
    "required": ["e_d", "r_a", "mse", "n_scenes", "per_scene"],
    "properties": {
        "e_d": {"type": "number", "minimum": 0, "maximum": 1},
        "r_a": {"type": "number", "minimum": 0, "maximum": 1},
        "mse": {"type": "number", "minimum": 0, "maximum": 1},
        "e_d_ring": {"type": "number", "minimum": 0, "maximum": 1},
        "n_scenes": {"type": "integer", "minimum": 0},
        "label": {"type": "string"},
        "per_scene": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "e_d", "r_a", "mse"],
                "properties": {"id": {"type": "string"}, "e_d": {"type": "number"},
                               "r_a": {"type": "number"}, "mse": {"type": "number"}},
            },
        },
    },
}


def format_table(headers, rows) -> str:
    cols = [headers] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cols) for i in range(len(headers))]
    line = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([rule, line(headers), rule] + [line(r) for r in cols[1:]] + [rule])


# ---------------------------------------------------------------------------
# scene-level evaluation


def _predict(model, image: np.ndarray) -> np.ndarray:
    dtype = next((p.dtype for p in model.parameters()), torch.float64)
    with torch.no_grad():
        return model(to_chw(image, dtype)[None])[0].double().numpy()


def _usable(detections, patch_scale, shape, mode):
    out = []
    for d in detections:
        try:
            place_patch_geometry(d, patch_scale, shape, mode)
        except DataError:
            continue
        out.append(d)
    return out


def patched_scenes(scenes, patch: np.ndarray, patch_scale: float = 0.2,
                   detector_cfg: DetectorConfig | None = None, backend: str = "annotation",
                   placement_mode: str = "side"):
    """Yield ``(scene, adversarial image, masks)`` with identity transforms at test time."""
    detector = make_detector(backend, detector_cfg or DetectorConfig())
    p = torch.as_tensor(np.ascontiguousarray(np.asarray(patch).transpose(2, 0, 1)), dtype=torch.float64)
    for s in scenes:
        dets = _usable(detector(s), patch_scale, s.shape, placement_mode)
        if not dets:
            continue
        adv, masks = apply_all(to_chw(s.image, torch.float64), p, dets, patch_scale, None, placement_mode)
        yield s, adv.numpy().transpose(1, 2, 0), masks


def evaluate_patch(model, scenes, patch: np.ndarray, patch_scale: float = 0.2,
                   detector_cfg: DetectorConfig | None = None, backend: str = "annotation",
                   placement_mode: str = "side", threshold: float = AFFECTED_THRESHOLD,
                   label: str = "model") -> MetricsReport:
    """Per-detection metrics, averaged per scene, then an unweighted mean over scenes."""
    rows = []
    for s, adv, masks in patched_scenes(scenes, patch, patch_scale, detector_cfg, backend, placement_mode):
        d = _predict(model, s.image)
        d_adv = _predict(model, adv)
        e = [compute_Ed(d, d_adv, m.focus_mask) for m in masks]
        r = [compute_Ra(d, d_adv, m.focus_mask, threshold) for m in masks]
        ring = [compute_Ed(d, d_adv, m.ring_mask) for m in masks if m.ring_mask.any()]
        rows.append({"id": s.id, "e_d": float(np.mean(e)), "r_a": float(np.mean(r)),
                     "mse": compute_MSE(d, d_adv), "e_d_ring": float(np.mean(ring)) if ring else 0.0,
                     "n_detections": len(masks)})
    if not rows:
        raise DataError("no scene has a usable target detection")
    mean = lambda k: float(np.mean([r[k] for r in rows]))
    return MetricsReport(mean("e_d"), mean("r_a"), mean("mse"), len(rows), mean("e_d_ring"), rows, label)


def evaluate_defended(model, scenes, patch: np.ndarray, spec: DefenseSpec, patch_scale: float = 0.2,
                      detector_cfg: DetectorConfig | None = None, backend: str = "annotation",
                      placement_mode: str = "side") -> tuple[float, float]:
    """Mean depth error with the defense applied to adversarial (E_d) and benign (E_dB) inputs.

    Both are measured against the undefended clean-image disparity.
    """
    e_adv, e_benign = [], []
    for i, (s, adv, masks) in enumerate(patched_scenes(scenes, patch, patch_scale, detector_cfg,
                                                       backend, placement_mode)):
        seed = spec.seed * 1_000_003 + i
        d = _predict(model, s.image)
        d_def_adv = _predict(model, apply_defense(adv, spec, seed))
        d_def_clean = _predict(model, apply_defense(s.image, spec, seed))
        e_adv.append(np.mean([compute_Ed(d, d_def_adv, m.focus_mask) for m in masks]))
        e_benign.append(np.mean([compute_Ed(d, d_def_clean, m.focus_mask) for m in masks]))
    if not e_adv:
        raise DataError("no scene has a usable target detection")
    return float(np.mean(e_adv)), float(np.mean(e_benign))
