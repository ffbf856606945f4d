"""Figures and tables: 3-panel disparity renders and aligned text/JSON tables."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from matplotlib import colormaps

from depthpatch.evaluation import format_table
from depthpatch.scene_io import write_image

# perceptually uniform, luminance rises monotonically from 0 (dark) to 1 (bright)
DISPARITY_CMAP = "magma"


def colorize(disparity: np.ndarray, cmap: str = DISPARITY_CMAP) -> np.ndarray:
    """Map disparity in [0, 1] to RGB in [0, 1] with a fixed colormap (no per-image rescaling)."""
    d = np.clip(np.asarray(disparity, dtype=np.float64), 0.0, 1.0)
    return colormaps[cmap](d)[..., :3]


def three_panel(image: np.ndarray, d_benign: np.ndarray, d_adv: np.ndarray) -> np.ndarray:
    """Input | benign disparity | adversarial disparity, side by side (H, 3W, 3)."""
    if not (image.shape[:2] == d_benign.shape == d_adv.shape):
        raise ValueError("image and disparity maps must share H, W")
    return np.concatenate([np.clip(image, 0, 1), colorize(d_benign), colorize(d_adv)], axis=1)


def render_scene(model, scene, adv_image: np.ndarray | None, path) -> np.ndarray:
    """Write the 3-panel figure for one scene; with no adversarial image the last two panels match."""
    d = model.predict(scene.image)
    d_adv = d if adv_image is None else model.predict(adv_image)
    panel = three_panel(adv_image if adv_image is not None else scene.image, d, d_adv)
    write_image(panel, path)
    return panel


def write_table(name: str, headers, rows, out_dir, meta: dict | None = None) -> str:
    """Emit a table as aligned text (returned and saved) and as JSON records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = format_table(headers, [[_fmt(v) for v in r] for r in rows])
    (out_dir / f"{name}.txt").write_text(text + "\n")
    records = [dict(zip(headers, r)) for r in rows]
    (out_dir / f"{name}.json").write_text(json.dumps({"rows": records, **(meta or {})}, indent=2))
    return text


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)
