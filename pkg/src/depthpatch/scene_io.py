"""Scenes, annotations, disparity maps and patches on disk, plus a synthetic scene generator.

On-disk dataset layout (one directory)::

    manifest.json        {"ids": [...], "train": [...], "test": [...]}   (optional)
    <id>.png             8-bit RGB image
    <id>.jsonl           one detection per line: {"box": [x0, y0, x1, y1], "class_id": 0, "objectness": 0.9}
    <id>.pfm             optional ground-truth disparity
"""
from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from depthpatch.errors import DataError

MIN_SIDE = 64


@dataclass(frozen=True)
class Detection:
    box: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max (exclusive max)
    class_id: int = 0
    objectness: float = 1.0

    @property
    def width(self) -> int:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> int:
        return self.box[3] - self.box[1]

    @property
    def center(self) -> tuple[float, float]:
        return (self.box[0] + self.box[2]) / 2.0, (self.box[1] + self.box[3]) / 2.0

    def validate(self, width: int, height: int) -> None:
        x0, y0, x1, y1 = self.box
        if x1 <= x0 or y1 <= y0:
            raise DataError(f"degenerate box {self.box}")
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
            raise DataError(f"box {self.box} outside image bounds {width}x{height}")
        if not 0.0 <= self.objectness <= 1.0:
            raise DataError(f"objectness {self.objectness} not in [0, 1]")

    def to_dict(self) -> dict:
        return {"box": list(self.box), "class_id": self.class_id, "objectness": self.objectness}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        box = d["box"]
        if len(box) != 4 or not all(isinstance(v, int) and not isinstance(v, bool) for v in box):
            raise DataError(f"box must be four integers, got {box!r}")
        class_id = d.get("class_id", 0)
        if not isinstance(class_id, int):
            raise DataError(f"class_id must be an integer, got {class_id!r}")
        return cls(tuple(box), class_id, float(d.get("objectness", 1.0)))


@dataclass
class SceneSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    detections: list[Detection]
    id: str
    disparity: np.ndarray | None = None  # ground truth, synthetic scenes only

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"{self.id}: image must be HxWx3, got {img.shape}")
        h, w = img.shape[:2]
        if h < MIN_SIDE or w < MIN_SIDE:
            raise DataError(f"{self.id}: image {w}x{h} smaller than {MIN_SIDE}x{MIN_SIDE}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise DataError(f"{self.id}: pixel values outside [0, 1]")
        for det in self.detections:
            det.validate(w, h)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass
class DatasetSplit:
    train: list[SceneSample]
    test: list[SceneSample]

    def __post_init__(self):
        overlap = {s.id for s in self.train} & {s.id for s in self.test}
        if overlap:
            raise DataError(f"train and test share ids: {sorted(overlap)[:5]}")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 20
    max_size: int = 40
    train_fraction: float = 0.8
    background_disparity: float = 0.1

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# image / disparity files


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(image: np.ndarray, path) -> None:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected HxWx3 image, got {arr.shape}")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def write_disparity(values: np.ndarray, path) -> None:
    """Write a single-channel float map as little-endian PFM (values stored as float32)."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise DataError(f"disparity must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("disparity contains NaN or Inf")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(arr).astype("<f4").tobytes())


def read_disparity(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind == b"Pf":
            channels = 1
        elif kind == b"PF":
            channels = 3
        else:
            raise DataError(f"{path}: not a PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise DataError(f"{path}: malformed PFM dimensions")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise DataError(f"{path}: expected {w * h * channels} floats, found {data.size}")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float32)


# ---------------------------------------------------------------------------
# datasets


def _read_annotations(path: Path, sample_id: str) -> list[Detection]:
    if not path.exists():
        raise DataError(f"missing annotation file for image {sample_id!r}")
    dets = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            dets.append(Detection.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"{path.name}:{lineno}: malformed annotation ({e})") from None
        except DataError as e:
            raise DataError(f"{path.name}:{lineno}: {e}") from None
    return dets


def load_sample(root, sample_id: str) -> SceneSample:
    root = Path(root)
    image = read_image(root / f"{sample_id}.png")
    dets = _read_annotations(root / f"{sample_id}.jsonl", sample_id)
    pfm = root / f"{sample_id}.pfm"
    disparity = read_disparity(pfm).astype(np.float64) if pfm.exists() else None
    try:
        return SceneSample(image, dets, sample_id, disparity)
    except DataError as e:
        raise DataError(f"{sample_id}: {e}") from None


def load_dataset(root, split_spec=None) -> DatasetSplit:
    """Load a dataset directory.

    ``split_spec`` is either a train fraction (first ``round(f * n)`` ids in
    sorted order go to train), a mapping ``{"train": ids, "test": ids}``, or
    None to use the split stored in ``manifest.json``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    manifest = root / "manifest.json"
    stored = json.loads(manifest.read_text()) if manifest.exists() else {}
    ids = sorted(p.stem for p in root.glob("*.png"))
    if not ids:
        raise DataError(f"no PNG images in {root}")

    if split_spec is None:
        if "train" in stored:
            split_spec = {"train": stored["train"], "test": stored["test"]}
        else:
            split_spec = 0.8
    if isinstance(split_spec, (int, float)):
        if not 0.0 <= split_spec <= 1.0:
            raise DataError(f"split fraction {split_spec} not in [0, 1]")
        n_train = int(round(split_spec * len(ids)))
        train_ids, test_ids = ids[:n_train], ids[n_train:]
    else:
        train_ids, test_ids = list(split_spec["train"]), list(split_spec["test"])
        missing = [i for i in train_ids + test_ids if i not in set(ids)]
        if missing:
            raise DataError(f"split names unknown image ids: {missing[:5]}")
    return DatasetSplit(
        [load_sample(root, i) for i in train_ids],
        [load_sample(root, i) for i in test_ids],
    )


def save_dataset(split: DatasetSplit, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in split.train + split.test:
        write_image(s.image, root / f"{s.id}.png")
        with open(root / f"{s.id}.jsonl", "w") as f:
            for d in s.detections:
                f.write(json.dumps(d.to_dict()) + "\n")
        if s.disparity is not None:
            write_disparity(s.disparity, root / f"{s.id}.pfm")
    manifest = {
        "ids": [s.id for s in split.train + split.test],
        "train": [s.id for s in split.train],
        "test": [s.id for s in split.test],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


# ---------------------------------------------------------------------------
# synthetic scenes


def object_disparity(width: int, height: int, spec: SceneSpec) -> float:
    """Ground-truth disparity of a synthetic object: bigger objects are closer."""
    max_area = spec.max_size * spec.max_size
    return float(np.clip(0.2 + 0.6 * (width * height) / max_area, 0.0, 1.0))


def _textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.6, size=3)
    noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=(h, w)), sigma=2.0)
    noise *= 0.08 / (noise.std() + 1e-12)
    fine = rng.normal(0.0, 0.02, size=(h, w, 3))
    return np.clip(base[None, None, :] + noise[:, :, None] + fine, 0.0, 1.0)


def _distinct_colors(rng: np.random.Generator, k: int) -> list[np.ndarray]:
    hues = (rng.uniform() + np.arange(k) / k + rng.uniform(-0.05, 0.05, size=k)) % 1.0
    cols = []
    for hue in hues:
        s = rng.uniform(0.7, 1.0)
        v = rng.uniform(0.75, 1.0)
        cols.append(np.array(colorsys.hsv_to_rgb(hue, s, v)))
    return cols


def _boxes_overlap(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def _make_scene(rng: np.random.Generator, spec: SceneSpec, sample_id: str) -> SceneSample:
    h, w = spec.height, spec.width
    image = _textured_background(rng, h, w)
    disparity = np.full((h, w), spec.background_disparity)
    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes = []
    for _ in range(k):
        for _attempt in range(50):
            bw = int(rng.integers(spec.min_size, spec.max_size + 1))
            bh = int(rng.integers(spec.min_size, spec.max_size + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            box = (x0, y0, x0 + bw, y0 + bh)
            if not any(_boxes_overlap(box, b) for b in boxes):
                break
        if boxes and any(_boxes_overlap(box, b) for b in boxes):
            continue  # no room left; keep the objects already placed
        boxes.append(box)
    dets = []
    for box, color in zip(boxes, _distinct_colors(rng, len(boxes))):
        x0, y0, x1, y1 = box
        shade = rng.normal(0.0, 0.03, size=(y1 - y0, x1 - x0, 1))
        image[y0:y1, x0:x1] = np.clip(color[None, None, :] + shade, 0.0, 1.0)
        disparity[y0:y1, x0:x1] = object_disparity(x1 - x0, y1 - y0, spec)
        dets.append(Detection(box, 0, 1.0))
    return SceneSample(image, dets, sample_id, disparity)


def generate_synthetic_scenes(n: int, seed: int, spec: SceneSpec | None = None) -> DatasetSplit:
    """Deterministic rectangle-world scenes with exact boxes and ground-truth disparity."""
    spec = spec or SceneSpec()
    if spec.max_size > min(spec.height, spec.width) or spec.min_size > spec.max_size or spec.min_size < 1:
        raise DataError(
            f"object size range [{spec.min_size}, {spec.max_size}] does not fit a "
            f"{spec.width}x{spec.height} image"
        )
    if spec.min_objects < 1 or spec.max_objects < spec.min_objects:
        raise DataError(f"bad object count range [{spec.min_objects}, {spec.max_objects}]")
    rng = np.random.default_rng(seed)
    samples = [_make_scene(rng, spec, f"syn{seed}_{i:05d}") for i in range(n)]
    n_train = int(round(spec.train_fraction * n))
    return DatasetSplit(samples[:n_train], samples[n_train:])


def artifact_root() -> Path:
    return Path(os.environ.get("DEPTHPATCH_ROOT", "artifacts"))
