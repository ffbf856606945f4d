"""Patch optimization loop: composite, predict, penalized loss, Adam step, clamp."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from depthpatch.applier import apply_all
from depthpatch.config import AttackConfig, config_hash, to_jsonable
from depthpatch.errors import DataError, NumericError
from depthpatch.losses import detection_depth_loss, loss_total, loss_tv
from depthpatch.masks import make_detector, place_patch_geometry
from depthpatch.models import to_chw
from depthpatch.scene_io import DatasetSplit, write_image
from depthpatch.transforms import sample_params

log = logging.getLogger(__name__)

__all__ = ["AttackConfig", "TrainingLog", "train_patch", "save_checkpoint", "resume", "init_patch"]


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    checkpoints: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "checkpoints": {str(k): v for k, v in self.checkpoints.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingLog":
        return cls(list(d.get("epochs", [])), {int(k): v for k, v in d.get("checkpoints", {}).items()})

    def moving_average_violations(self, window: int = 20) -> list[int]:
        """Epochs where the trailing moving average of L_total went up."""
        totals = np.array([e["total"] for e in self.epochs])
        if len(totals) <= window:
            return []
        ma = np.convolve(totals, np.ones(window) / window, mode="valid")
        return [int(i + window) for i in np.nonzero(np.diff(ma) > 0)[0]]


def derive_seed(*parts) -> int:
    h = hashlib.blake2b(":".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def init_patch(cfg: AttackConfig) -> np.ndarray:
    """Seeded uniform initialization, (3, S, S)."""
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(0.0, 1.0, size=(3, cfg.patch_side, cfg.patch_side))


def _dtype(cfg: AttackConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def _model_dtype(model, fallback):
    for p in model.parameters():
        return p.dtype
    return fallback


@dataclass
class _Item:
    id: str
    image: torch.Tensor
    detections: list
    target: torch.Tensor


def _prepare(dataset: DatasetSplit, model, cfg: AttackConfig, dtype) -> list[_Item]:
    detector = make_detector(cfg.detector_backend, cfg.detector)
    items = []
    for s in dataset.train:
        dets = []
        for d in detector(s):
            try:
                place_patch_geometry(d, cfg.patch_scale, s.shape, cfg.placement_mode)
            except DataError as e:
                log.warning("%s: skipping detection %s (%s)", s.id, d.box, e)
                continue
            dets.append(d)
        if not dets:
            warnings.warn(f"scene {s.id} has no usable target detections; skipped")
            continue
        image = to_chw(s.image, dtype)
        with torch.no_grad():
            baseline = model(image[None].to(_model_dtype(model, dtype)))[0].to(dtype)
        items.append(_Item(s.id, image, dets, cfg.loss.target_depth.target(baseline)))
    if not items:
        raise DataError("no trainable detections")
    return items


def _make_optimizer(patch: torch.Tensor, cfg: AttackConfig) -> torch.optim.Adam:
    return torch.optim.Adam([patch], lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)


def train_patch(dataset: DatasetSplit, model, cfg: AttackConfig, checkpoint_dir=None,
                resume_from=None, on_step=None) -> tuple[np.ndarray, TrainingLog]:
    """Optimize a patch on ``dataset.train`` against a frozen ``model``.

    Returns the patch as an (S, S, 3) array in [0, 1] and the per-epoch log.
    ``on_step(patch_tensor)`` is called after every clamped optimizer step.
    """
    cfg.loss.check_attack()
    dtype = _dtype(cfg)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    mdtype = _model_dtype(model, dtype)
    items = _prepare(dataset, model, cfg, dtype)

    patch = torch.tensor(init_patch(cfg), dtype=dtype, requires_grad=True)
    opt = _make_optimizer(patch, cfg)
    train_log = TrainingLog()
    start = 0
    if resume_from is not None:
        state = resume(resume_from)
        with torch.no_grad():
            patch.copy_(torch.as_tensor(state["patch"].transpose(2, 0, 1), dtype=dtype))
        _load_adam_state(opt, patch, state["adam"])
        start = state["epoch"]
        train_log = TrainingLog.from_dict(state.get("log", {}))
        train_log.epochs = train_log.epochs[:start]
    chash = config_hash(cfg)
    if checkpoint_dir is not None and start == 0:
        path = save_checkpoint(patch, opt, 0, checkpoint_dir, chash, train_log)
        train_log.checkpoints[0] = str(path)

    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(items))
        sums = {"total": 0.0, "depth": 0.0, "tv": 0.0}
        n_steps = 0
        for b in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[b:b + cfg.batch_size]]
            adv, all_masks = [], []
            for it in batch:
                def params_for(k, it=it):
                    return sample_params(derive_seed(cfg.seed, epoch, it.id, k), cfg.transforms, cfg.patch_side)
                img, masks = apply_all(it.image, patch, it.detections, cfg.patch_scale,
                                       params_for, cfg.placement_mode)
                adv.append(img)
                all_masks.append(masks)
            d_adv = model(torch.stack(adv).to(mdtype)).to(dtype)
            terms = [
                detection_depth_loss(it.target, d_adv[i], m, cfg.loss)
                for i, it in enumerate(batch) for m in all_masks[i]
            ]
            loss = loss_total(terms, patch, cfg.loss)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                patch.clamp_(0.0, 1.0)
            if on_step is not None:
                on_step(patch.detach())
            with torch.no_grad():
                sums["total"] += float(loss)
                sums["depth"] += float(torch.stack([torch.as_tensor(t) for t in terms]).mean())
                sums["tv"] += float(loss_tv(patch))
            n_steps += 1
        entry = {k: v / n_steps for k, v in sums.items()}
        entry["epoch"] = epoch
        entry["seconds"] = time.perf_counter() - t0
        train_log.epochs.append(entry)
        log.debug("epoch %d: %s", epoch, entry)
        done = epoch + 1
        if checkpoint_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            path = save_checkpoint(patch, opt, done, checkpoint_dir, chash, train_log)
            train_log.checkpoints[done] = str(path)

    if checkpoint_dir is not None and cfg.epochs not in train_log.checkpoints:
        path = save_checkpoint(patch, opt, cfg.epochs, checkpoint_dir, chash, train_log)
        train_log.checkpoints[cfg.epochs] = str(path)

    bad = train_log.moving_average_violations()
    if bad:
        log.warning("L_total moving average rose at %d epochs (first at %d)", len(bad), bad[0])
    return patch.detach().cpu().numpy().transpose(1, 2, 0).copy(), train_log


# ---------------------------------------------------------------------------
# checkpoints: <dir>/ckpt_NNNN.png for viewing, <dir>/ckpt_NNNN.json with exact state


def _b64(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {"dtype": a.dtype.str, "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode()}


def _unb64(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def _adam_state(opt: torch.optim.Adam, patch: torch.Tensor) -> dict:
    st = opt.state.get(patch, {})
    if not st:
        return {"step": 0}
    return {
        "step": int(st["step"]),
        "exp_avg": _b64(st["exp_avg"].cpu().numpy()),
        "exp_avg_sq": _b64(st["exp_avg_sq"].cpu().numpy()),
    }


def _load_adam_state(opt: torch.optim.Adam, patch: torch.Tensor, adam: dict) -> None:
    if adam["step"] == 0:
        return
    opt.state[patch] = {
        "step": torch.tensor(float(adam["step"])),
        "exp_avg": torch.as_tensor(adam["exp_avg"], dtype=patch.dtype).reshape(patch.shape).clone(),
        "exp_avg_sq": torch.as_tensor(adam["exp_avg_sq"], dtype=patch.dtype).reshape(patch.shape).clone(),
    }


def save_checkpoint(patch: torch.Tensor, opt: torch.optim.Adam, epoch: int, directory,
                    chash: str = "", train_log: TrainingLog | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p = patch.detach().cpu().numpy().transpose(1, 2, 0)
    stem = directory / f"ckpt_{epoch:04d}"
    write_image(p, stem.with_suffix(".png"))
    payload = {
        "epoch": epoch,
        "config_hash": chash,
        "patch": _b64(p),
        "adam": _adam_state(opt, patch),
        "log": (train_log or TrainingLog()).to_dict(),
    }
    tmp = stem.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(stem.with_suffix(".json"))
    return stem.with_suffix(".json")


def _read_checkpoint(path: Path) -> dict:
    payload = json.loads(path.read_text())
    state = {"epoch": int(payload["epoch"]), "config_hash": payload.get("config_hash", ""),
             "patch": _unb64(payload["patch"]), "log": payload.get("log", {})}
    adam = payload["adam"]
    if adam["step"]:
        adam = {"step": adam["step"], "exp_avg": _unb64(adam["exp_avg"]),
                "exp_avg_sq": _unb64(adam["exp_avg_sq"])}
        if adam["exp_avg"].shape != state["patch"].transpose(2, 0, 1).shape:
            raise ValueError("optimizer moments do not match patch shape")
    state["adam"] = adam
    if state["patch"].min() < 0 or state["patch"].max() > 1:
        raise ValueError("patch values outside [0, 1]")
    return state


def resume(path) -> dict:
    """Load a checkpoint: ``{"epoch", "patch" (S, S, 3), "adam", "config_hash", "log"}``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    try:
        return _read_checkpoint(path)
    except (ValueError, KeyError, TypeError) as e:
        last = None
        for other in sorted(path.parent.glob("ckpt_*.json"), reverse=True):
            if other == path:
                continue
            try:
                last = _read_checkpoint(other)["epoch"]
                break
            except (ValueError, KeyError, TypeError):
                continue
        where = f"last valid snapshot is epoch {last}" if last is not None else "no valid snapshot found"
        raise DataError(f"corrupt checkpoint {path} ({e}); {where}") from None
