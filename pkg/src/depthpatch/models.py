"""Depth models: the attack-side contract plus two built-in victims.

Any ``torch.nn.Module`` mapping a (B, 3, H, W) image batch in [0, 1] to a
(B, H, W) disparity batch in [0, 1] (0 = farthest) can be attacked; subclass
:class:`DepthModel` to get the numpy helpers. External pretrained networks
plug in the same way and must document how they normalize disparity.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from depthpatch.errors import DataError, NumericError
from depthpatch.scene_io import DatasetSplit

log = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)


def to_chw(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1)), dtype=dtype)


def to_hwc(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(1, 2, 0)


class DepthModel(nn.Module):
    arch: dict = {}

    def freeze(self) -> "DepthModel":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return torch.float64

    def predict(self, image: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            d = self(to_chw(image, self.dtype)[None])[0]
        return d.cpu().numpy()

    def gradient_wrt_image(self, image: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product of :meth:`predict` at ``image``."""
        x = to_chw(image, self.dtype)[None].requires_grad_(True)
        d = self(x)[0]
        (g,) = torch.autograd.grad(d, x, grad_outputs=torch.as_tensor(upstream, dtype=d.dtype))
        return to_hwc(g[0])

    def weights_checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class AnalyticDepthModel(DepthModel):
    """Linear stand-in: box-blurred luminance. Gives closed-form gradients for testing."""

    def __init__(self, kernel: int = 5):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel must be odd")
        self.kernel = kernel
        self.arch = {"type": "analytic", "kernel": kernel}
        self.register_buffer("luma", torch.tensor(LUMA, dtype=torch.float64).view(1, 3, 1, 1), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lum = (x * self.luma.to(x.dtype)).sum(dim=1, keepdim=True)
        r = self.kernel // 2
        lum = F.pad(lum, (r, r, r, r), mode="reflect")
        return F.avg_pool2d(lum, self.kernel, stride=1)[:, 0]


def _block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.ELU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ELU(),
    )


class ToyDepthNet(DepthModel):
    """Four-level encoder-decoder with skip connections and a sigmoid disparity head.

    The bottleneck concatenates globally pooled features, so every output
    pixel depends on every input pixel.
    """

    def __init__(self, base_channels: int = 8, seed: int = 0):
        super().__init__()
        c = base_channels
        self.arch = {"type": "toy", "base_channels": c, "seed": seed}
        torch.manual_seed(seed)
        self.stem = _block(3, c)
        self.down = nn.ModuleList([_block(c, c, 2), _block(c, 2 * c, 2), _block(2 * c, 4 * c, 2), _block(4 * c, 4 * c, 2)])
        self.context = nn.Sequential(nn.Conv2d(8 * c, 4 * c, 1), nn.ELU())
        ups = []
        cin = 4 * c
        for skip, out in [(4 * c, 4 * c), (2 * c, 2 * c), (c, c), (c, c)]:  # skips at 8, 16, 32, 64 px
            ups.append(_block(cin + skip, out))
            cin = out
        self.up = nn.ModuleList(ups)
        self.head = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [self.stem(x)]
        for layer in self.down:
            feats.append(layer(feats[-1]))
        z = feats[-1]
        g = z.mean(dim=(2, 3), keepdim=True).expand_as(z)
        z = self.context(torch.cat([z, g], dim=1))
        for layer, skip in zip(self.up, reversed(feats[:-1])):
            z = F.interpolate(z, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            z = layer(torch.cat([z, skip], dim=1))
        return torch.sigmoid(self.head(z))[:, 0]


def _stack(samples, dtype):
    x = torch.stack([to_chw(s.image, dtype) for s in samples])
    y = torch.stack([torch.as_tensor(s.disparity, dtype=dtype) for s in samples])
    return x, y


def heldout_error(model: DepthModel, samples) -> float:
    x, y = _stack(samples, model.dtype)
    with torch.no_grad():
        return float((model(x) - y).abs().mean())


def pretrain_toy_model(dataset: DatasetSplit, epochs: int = 40, seed: int = 0,
                       base_channels: int = 8, batch_size: int = 16, lr: float = 1e-3,
                       max_error: float = 0.15) -> ToyDepthNet:
    """Fit :class:`ToyDepthNet` to ground-truth disparity with an L1 loss, then freeze it."""
    if any(s.disparity is None for s in dataset.train + dataset.test):
        raise DataError("pretraining needs scenes with ground-truth disparity")
    model = ToyDepthNet(base_channels, seed)
    model.arch["pretrain_epochs"] = epochs
    x, y = _stack(dataset.train, torch.float32)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(epochs, 1))
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[i:i + batch_size])
            loss = (model(x[idx]) - y[idx]).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        log.debug("pretrain epoch %d: L1 %.4f", epoch, total / len(x))
    model.freeze()
    if epochs > 0 and dataset.test:
        err = heldout_error(model, dataset.test)
        log.info("toy model held-out L1 %.4f", err)
        if err > max_error:
            raise NumericError(
                f"toy depth model did not converge (held-out L1 {err:.3f} > {max_error}); "
                "try another seed or more epochs"
            )
    return model


# ---------------------------------------------------------------------------
# weights container: magic, version, header length, JSON header, raw little-endian float32

_MAGIC = b"DPMW"
_VERSION = 1


def save_model(model: DepthModel, path) -> None:
    tensors, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        raw = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arch": model.arch, "tensors": tensors}).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<II", _VERSION, len(header)) + header)
        for b in blobs:
            f.write(b)


def load_model(path) -> DepthModel:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DataError(f"{path}: not a depth model weights file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise DataError(f"{path}: unsupported weights version {version}")
    header = json.loads(data[12:12 + hlen])
    body = data[12 + hlen:]
    arch = header["arch"]
    if arch["type"] == "analytic":
        model = AnalyticDepthModel(arch["kernel"])
    elif arch["type"] == "toy":
        model = ToyDepthNet(arch["base_channels"], arch.get("seed", 0))
        model.arch = dict(arch)
    else:
        raise DataError(f"{path}: unknown architecture {arch['type']!r}")
    state = {}
    for t in header["tensors"]:
        raw = body[t["offset"]:t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise DataError(f"{path}: truncated tensor {t['name']}")
        state[t["name"]] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).copy())
    ref = model.state_dict()
    for k, v in state.items():
        state[k] = v.to(ref[k].dtype)
    model.load_state_dict(state)
    return model.freeze()
