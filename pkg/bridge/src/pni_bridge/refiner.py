"""Trainable anomaly-map refiner served over the bridge file protocol.

A compact encoder-decoder with early fusion: the RGB image and the
estimated map get separate stem convolutions whose features are summed
after the first layer, and the network predicts a residual on the map.
The final convolution starts at zero, so an untrained checkpoint passes
the map through unchanged.

Training data are the defect triples emitted by the main pipeline's
``refine-data`` command; the loss is the regression + gradient pair used
there (L2 norms divided by the pixel count).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.nn import functional as F

from . import pnit


class MapRefiner(nn.Module):
    def __init__(self, base=16):
        super().__init__()
        self.base = base
        self.img_stem = nn.Conv2d(3, base, 3, padding=1)
        self.map_stem = nn.Conv2d(1, base, 3, padding=1)
        self.enc1 = self._block(base, base)
        self.down1 = nn.Conv2d(base, base * 2, 3, stride=2, padding=1)
        self.enc2 = self._block(base * 2, base * 2)
        self.down2 = nn.Conv2d(base * 2, base * 4, 3, stride=2, padding=1)
        self.mid = self._block(base * 4, base * 4)
        self.up2 = nn.Conv2d(base * 4, base * 2, 3, padding=1)
        self.dec2 = self._block(base * 4, base * 2)
        self.up1 = nn.Conv2d(base * 2, base, 3, padding=1)
        self.dec1 = self._block(base * 2, base)
        self.head = nn.Conv2d(base, 1, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @staticmethod
    def _block(cin, cout):
        return nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, image, amap):
        fused = self.img_stem(image) + self.map_stem(amap)  # early fusion
        e1 = self.enc1(fused)
        e2 = self.enc2(self.down1(e1))
        m = self.mid(self.down2(e2))
        u2 = self.up2(F.interpolate(m, size=e2.shape[-2:], mode="bilinear",
                                    align_corners=False))
        d2 = self.dec2(torch.cat([u2, e2], dim=1))
        u1 = self.up1(F.interpolate(d2, size=e1.shape[-2:], mode="bilinear",
                                    align_corners=False))
        d1 = self.dec1(torch.cat([u1, e1], dim=1))
        return amap + self.head(d1)


def refine_loss_terms(predicted, target):
    """Batch means of the regression and gradient losses."""
    hw = predicted.shape[-2] * predicted.shape[-1]
    diff = predicted - target
    l_reg = diff.flatten(1).norm(dim=1).mean() / hw
    gh = torch.zeros_like(predicted)
    gw = torch.zeros_like(predicted)
    gh[..., :-1, :] = predicted[..., 1:, :] - predicted[..., :-1, :]
    gw[..., :, :-1] = predicted[..., :, 1:] - predicted[..., :, :-1]
    th = torch.zeros_like(target)
    tw = torch.zeros_like(target)
    th[..., :-1, :] = target[..., 1:, :] - target[..., :-1, :]
    tw[..., :, :-1] = target[..., :, 1:] - target[..., :, :-1]
    l_grad = ((gh - th).flatten(1).norm(dim=1).mean()
              + (gw - tw).flatten(1).norm(dim=1).mean()) / hw
    return l_reg, l_grad


def load_samples(samples_dir):
    """Defect triples (image, estimated map, mask) from a refine-data dir."""
    samples_dir = Path(samples_dir)
    rows = []
    for line in (samples_dir / "manifest.tsv").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        _, img, mask, amap = line.split("\t")
        rows.append((img, mask, amap))
    if not rows:
        raise ValueError(f"no samples listed in {samples_dir}/manifest.tsv")
    images, amaps, masks = [], [], []
    for img, mask, amap in rows:
        with Image.open(samples_dir / img) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        images.append(torch.from_numpy(arr.transpose(2, 0, 1)))
        with Image.open(samples_dir / mask) as im:
            m = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        masks.append(torch.from_numpy((m > 0.5).astype(np.float32))[None])
        amaps.append(torch.from_numpy(pnit.read_tensor(samples_dir / amap))[None])
    return torch.stack(images), torch.stack(amaps), torch.stack(masks)


def _augment(images, amaps, masks, gen):
    """Online augmentation: horizontal flip, quarter rotation, color jitter."""
    if torch.rand((), generator=gen) < 0.5:
        images = torch.flip(images, dims=[-1])
        amaps = torch.flip(amaps, dims=[-1])
        masks = torch.flip(masks, dims=[-1])
    k = int(torch.randint(0, 4, (), generator=gen))
    if k and images.shape[-1] == images.shape[-2]:
        images = torch.rot90(images, k, dims=(-2, -1))
        amaps = torch.rot90(amaps, k, dims=(-2, -1))
        masks = torch.rot90(masks, k, dims=(-2, -1))
    scale = 0.8 + 0.4 * torch.rand((), generator=gen)
    images = (images * scale).clamp(0.0, 1.0)
    return images, amaps, masks


def train_refiner(samples_dir, checkpoint, epochs=3, lr=1e-4, batch_size=8,
                  seed=0, augment=True, base=16):
    """Fit the refiner on defect triples; returns per-epoch mean losses."""
    images, amaps, masks = load_samples(samples_dir)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = MapRefiner(base=base)
    model.train()
    optim = torch.optim.Adam(model.parameters(), lr=lr)
    n = images.shape[0]
    history = []
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) == 1:
                continue  # batch-norm statistics need at least two samples
            img, amap, mask = images[idx], amaps[idx], masks[idx]
            if augment:
                img, amap, mask = _augment(img, amap, mask, gen)
            out = model(img, amap)
            l_reg, l_grad = refine_loss_terms(out, mask)
            loss = l_reg + l_grad
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"refiner training diverged at epoch {epoch}, batch "
                    f"{start // batch_size}"
                )
            optim.zero_grad()
            loss.backward()
            optim.step()
            epoch_loss += float(loss.detach()) * len(idx)
        history.append(epoch_loss / n)
    checkpoint = Path(checkpoint)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.state_dict(), "base": base}, checkpoint)
    return history


def load_refiner(checkpoint):
    payload = torch.load(checkpoint, map_location="cpu", weights_only=True)
    model = MapRefiner(base=payload["base"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def new_identity_checkpoint(checkpoint, base=16, seed=0):
    """Untrained checkpoint; the zero-initialized head makes it pass the
    input map through unchanged."""
    torch.manual_seed(seed)
    model = MapRefiner(base=base)
    checkpoint = Path(checkpoint)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.state_dict(), "base": base}, checkpoint)


@torch.no_grad()
def serve_refine(checkpoint, bridge_dir):
    """One file-protocol request: read inputs, refine, write the result."""
    bridge_dir = Path(bridge_dir)
    image_path = bridge_dir / "input_image.pnit"
    map_path = bridge_dir / "input_map.pnit"
    for path in (image_path, map_path):
        if not path.exists():
            raise FileNotFoundError(f"bridge input missing: {path}")
    image = torch.from_numpy(pnit.read_tensor(image_path))[None]
    amap = torch.from_numpy(pnit.read_tensor(map_path))[None, None]
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError("input_image.pnit must be a (3, H, W) tensor")
    model = load_refiner(checkpoint)
    out = model(image, amap)[0, 0].clamp(0.0, 1.0).numpy()
    pnit.write_tensor(bridge_dir / "refined_map.pnit", out)
    return out
