"""Hierarchical feature export from pretrained torchvision backbones.

Features are tapped from the two intermediate stages (stride 8 and 16 in
the ResNet family), written one PNIT file per image per level, and
indexed by a manifest the main pipeline ingests directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from torchvision import models
from torchvision import transforms as T

from . import pnit

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".pgm", ".ppm", ".tif", ".tiff")


@dataclass
class BackboneSpec:
    name: str = "wide_resnet101_2"   # resnext101_32x8d / densenet201 for ensembles
    levels: tuple = (2, 3)
    resize_to: int = 512
    crop_to: int = 480
    pretrained: bool = True
    weights_path: str | None = None

    def transform(self):
        return T.Compose([
            T.Resize((self.resize_to, self.resize_to),
                     interpolation=T.InterpolationMode.BILINEAR),
            T.CenterCrop(self.crop_to),
            T.ToTensor(),
            T.Normalize(IMAGENET_MEAN, IMAGENET_STD),
        ])


def _tap_modules(model, name, levels):
    """The submodules whose outputs form the exported hierarchy levels."""
    taps = {}
    if hasattr(model, "layer2"):          # resnet / wide_resnet / resnext
        stages = {2: model.layer2, 3: model.layer3}
        names = {2: "layer2", 3: "layer3"}
    elif hasattr(model, "features") and hasattr(model.features, "denseblock2"):
        stages = {2: model.features.denseblock2, 3: model.features.denseblock3}
        names = {2: "features.denseblock2", 3: "features.denseblock3"}
    else:
        raise ValueError(f"backbone {name!r} has no known stage-2/3 taps")
    for lv in levels:
        if lv not in stages:
            raise ValueError(f"backbone {name!r} does not expose level {lv}")
        taps[lv] = (names[lv], stages[lv])
    return taps


def build_model(spec: BackboneSpec):
    ctor = getattr(models, spec.name, None)
    if ctor is None:
        raise ValueError(f"unknown torchvision backbone {spec.name!r}")
    if spec.weights_path:
        model = ctor(weights=None)
        state = torch.load(spec.weights_path, map_location="cpu")
        model.load_state_dict(state)
    elif spec.pretrained:
        try:
            model = ctor(weights="DEFAULT")
        except Exception as exc:
            raise RuntimeError(
                f"pretrained weights for {spec.name!r} unavailable "
                f"(no download access?): {exc}; pass --weights PATH or "
                f"--no-pretrained"
            ) from exc
    else:
        model = ctor(weights=None)
    model.eval()
    return model


class FeatureExtractor:
    """Forward-hook capture of the configured stage outputs."""

    def __init__(self, spec: BackboneSpec):
        self.spec = spec
        self.model = build_model(spec)
        self.taps = _tap_modules(self.model, spec.name, spec.levels)
        self._captured = {}
        for lv, (_, module) in self.taps.items():
            module.register_forward_hook(self._hook(lv))

    def _hook(self, level):
        def capture(module, inputs, output):
            self._captured[level] = output.detach()
        return capture

    def tap_names(self):
        return {lv: name for lv, (name, _) in self.taps.items()}

    @torch.no_grad()
    def extract(self, batch):
        """(1, 3, H, W) float batch -> {level: (c, h, w) float32 array}."""
        self._captured.clear()
        self.model(batch)
        return {
            lv: out[0].cpu().numpy().astype(np.float32)
            for lv, out in self._captured.items()
        }


def load_image(path, transform):
    with Image.open(path) as img:
        return transform(img.convert("RGB")).unsqueeze(0)


def export_features(spec: BackboneSpec, image_dir, out_dir):
    """Write one PNIT per image per level plus a manifest.

    A single unreadable image is reported and skipped; the batch carries
    on. Returns (exported names, {name: error}).
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    extractor = FeatureExtractor(spec)
    transform = spec.transform()
    paths = sorted(
        p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not paths:
        raise ValueError(f"no images in {image_dir}")
    lines = [
        f"# image_size = {spec.crop_to} {spec.crop_to}",
        f"# backbone = {spec.name}",
    ]
    lines += [f"# tap.{lv} = {name}" for lv, name in extractor.tap_names().items()]
    lines.append("# columns: name\tlevel\tpath")
    exported, errors = [], {}
    for path in paths:
        try:
            batch = load_image(path, transform)
            hier = extractor.extract(batch)
        except Exception as exc:  # noqa: BLE001 - per-file isolation
            errors[path.name] = str(exc)
            continue
        for lv in spec.levels:
            rel = f"{path.stem}_l{lv}.pnit"
            pnit.write_tensor(out_dir / rel, hier[lv])
            lines.append(f"{path.stem}\t{lv}\t{rel}")
        exported.append(path.stem)
    (out_dir / "features.tsv").write_text("\n".join(lines) + "\n")
    return exported, errors
