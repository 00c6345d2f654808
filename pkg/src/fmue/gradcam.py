"""Gradient-weighted class activation maps for the transformer encoder.

The target scalar is the class evidence (post-softplus logit), which is
class-local; belief would couple classes through the shared Dirichlet
strength. Channel weights are mean gradients over patch tokens; the class
token is dropped before reshaping to the patch grid.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import torch
import torch.nn.functional as F

from .modeling import ModelBundle


@dataclasses.dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    target_class: int
    source_block: int
    pre_min: float
    pre_max: float

    def sidecar(self) -> dict:
        return {
            "target_class": self.target_class,
            "source_block": self.source_block,
            "pre_normalization_min": self.pre_min,
            "pre_normalization_max": self.pre_max,
        }


def grad_cam(model: ModelBundle, image, target_class: int, source_block: int = None) -> Heatmap:
    """Heatmap of regions driving the target class's evidence.

    ``source_block`` indexes the encoder block whose output tokens are
    attributed (default: last block).
    """
    cfg = model.enc_cfg
    depth = len(model.encoder.blocks)
    if source_block is None:
        source_block = depth - 1
    if not -depth <= source_block < depth:
        raise ValueError(f"source_block {source_block} out of range for depth {depth}")
    source_block = source_block % depth
    if not 0 <= target_class < model.class_count:
        raise ValueError(f"target_class {target_class} out of range")

    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image)
    if image.dim() == 3:
        image = image[None]
    if image.shape != (1, 3, cfg.image_size, cfg.image_size):
        raise ValueError(f"expected a single (3, {cfg.image_size}, {cfg.image_size}) image")

    captured = {}

    def hook(_module, _inputs, output):
        captured["tokens"] = output

    model.eval()
    handle = model.encoder.blocks[source_block].register_forward_hook(hook)
    try:
        with torch.enable_grad():
            # grad flows to the activation regardless of parameter freezing
            image = image.clone().requires_grad_(True)
            logits = model(image)
            evidence = F.softplus(logits[0, target_class])
            grads = torch.autograd.grad(evidence, captured["tokens"])[0]
    finally:
        handle.remove()

    tokens = captured["tokens"].detach()[0, 1:, :]  # drop class token
    grads = grads[0, 1:, :]
    weights = grads.mean(dim=0)
    cam = torch.relu((tokens * weights).sum(dim=-1))

    grid = cfg.grid_size
    cam = cam.reshape(1, 1, grid, grid)
    cam = F.interpolate(
        cam, size=(cfg.image_size, cfg.image_size), mode="bilinear", align_corners=False
    )[0, 0]
    cam = cam.double().numpy()

    pre_min = float(cam.min())
    pre_max = float(cam.max())
    if pre_max > pre_min:
        values = (cam - pre_min) / (pre_max - pre_min)
    elif pre_max > 0:
        values = np.ones_like(cam)
    else:
        values = np.zeros_like(cam)
    return Heatmap(
        values=values,
        target_class=target_class,
        source_block=source_block,
        pre_min=pre_min,
        pre_max=pre_max,
    )


def save_heatmap(heatmap: Heatmap, png_path, sidecar_path) -> None:
    """Portable grayscale image plus a structured-text sidecar."""
    from PIL import Image

    data = np.round(heatmap.values * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(png_path)
    with open(sidecar_path, "w") as fh:
        json.dump(heatmap.sidecar(), fh, indent=2, sort_keys=True)
        fh.write("\n")
