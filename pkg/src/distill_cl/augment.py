"""Differentiable siamese augmentation.

A draw fixes one operation and its parameters; applying the same draw to the
real and the synthetic batch uses identical transform parameters, so the pair
sees the same view and gradients flow to synthetic pixels through the
transform. Parameter ranges: rotate +-15 deg, scale [0.9, 1.1], horizontal
flip (p=0.5), shift up to 12% of width on each axis, cutout square with side
up to 25% of width. Structural identities (angle 0, scale 1, no flip, zero
shift, zero cutout) return the input unchanged.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .data import LabeledSet
from .errors import ValidationError
from .imageops import affine_warp

DSA_OPS = ("rotate", "scale", "flip", "crop_shift", "cutout")

ROTATE_MAX_DEG = 15.0
SCALE_RANGE = (0.9, 1.1)
SHIFT_FRAC = 0.12
CUTOUT_MAX_FRAC = 0.25


@dataclass(frozen=True)
class AugmentationDraw:
    op: str
    angle: float = 0.0      # degrees, clockwise
    scale: float = 1.0
    flip: bool = False
    shift_x: float = 0.0    # pixels
    shift_y: float = 0.0
    cut_frac: float = 0.0   # square side as a fraction of width
    cut_cx: float = 0.5     # cutout center, fraction of (W, H)
    cut_cy: float = 0.5

    def __post_init__(self):
        if self.op not in DSA_OPS:
            raise ValidationError(f"unknown augmentation op {self.op!r}")


def sample_draw(rng, image_shape, ops=DSA_OPS):
    """Sample one operation and its parameters; `rng` is a numpy Generator."""
    ops = tuple(ops)
    if not ops:
        raise ValidationError("ops must be non-empty")
    unknown = [o for o in ops if o not in DSA_OPS]
    if unknown:
        raise ValidationError(f"unknown augmentation ops {unknown}")
    _, _, w = image_shape
    op = ops[rng.integers(len(ops))]
    if op == "rotate":
        return AugmentationDraw(op, angle=float(rng.uniform(-ROTATE_MAX_DEG, ROTATE_MAX_DEG)))
    if op == "scale":
        return AugmentationDraw(op, scale=float(rng.uniform(*SCALE_RANGE)))
    if op == "flip":
        return AugmentationDraw(op, flip=bool(rng.random() < 0.5))
    if op == "crop_shift":
        m = SHIFT_FRAC * w
        return AugmentationDraw(
            op, shift_x=float(rng.uniform(-m, m)), shift_y=float(rng.uniform(-m, m))
        )
    return AugmentationDraw(
        "cutout",
        cut_frac=float(rng.uniform(0.0, CUTOUT_MAX_FRAC)),
        cut_cx=float(rng.uniform(0.15, 0.85)),
        cut_cy=float(rng.uniform(0.15, 0.85)),
    )


def dsa_apply_tensor(images: torch.Tensor, draw: AugmentationDraw) -> torch.Tensor:
    """Apply a draw to a (N, C, H, W) tensor, keeping the autograd graph."""
    if draw.op == "rotate":
        if draw.angle == 0.0:
            return images
        return affine_warp(images, angles_deg=draw.angle)
    if draw.op == "scale":
        if draw.scale == 1.0:
            return images
        return affine_warp(images, scales=draw.scale)
    if draw.op == "flip":
        return torch.flip(images, dims=[-1]) if draw.flip else images
    if draw.op == "crop_shift":
        if draw.shift_x == 0.0 and draw.shift_y == 0.0:
            return images
        return affine_warp(images, tx=draw.shift_x, ty=draw.shift_y)
    # cutout: multiply by a mask; differentiable w.r.t. surviving pixels
    if draw.cut_frac == 0.0:
        return images
    _, _, h, w = images.shape
    side = draw.cut_frac * w
    cx, cy = draw.cut_cx * (w - 1), draw.cut_cy * (h - 1)
    ys = torch.arange(h, dtype=images.dtype, device=images.device)
    xs = torch.arange(w, dtype=images.dtype, device=images.device)
    inside_y = (ys - cy).abs() <= side / 2
    inside_x = (xs - cx).abs() <= side / 2
    mask = 1.0 - (inside_y[:, None] & inside_x[None, :]).to(images.dtype)
    return images * mask


def dsa_apply(batch: LabeledSet, draw: AugmentationDraw) -> LabeledSet:
    """Transformed copy of `batch`; shape and labels unchanged."""
    x = torch.from_numpy(np.ascontiguousarray(batch.images))
    with torch.no_grad():
        out = dsa_apply_tensor(x, draw).numpy()
    return LabeledSet(out, batch.labels.copy(), batch.class_count)
