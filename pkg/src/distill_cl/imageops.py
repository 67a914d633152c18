"""Batched image warps used by scenario generation and differentiable augmentation.

All warps are bilinear with a center pivot, computed in pixel space so
non-square images (spectrogram shapes) rotate and scale correctly. Gradients
flow from output pixels to input pixels, which the distillation update relies
on. Positive angles rotate image content clockwise (x right, y down).
"""

import math

import numpy as np
import torch
import torch.nn.functional as F


def _as_param(v, n, dtype, device):
    t = torch.as_tensor(v, dtype=dtype, device=device)
    if t.ndim == 0:
        t = t.expand(n)
    return t.reshape(n, 1, 1)


def affine_warp(images, angles_deg=0.0, scales=1.0, tx=0.0, ty=0.0, padding="zeros"):
    """Warp a (N, C, H, W) tensor: rotate by `angles_deg` clockwise, zoom by
    `scales`, then translate content by (`tx`, `ty`) pixels. Parameters may be
    scalars or per-image vectors."""
    n, _, h, w = images.shape
    dtype = images.dtype if images.dtype.is_floating_point else torch.float32
    device = images.device

    ang = _as_param(angles_deg, n, dtype, device) * (math.pi / 180.0)
    sc = _as_param(scales, n, dtype, device)
    tx = _as_param(tx, n, dtype, device)
    ty = _as_param(ty, n, dtype, device)

    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    # inverse map: for each output pixel, where to sample in the source
    xr = xs[None] - cx - tx
    yr = ys[None] - cy - ty
    cos, sin = torch.cos(ang), torch.sin(ang)
    xs_src = (cos * xr + sin * yr) / sc + cx
    ys_src = (-sin * xr + cos * yr) / sc + cy

    gx = (2.0 * xs_src + 1.0) / w - 1.0
    gy = (2.0 * ys_src + 1.0) / h - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    mode = "border" if padding == "replicate" else "zeros"
    return F.grid_sample(
        images, grid, mode="bilinear", padding_mode=mode, align_corners=False
    )


def rotate_images(images, angles_deg):
    """Rotate a numpy (N, C, H, W) batch clockwise by per-image angles (degrees),
    bilinear with zero fill. Returns float32."""
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    with torch.no_grad():
        out = affine_warp(x, angles_deg=np.asarray(angles_deg, dtype=np.float32))
    return out.numpy()
