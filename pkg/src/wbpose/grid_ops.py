"""Heatmap-grid primitives: volume reshape, soft-argmax, sampling, crops.

Coordinates follow the (x = column, y = row, z = depth-bin) convention with
pixel/voxel centers at integer grid positions. Soft-argmax outputs stay in
heatmap-grid units; conversion to image pixels (multiply by stride) is the
caller's business.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import DegenerateBox, ShapeMismatch

__all__ = [
    "Box", "reshape_to_volume", "volume_to_channels", "soft_argmax_3d",
    "soft_argmax_2d", "bilinear_sample", "roi_align", "hflip_image",
    "hflip_coords",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: center (cx, cy) plus size (w, h), pixel units."""

    cx: float
    cy: float
    w: float
    h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def reshape_to_volume(f, depth: int) -> Tensor:
    """Relabel a (Dz*J, H, W) channel stack as a (J, Dz, H, W) volume.

    Channel c = j*depth + d lands at volume cell (j, d); values are
    untouched. Raises ShapeMismatch when the channel count is not a
    multiple of depth.
    """
    f = as_tensor(f)
    if f.data.ndim != 3:
        raise ShapeMismatch(f"expected (C, H, W) map, got shape {f.shape}")
    c, h, w = f.shape
    if depth < 1 or c % depth != 0:
        raise ShapeMismatch(f"channel count {c} is not a multiple of depth {depth}")
    return ad.reshape(f, (c // depth, depth, h, w))


def volume_to_channels(vol) -> Tensor:
    """Inverse relabeling of reshape_to_volume."""
    vol = as_tensor(vol)
    if vol.data.ndim != 4:
        raise ShapeMismatch(f"expected (J, Dz, H, W) volume, got shape {vol.shape}")
    j, d, h, w = vol.shape
    return ad.reshape(vol, (j * d, h, w))


def soft_argmax_3d(vol) -> Tensor:
    """Differentiable argmax of a (J, Dz, H, W) logit volume.

    Per joint, a softmax over all Dz*H*W voxels followed by the expected
    voxel index along each axis. Returns (J, 3) coordinates ordered
    (x, y, z); each lies inside the closed grid box by convexity.
    """
    vol = as_tensor(vol)
    if vol.data.ndim != 4:
        raise ShapeMismatch(f"expected (J, Dz, H, W) volume, got shape {vol.shape}")
    j, d, h, w = vol.shape
    p = ad.softmax(ad.reshape(vol, (j, d * h * w)), axis=-1)
    p = ad.reshape(p, (j, d, h, w))
    x = ad.tsum(ad.tsum(p, axis=(1, 2)) * np.arange(w, dtype=np.float64), axis=-1)
    y = ad.tsum(ad.tsum(p, axis=(1, 3)) * np.arange(h, dtype=np.float64), axis=-1)
    z = ad.tsum(ad.tsum(p, axis=(2, 3)) * np.arange(d, dtype=np.float64), axis=-1)
    return ad.stack([x, y, z], axis=-1)


def soft_argmax_2d(maps) -> Tensor:
    """Planar variant: (C, H, W) logits to (C, 2) expected (x, y)."""
    maps = as_tensor(maps)
    if maps.data.ndim != 3:
        raise ShapeMismatch(f"expected (C, H, W) map, got shape {maps.shape}")
    c, h, w = maps.shape
    p = ad.softmax(ad.reshape(maps, (c, h * w)), axis=-1)
    p = ad.reshape(p, (c, h, w))
    x = ad.tsum(ad.tsum(p, axis=1) * np.arange(w, dtype=np.float64), axis=-1)
    y = ad.tsum(ad.tsum(p, axis=2) * np.arange(h, dtype=np.float64), axis=-1)
    return ad.stack([x, y], axis=-1)


def bilinear_sample(fmap, xy) -> Tensor:
    """Sample a (C, H, W) map at continuous (x, y) positions.

    Accepts a single (2,) point, returning (C,), or an (N, 2) batch,
    returning (N, C). Out-of-range coordinates clamp to the map border.
    """
    xy = as_tensor(xy)
    if xy.data.ndim == 1:
        return ad.bilinear_sample(fmap, ad.reshape(xy, (1, 2)))[0]
    return ad.bilinear_sample(fmap, xy)


def roi_align(img, box, out_h: int, out_w: int) -> Tensor:
    """Resample a box region of a (C, H, W) map onto an out_h x out_w grid.

    Output cell (i, j) takes one bilinear sample at the source point that
    splits the box uniformly: x = cx - w/2 + (j + 0.5) * w / out_w, and
    likewise in y. A box centered on the image with the full image size
    therefore reproduces the input exactly. Differentiable in the image
    and in the box when the box is given as a (cx, cy, w, h) tensor.
    """
    img = as_tensor(img)
    if img.data.ndim != 3:
        raise ShapeMismatch(f"expected (C, H, W) map, got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"output size must be positive, got {(out_h, out_w)}")
    if isinstance(box, Box):
        box = box.as_array()
    box = as_tensor(box)
    if box.shape != (4,):
        raise ShapeMismatch(f"box must be (cx, cy, w, h), got shape {box.shape}")
    if not (np.isfinite(box.data).all() and box.data[2] > 0.0 and box.data[3] > 0.0):
        raise DegenerateBox(f"box size must be positive and finite, got {box.data}")

    cx, cy, w, h = box[0], box[1], box[2], box[3]
    fx = (np.arange(out_w, dtype=np.float64) + 0.5) / out_w
    fy = (np.arange(out_h, dtype=np.float64) + 0.5) / out_h
    xs = cx - w * 0.5 + w * fx
    ys = cy - h * 0.5 + h * fy
    gx = ad.take(xs, np.tile(np.arange(out_w), out_h), axis=0)
    gy = ad.take(ys, np.repeat(np.arange(out_h), out_w), axis=0)
    pts = ad.stack([gx, gy], axis=-1)
    samples = ad.bilinear_sample(img, pts)
    grid = ad.reshape(samples, (out_h, out_w, img.shape[0]))
    return ad.transpose(grid, (2, 0, 1))


def hflip_image(f) -> Tensor:
    """Mirror a (..., W) map across its vertical centerline."""
    return ad.flip(as_tensor(f), axis=-1)


def hflip_coords(p, width, perm=None) -> Tensor:
    """Mirror (J, k) grid coordinates: x -> width - 1 - x.

    `perm`, when given, reorders joints (row j of the output takes row
    perm[j] of the flipped input) so left/right joint identities follow
    the mirrored image content.
    """
    p = as_tensor(p)
    if p.data.ndim != 2 or p.shape[-1] < 1:
        raise ShapeMismatch(f"expected (J, k) coordinates, got shape {p.shape}")
    flipped_x = (width - 1.0) - p[:, 0:1]
    out = ad.concat([flipped_x, p[:, 1:]], axis=-1) if p.shape[-1] > 1 else flipped_x
    if perm is not None:
        out = ad.take(out, np.asarray(perm, dtype=np.intp), axis=0)
    return out
