"""Training losses: parameter, coordinate, and box terms, plainly summed.

Every term is a mean absolute difference so the three stay on comparable
scales. Coordinate targets live in the same units the network predicts:
heatmap x, y compared in input pixels of the branch that produced them,
heatmap z in depth bins, mesh joints in meters, projections in pixels of
the half-resolution body image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .body_model import L_WRIST, R_WRIST, ModelParams, perspective_project
from .errors import MissingGT, ShapeMismatch
from .pipeline import (PipelineConfig, PipelineOutput, body_to_image_px,
                       crop_pixels, pixels_to_grid)

__all__ = [
    "LossBreakdown", "CoordTargets", "LossTargets", "loss_param",
    "loss_coord", "loss_box", "compute_loss", "COORD_TERMS", "z_to_bins",
    "bins_to_z", "body_grid_targets", "hand_grid_targets",
    "halfres_intrinsics",
]

COORD_TERMS = ("heatmap", "joints3d", "joints2d")


@dataclass
class LossBreakdown:
    """Scalar graph tensors; total is the exact sum of the three parts."""

    l_param: Tensor
    l_coord: Tensor
    l_box: Tensor
    total: Tensor

    def floats(self) -> dict:
        return {"l_param": float(self.l_param.data),
                "l_coord": float(self.l_coord.data),
                "l_box": float(self.l_box.data),
                "total": float(self.total.data)}


@dataclass
class CoordTargets:
    """Ground truth for the three coordinate terms, each maskable.

    Grid targets are in heatmap-grid units (x, y cells and z bins) of
    their own branch; the left hand target lives in the mirrored-crop
    frame the network predicts in. Masks weight joints; a missing mask
    means uniform weights.
    """

    body_grid: np.ndarray | None = None    # (22, 3)
    rhand_grid: np.ndarray | None = None   # (15, 3)
    lhand_grid: np.ndarray | None = None   # (15, 3)
    joints3d: np.ndarray | None = None     # (53, 3) camera frame, meters
    joints2d: np.ndarray | None = None     # (53, 2) half-res pixels
    mask_body: np.ndarray | None = None    # (22,)
    mask_rhand: np.ndarray | None = None   # (15,)
    mask_lhand: np.ndarray | None = None   # (15,)
    mask3d: np.ndarray | None = None       # (53,)
    mask2d: np.ndarray | None = None       # (53,)


@dataclass
class LossTargets:
    params: ModelParams
    coords: CoordTargets
    boxes: dict = field(default_factory=dict)   # name -> (cx, cy, w, h), image px


# ---------------------------------------------------------------------------
# unit conversions shared with the data generator


def z_to_bins(z_rel, z_range: float, depth_bins: int):
    """Root-relative depth (m) -> bin coordinate; +/- z_range spans the bins."""
    return (z_rel / z_range + 1.0) * 0.5 * (depth_bins - 1)


def bins_to_z(b, z_range: float, depth_bins: int):
    return (b / (0.5 * (depth_bins - 1)) - 1.0) * z_range


def halfres_intrinsics(cfg: PipelineConfig):
    """Focal and principal point of the half-resolution body image."""
    h, w = cfg.body_input_hw
    return cfg.focal, ((w - 1) / 2.0, (h - 1) / 2.0)


def body_grid_targets(joints2d_halfres: np.ndarray, joints3d: np.ndarray,
                      cfg: PipelineConfig) -> np.ndarray:
    """Heatmap-grid targets for the 22 body joints.

    x, y come from the half-resolution projections; z is the pelvis-
    relative depth mapped onto the bin axis.
    """
    if joints2d_halfres.shape[0] < 22 or joints3d.shape[0] < 22:
        raise ShapeMismatch("need at least the 22 body joints")
    xy = pixels_to_grid(np.asarray(joints2d_halfres[:22], dtype=np.float64),
                        cfg.stride)
    z_rel = joints3d[:22, 2] - joints3d[0, 2]
    z = z_to_bins(z_rel, cfg.depth_range_body, cfg.depth_bins)
    return np.concatenate([xy, z[:, None]], axis=1)


def hand_grid_targets(joints2d_halfres: np.ndarray, joints3d: np.ndarray,
                      box: np.ndarray, side: str,
                      cfg: PipelineConfig) -> np.ndarray:
    """Heatmap-grid targets for one hand given the crop box actually used.

    The left hand is expressed in the mirrored-crop frame (the network
    sees a flipped crop), so its x axis is reversed inside the crop.
    """
    if side not in ("lhand", "rhand"):
        raise ShapeMismatch(f"side must be lhand or rhand, got {side!r}")
    lo, wrist = (22, L_WRIST) if side == "lhand" else (37, R_WRIST)
    u_img = body_to_image_px(np.asarray(joints2d_halfres[lo:lo + 15],
                                        dtype=np.float64))
    box = np.asarray(box, dtype=np.float64)
    s = cfg.hand_crop
    px = np.stack([crop_pixels(u_img[:, 0], box[0], box[2], s),
                   crop_pixels(u_img[:, 1], box[1], box[3], s)], axis=1)
    if side == "lhand":
        px[:, 0] = (s - 1.0) - px[:, 0]
    xy = pixels_to_grid(px, s // cfg.hand_grid)
    z_rel = joints3d[lo:lo + 15, 2] - joints3d[wrist, 2]
    z = z_to_bins(z_rel, cfg.depth_range_hand, cfg.depth_bins)
    return np.concatenate([xy, z[:, None]], axis=1)


# ---------------------------------------------------------------------------
# loss terms


def loss_param(pred: ModelParams, gt: ModelParams) -> Tensor:
    """Mean absolute difference over all 182 parameter entries."""
    parts = []
    for name in ModelParams._SHAPES:
        p = as_tensor(getattr(pred, name))
        g = as_tensor(getattr(gt, name))
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: {p.shape} vs {g.shape}")
        parts.append(ad.reshape(p - g, (-1,)))
    return ad.tmean(ad.absolute(ad.concat(parts, axis=0)))


def _masked_l1(pred: Tensor, gt: np.ndarray, mask: np.ndarray | None):
    """Sum of masked absolute differences and the masked entry count."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {gt.shape}")
    k = gt.shape[-1]
    if mask is None:
        mask = np.ones(gt.shape[0])
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (gt.shape[0],):
        raise ShapeMismatch(f"mask must be ({gt.shape[0]},), got {mask.shape}")
    diff = ad.absolute(pred - gt) * mask[:, None]
    return ad.tsum(diff), float(mask.sum() * k)


def loss_coord(out: PipelineOutput, targets: CoordTargets, cfg: PipelineConfig,
               terms=COORD_TERMS) -> Tensor:
    """Sum of the three coordinate terms, each a masked mean L1.

    Active terms come from `terms`; an active term with no ground truth
    raises MissingGT. An empty `terms` gives an exact zero.
    """
    unknown = set(terms) - set(COORD_TERMS)
    if unknown:
        raise MissingGT(f"unknown coordinate terms {sorted(unknown)}")
    total = ad.constant(0.0)
    if "heatmap" in terms:
        if targets.body_grid is None or targets.rhand_grid is None \
                or targets.lhand_grid is None:
            raise MissingGT("heatmap term needs body, rhand, and lhand targets")
        crop_stride = cfg.hand_crop // cfg.hand_grid
        pieces = [
            (_grid_to_px(out.coords_body, cfg.stride),
             _grid_targets_px(targets.body_grid, cfg.stride), targets.mask_body),
            (_grid_to_px(out.coords_rhand, crop_stride),
             _grid_targets_px(targets.rhand_grid, crop_stride), targets.mask_rhand),
            (_grid_to_px(out.coords_lhand, crop_stride),
             _grid_targets_px(targets.lhand_grid, crop_stride), targets.mask_lhand),
        ]
        num, den = ad.constant(0.0), 0.0
        for pred, gt, mask in pieces:
            n, d = _masked_l1(pred, gt, mask)
            num, den = num + n, den + d
        if den > 0:
            total = total + num / den
    if "joints3d" in terms:
        if targets.joints3d is None:
            raise MissingGT("joints3d term has no target")
        num, den = _masked_l1(out.joints3d, targets.joints3d, targets.mask3d)
        if den > 0:
            total = total + num / den
    if "joints2d" in terms:
        if targets.joints2d is None:
            raise MissingGT("joints2d term has no target")
        focal, princpt = halfres_intrinsics(cfg)
        projected = perspective_project(out.joints3d, focal, princpt)
        num, den = _masked_l1(projected, targets.joints2d, targets.mask2d)
        if den > 0:
            total = total + num / den
    return total


def _grid_to_px(coords, stride):
    # offsets cancel in differences; the stride scales x, y into pixels
    scale = np.array([float(stride), float(stride), 1.0])
    return as_tensor(coords) * scale


def _grid_targets_px(grid: np.ndarray, stride) -> np.ndarray:
    return np.asarray(grid, dtype=np.float64) * np.array([stride, stride, 1.0])


def loss_box(pred_boxes: dict, gt_boxes: dict, image_hw) -> Tensor:
    """Mean L1 over the 12 box entries, normalized by the image size."""
    names = ("lhand", "rhand", "face")
    for name in names:
        if name not in pred_boxes or name not in gt_boxes:
            raise ShapeMismatch(f"missing box {name!r}")
    h, w = image_hw
    norm = np.array([w, h, w, h], dtype=np.float64)
    parts = []
    for name in names:
        p = as_tensor(pred_boxes[name])
        g = np.asarray(gt_boxes[name].as_array() if hasattr(gt_boxes[name],
                       "as_array") else gt_boxes[name], dtype=np.float64)
        if p.shape != (4,) or g.shape != (4,):
            raise ShapeMismatch(f"box {name!r} must be (cx, cy, w, h)")
        parts.append(p / norm - g / norm)
    return ad.tmean(ad.absolute(ad.concat(parts, axis=0)))


def compute_loss(out: PipelineOutput, targets: LossTargets, cfg: PipelineConfig,
                 terms=COORD_TERMS) -> LossBreakdown:
    l_param = loss_param(out.params, targets.params)
    l_coord = loss_coord(out, targets.coords, cfg, terms=terms)
    l_box = loss_box(out.boxes, targets.boxes, cfg.image_hw)
    return LossBreakdown(l_param=l_param, l_coord=l_coord, l_box=l_box,
                         total=l_param + l_coord + l_box)
