"""Joint-feature pose regression head.

From a backbone feature map: a 1x1 convolution predicts per-joint 3D
heatmap logits; soft-argmax turns them into (x, y, z) grid coordinates;
a second 1x1 convolution makes a slim feature map that is bilinearly
sampled at each joint's (x, y); features and coordinates concatenate
into one flat vector for a fully-connected rotation regressor.

The sampling uses the soft-argmax (x, y) directly: heatmap grid and
feature grid share their resolution, so no rescaling happens here. The
z coordinate rides along in the flat vector but never drives sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import grid_ops as go
from .autodiff import Tensor, as_tensor
from .errors import ShapeMismatch, UnknownMode
from .layers import Linear, Conv2d

__all__ = [
    "Pose2PoseConfig", "Pose2PoseOutput", "Pose2Pose", "RotationRegressor",
    "VARIANT_MODES", "variant_inputs", "variant_length", "IDENTITY_6D",
]

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

VARIANT_MODES = ("gap", "joint_feat", "coord2d", "coord3d", "coord3d_plus_feat")


@dataclass(frozen=True)
class Pose2PoseConfig:
    num_joints: int
    depth_bins: int = 8
    in_channels: int = 32
    joint_channels: int = 16
    channel_order: str = "joint_major"  # heatmap channel c = j * Dz + d
    heat_gain: float = 1.0              # logit out_gain; init-neutral

    def __post_init__(self):
        for name in ("num_joints", "depth_bins", "in_channels", "joint_channels"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"{name} must be >= 1")
        if self.channel_order not in ("joint_major", "depth_major"):
            raise ShapeMismatch(f"unknown channel order {self.channel_order!r}")
        if self.heat_gain <= 0:
            raise ShapeMismatch("heat_gain must be > 0")

    @property
    def flat_length(self) -> int:
        return (self.joint_channels + 3) * self.num_joints


@dataclass
class Pose2PoseOutput:
    coords: Tensor          # (J, 3) heatmap-grid units
    volume: Tensor          # (J, Dz, H, W) logits
    joint_features: Tensor  # (J, C_joint)
    flat: Tensor            # ((C_joint + 3) * J,)


class Pose2Pose:
    """Heatmap head + positional feature pooling, as one forward pass."""

    def __init__(self, cfg: Pose2PoseConfig, rng):
        self.cfg = cfg
        self.heat = Conv2d(cfg.in_channels, cfg.num_joints * cfg.depth_bins, 1, rng,
                           out_gain=cfg.heat_gain)
        self.feat = Conv2d(cfg.in_channels, cfg.joint_channels, 1, rng)

    def params(self, prefix: str = "pose2pose") -> dict:
        return {**self.heat.params(f"{prefix}.heat"),
                **self.feat.params(f"{prefix}.feat")}

    def __call__(self, fmap) -> Pose2PoseOutput:
        fmap = as_tensor(fmap)
        if fmap.data.ndim != 3 or fmap.shape[0] != self.cfg.in_channels:
            raise ShapeMismatch(
                f"expected ({self.cfg.in_channels}, H, W) features, got {fmap.shape}")
        logits = self.heat(fmap)
        if self.cfg.channel_order == "joint_major":
            volume = go.reshape_to_volume(logits, self.cfg.depth_bins)
        else:
            j, d = self.cfg.num_joints, self.cfg.depth_bins
            volume = ad.transpose(
                go.reshape_to_volume(logits, j), (1, 0, 2, 3))
        coords = go.soft_argmax_3d(volume)
        fp = self.feat(fmap)
        joint_features = ad.bilinear_sample(fp, coords[:, :2])
        flat = ad.reshape(ad.concat([joint_features, coords], axis=-1), (-1,))
        return Pose2PoseOutput(coords=coords, volume=volume,
                               joint_features=joint_features, flat=flat)


class RotationRegressor:
    """One linear layer from a flat vector to per-joint 6D rotations.

    The default init is a zero weight matrix with the identity 6D rotation
    replicated in the bias, so training starts from the rest pose and the
    orthonormalization downstream never sees a collapsed frame.
    """

    def __init__(self, n_in: int, n_joints_out: int, rng,
                 weight_scale: float = 0.0, identity_bias: bool = True,
                 out_gain: float = 1.0):
        bias = np.tile(IDENTITY_6D, n_joints_out) if identity_bias else None
        self.fc = Linear(n_in, 6 * n_joints_out, rng,
                         weight_scale=weight_scale, bias_value=bias,
                         out_gain=out_gain)
        self.n_in = n_in
        self.n_joints_out = n_joints_out

    def params(self, prefix: str = "rot") -> dict:
        return self.fc.params(f"{prefix}.fc")

    def __call__(self, v, extra=None) -> Tensor:
        v = as_tensor(v)
        if extra is not None:
            v = ad.concat([v, as_tensor(extra)], axis=0)
        if v.shape != (self.n_in,):
            raise ShapeMismatch(
                f"regressor expects input length {self.n_in}, got {v.shape}")
        return ad.reshape(self.fc(v), (self.n_joints_out, 6))


def variant_inputs(mode: str, out: Pose2PoseOutput, fmap) -> Tensor:
    """Regressor input for each pooling ablation mode.

    gap: spatial mean of the backbone map; joint_feat: flattened sampled
    features; coord2d / coord3d: flattened coordinates; coord3d_plus_feat:
    the standard concatenated vector.
    """
    if mode == "gap":
        return ad.mean_pool_spatial(as_tensor(fmap))
    if mode == "joint_feat":
        return ad.reshape(out.joint_features, (-1,))
    if mode == "coord2d":
        return ad.reshape(out.coords[:, :2], (-1,))
    if mode == "coord3d":
        return ad.reshape(out.coords, (-1,))
    if mode == "coord3d_plus_feat":
        return out.flat
    raise UnknownMode(f"unknown pooling mode {mode!r}; options: {VARIANT_MODES}")


def variant_length(mode: str, cfg: Pose2PoseConfig) -> int:
    """Input length the rotation regressor needs for a pooling mode."""
    j, c = cfg.num_joints, cfg.joint_channels
    sizes = {"gap": cfg.in_channels, "joint_feat": c * j, "coord2d": 2 * j,
             "coord3d": 3 * j, "coord3d_plus_feat": (c + 3) * j}
    if mode not in sizes:
        raise UnknownMode(f"unknown pooling mode {mode!r}; options: {VARIANT_MODES}")
    return sizes[mode]
