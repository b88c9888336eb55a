"""Whole-body pose pipeline: body, hands, and face in two phases.

Phase 1 runs a small convolutional backbone on a half-resolution body
image, predicts per-joint 3D heatmaps with pooled joint features, and
localizes hand and face crops with a differentiable box head (2D
soft-argmax centers, log-scale sizes). Phase 2 crops the full image at
those boxes, runs dedicated hand and face branches, and feeds knuckle
evidence from the hand branch back into the body rotation regressor
before the parametric mesh is posed. The left hand shares the right
hand network: its crop is mirrored before the forward pass and the
regressed rotations are mirrored back.

Pixel conventions. A cell g of a stride-s feature grid sits at input
pixel (g + 0.5) * s - 0.5, and a half-resolution pixel u sits at full
resolution 2u + 0.5. Both maps commute with horizontal mirroring of
even-width images, which keeps flip consistency exact rather than
approximate; the corner-anchored map g * s does not and is avoided
everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import grid_ops as go
from . import storage
from .autodiff import Tensor, as_tensor
from .body_model import (BodyModel, MeshOutput, ModelParams, forward_model,
                         regress_joints)
from .errors import FormatError, ShapeMismatch, UnknownMode
from .layers import Conv2d, Linear
from .pose2pose import (Pose2Pose, Pose2PoseConfig, Pose2PoseOutput,
                        RotationRegressor, VARIANT_MODES, variant_inputs,
                        variant_length)
from .rotations import matrix_to_axis_angle, mirror_rotation, rot6d_to_matrix

__all__ = [
    "PipelineConfig", "toy_profile", "reference_profile", "config_to_dict",
    "config_from_dict", "Backbone", "WholeBodyPipeline", "Phase1Output",
    "HandOutput", "FaceOutput", "PipelineOutput", "BOX_NAMES", "WRIST_MODES",
    "avg_pool2", "grid_to_pixels", "pixels_to_grid", "body_to_image_px",
    "image_to_body_px", "crop_pixels", "mirror_box", "wrist_extra_length",
    "symmetrize_weights", "load_pipeline",
]

BOX_NAMES = ("lhand", "rhand", "face")

WRIST_MODES = ("body_only", "body_plus_hand_gap", "body_plus_all_joints",
               "body_plus_mcp")


# ---------------------------------------------------------------------------
# coordinate maps shared by the network, the losses, and the data generator


def grid_to_pixels(g, stride):
    """Stride-s grid coordinate -> input pixel of the same map."""
    return (g + 0.5) * float(stride) - 0.5


def pixels_to_grid(u, stride):
    return (u + 0.5) / float(stride) - 0.5


def body_to_image_px(u):
    """Half-resolution pixel -> full-image pixel (2x average pooling)."""
    return u * 2.0 + 0.5


def image_to_body_px(u):
    return (u - 0.5) * 0.5


def crop_pixels(u, box_center, box_size, out_size):
    """Image pixel -> pixel of an out_size crop resampled from the box."""
    return (u - (box_center - box_size * 0.5)) * (out_size / box_size) - 0.5


def mirror_box(box: np.ndarray, image_w: int) -> np.ndarray:
    """Horizontal mirror of a (cx, cy, w, h) box in a width-image_w image."""
    out = np.array(box, dtype=np.float64)
    out[0] = (image_w - 1.0) - out[0]
    return out


def avg_pool2(x) -> Tensor:
    """2x2 average pooling; requires even spatial dims."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"expected (C, H, W), got shape {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"pooling needs even spatial dims, got {(h, w)}")
    return ad.tmean(ad.reshape(x, (c, h // 2, 2, w // 2, 2)), axis=(2, 4))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PipelineConfig:
    """Geometry, capacity, and ablation switches for the whole pipeline.

    The full image must be exactly twice the body input (the body branch
    sees a 2x downsample; crops sample the full image), the body input
    must keep a 4:3 portrait aspect, and every branch input must divide
    by the backbone stride so the flip symmetry of pooling stays exact.
    """

    image_hw: tuple = (128, 96)
    body_input_hw: tuple = (64, 48)
    face_input_hw: tuple = (48, 48)
    hand_crop: int = 64
    backbone_channels: tuple = (8, 16, 32)
    depth_bins: int = 8
    joint_channels: int = 16
    channel_order: str = "joint_major"
    regressor_input_mode: str = "coord3d_plus_feat"
    wrist_input_mode: str = "body_plus_mcp"
    finger_body_feature: bool = False
    detach_wrist_extras: bool = False
    mcp_joint_slots: tuple = (0, 3, 6, 9)
    box_hidden_channels: int = 32
    size_hidden: int = 32
    hand_box_base: float = 20.0
    face_box_base: float = 28.0
    focal: tuple = (5000.0, 5000.0)
    depth_range_body: float = 1.0
    depth_range_hand: float = 0.25
    trans_z_init: float = 190.0
    input_scale: float = 8.0  # intensity normalization: sparse blob scenes
                              # average far below 1, this lifts first-stage
                              # activations to order one
    heat_gain: float = 16.0   # logit-head out_gain; powers of 2 keep init exact
    head_gain: float = 16.0   # regressor-head out_gain

    def __post_init__(self):
        ih, iw = self.image_hw
        bh, bw = self.body_input_hw
        fh, fw = self.face_input_hw
        if (ih, iw) != (2 * bh, 2 * bw):
            raise ShapeMismatch(
                f"image {self.image_hw} must be twice the body input {self.body_input_hw}")
        if bh * 3 != bw * 4:
            raise ShapeMismatch(f"body input {self.body_input_hw} must be 4:3 portrait")
        if fh != fw:
            raise ShapeMismatch(f"face input {self.face_input_hw} must be square")
        s = self.stride
        for name, dim in (("body", bh), ("body", bw), ("face", fh),
                          ("hand", self.hand_crop)):
            if dim < 2 * s or dim % s:
                raise ShapeMismatch(
                    f"{name} input size {dim} must be a multiple of stride {s}")
        if self.depth_bins < 2:
            raise ShapeMismatch("depth_bins must be >= 2")
        if self.regressor_input_mode not in VARIANT_MODES:
            raise UnknownMode(
                f"unknown regressor input mode {self.regressor_input_mode!r}; "
                f"options: {VARIANT_MODES}")
        if self.wrist_input_mode not in WRIST_MODES:
            raise UnknownMode(
                f"unknown wrist input mode {self.wrist_input_mode!r}; "
                f"options: {WRIST_MODES}")
        slots = tuple(self.mcp_joint_slots)
        if not slots or len(set(slots)) != len(slots) or \
                any(not (0 <= i < 15) for i in slots):
            raise ShapeMismatch(f"bad knuckle slots {slots}: need unique ids in [0, 15)")
        for name in ("hand_box_base", "face_box_base", "depth_range_body",
                     "depth_range_hand", "trans_z_init", "input_scale",
                     "heat_gain", "head_gain"):
            if getattr(self, name) <= 0:
                raise ShapeMismatch(f"{name} must be positive")

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def body_grid_hw(self) -> tuple:
        s = self.stride
        return (self.body_input_hw[0] // s, self.body_input_hw[1] // s)

    @property
    def hand_grid(self) -> int:
        return self.hand_crop // self.stride


def toy_profile(**overrides) -> PipelineConfig:
    """Desk-scale geometry: trains in minutes on a CPU."""
    return PipelineConfig(**overrides)


def reference_profile(**overrides) -> PipelineConfig:
    """Full-scale geometry (paper-sized inputs, deeper heads)."""
    base = dict(image_hw=(512, 384), body_input_hw=(256, 192),
                face_input_hw=(192, 192), hand_crop=256,
                backbone_channels=(16, 32, 64), depth_bins=64,
                joint_channels=32, hand_box_base=80.0, face_box_base=112.0,
                focal=(20000.0, 20000.0))
    base.update(overrides)
    return PipelineConfig(**base)


def config_to_dict(cfg: PipelineConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_from_dict(d: dict) -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(d) - known
    if unknown:
        raise FormatError(f"unknown config fields: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return PipelineConfig(**kw)


# ---------------------------------------------------------------------------
# network pieces


class Backbone:
    """Stack of conv3x3 + relu + 2x average-pool stages.

    Stride-1 same-padded convolutions followed by even pooling keep the
    output exactly equivariant to horizontal mirroring once kernels are
    width-symmetric. `inject`, when given, is added into the first-stage
    output (after pooling) before deeper stages consume it.
    """

    def __init__(self, c_in: int, channels: tuple, rng):
        self.convs = []
        prev = c_in
        for c in channels:
            self.convs.append(Conv2d(prev, c, 3, rng))
            prev = c

    def __call__(self, x, inject=None):
        h = as_tensor(x)
        block1 = None
        for i, conv in enumerate(self.convs):
            h = avg_pool2(ad.relu(conv(h)))
            if i == 0:
                if inject is not None:
                    h = h + as_tensor(inject)
                block1 = h
        return h, block1

    def params(self, prefix: str) -> dict:
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.conv{i}"))
        return out


def wrist_extra_length(cfg: PipelineConfig) -> int:
    """Length of the hand-evidence vector appended to the body regressor."""
    per_joint = cfg.joint_channels + 3
    sizes = {
        "body_only": 0,
        "body_plus_hand_gap": 2 * cfg.backbone_channels[-1],
        "body_plus_all_joints": 2 * 15 * per_joint,
        "body_plus_mcp": 2 * len(cfg.mcp_joint_slots) * per_joint,
    }
    if cfg.wrist_input_mode not in sizes:
        raise UnknownMode(f"unknown wrist input mode {cfg.wrist_input_mode!r}")
    return sizes[cfg.wrist_input_mode]


# ---------------------------------------------------------------------------
# forward-pass result bundles


@dataclass
class Phase1Output:
    features: Tensor          # (C, Hg, Wg) body backbone output
    block1: Tensor            # first-stage body features
    pose: Pose2PoseOutput     # 22 body joints
    v_base: Tensor            # rotation-regressor input, before hand evidence
    boxes: dict               # name -> (cx, cy, w, h) tensor, image pixels
    centers_grid: Tensor      # (3, 2) box centers on the body grid
    sizes: Tensor             # (3, 2) box sizes, image pixels


@dataclass
class HandOutput:
    theta_rhand: Tensor       # (15, 3) axis-angle
    theta_lhand: Tensor       # (15, 3) axis-angle, mirrored back
    pose_rhand: Pose2PoseOutput
    pose_lhand: Pose2PoseOutput   # in the mirrored crop frame
    features_rhand: Tensor
    features_lhand: Tensor
    v_m: Tensor               # knuckle features+coords, right block first


@dataclass
class FaceOutput:
    theta_jaw: Tensor         # (3,) axis-angle
    psi: Tensor               # (10,) expression


@dataclass
class PipelineOutput:
    params: ModelParams
    mesh: MeshOutput
    joints3d: Tensor          # (53, 3) regressed from the posed mesh
    boxes: dict               # predicted boxes (always from the box head)
    boxes_used: dict          # boxes the crops were actually taken at
    coords_body: Tensor       # (22, 3) body-grid units
    coords_rhand: Tensor      # (15, 3) hand-crop grid units
    coords_lhand: Tensor      # (15, 3) mirrored-crop grid units
    v_m: Tensor
    phase1: Phase1Output
    hand: HandOutput
    face: FaceOutput


# ---------------------------------------------------------------------------
# the pipeline


class WholeBodyPipeline:
    """Owns all weights; every forward builds one differentiable graph."""

    def __init__(self, cfg: PipelineConfig, model: BodyModel, rng):
        if model.num_joints != 53:
            raise ShapeMismatch(f"expected a 53-joint model, got {model.num_joints}")
        self.cfg = cfg
        self.model = model
        c_feat = cfg.backbone_channels[-1]
        self.body_cfg = Pose2PoseConfig(
            num_joints=22, depth_bins=cfg.depth_bins, in_channels=c_feat,
            joint_channels=cfg.joint_channels, channel_order=cfg.channel_order,
            heat_gain=cfg.heat_gain)
        self.hand_cfg = Pose2PoseConfig(
            num_joints=15, depth_bins=cfg.depth_bins, in_channels=c_feat,
            joint_channels=cfg.joint_channels, channel_order=cfg.channel_order,
            heat_gain=cfg.heat_gain)

        self.body_backbone = Backbone(3, cfg.backbone_channels, rng)
        self.body_p2p = Pose2Pose(self.body_cfg, rng)
        box_in = c_feat + 22 * cfg.depth_bins
        self.box_convs = [Conv2d(box_in, cfg.box_hidden_channels, 3, rng),
                          Conv2d(cfg.box_hidden_channels, 3, 3, rng,
                                 out_gain=cfg.heat_gain)]
        self.size_fcs = [Linear(c_feat, cfg.size_hidden, rng),
                         Linear(cfg.size_hidden, 2, rng, weight_scale=0.0,
                                out_gain=cfg.head_gain)]
        n_in = variant_length(cfg.regressor_input_mode, self.body_cfg)
        self.body_rot = RotationRegressor(n_in + wrist_extra_length(cfg), 22, rng,
                                          out_gain=cfg.head_gain)
        shape_bias = np.zeros(13)
        shape_bias[12] = cfg.trans_z_init
        self.shape_head = Linear(c_feat, 13, rng, bias_value=shape_bias,
                                 out_gain=cfg.head_gain)

        self.hand_backbone = Backbone(3, cfg.backbone_channels, rng)
        self.hand_p2p = Pose2Pose(self.hand_cfg, rng)
        self.hand_rot = RotationRegressor(
            variant_length(cfg.regressor_input_mode, self.hand_cfg), 15, rng,
            out_gain=cfg.head_gain)

        self.face_backbone = Backbone(3, cfg.backbone_channels, rng)
        face_bias = np.zeros(16)
        face_bias[:6] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
        self.face_fc = Linear(c_feat, 16, rng, weight_scale=0.0,
                              bias_value=face_bias, out_gain=cfg.head_gain)

        self._box_bases = (cfg.hand_box_base, cfg.hand_box_base, cfg.face_box_base)

    # -- parameter plumbing -------------------------------------------------

    def params(self) -> dict:
        p = {}
        p.update(self.body_backbone.params("body_backbone"))
        p.update(self.body_p2p.params("body_p2p"))
        p.update(self.box_convs[0].params("box_head.conv0"))
        p.update(self.box_convs[1].params("box_head.conv1"))
        p.update(self.size_fcs[0].params("size_head.fc0"))
        p.update(self.size_fcs[1].params("size_head.fc1"))
        p.update(self.body_rot.params("body_rot"))
        p.update(self.shape_head.params("shape_head"))
        p.update(self.hand_backbone.params("hand_backbone"))
        p.update(self.hand_p2p.params("hand_p2p"))
        p.update(self.hand_rot.params("hand_rot"))
        p.update(self.face_backbone.params("face_backbone"))
        p.update(self.face_fc.params("face_fc"))
        return p

    def state_arrays(self) -> dict:
        return {k: t.data.copy() for k, t in self.params().items()}

    def load_state(self, arrays: dict) -> None:
        own = self.params()
        if set(arrays) != set(own):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise FormatError(f"checkpoint keys disagree: missing {missing}, "
                              f"unexpected {extra}")
        for k, t in own.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeMismatch(f"{k}: checkpoint shape {arr.shape} != "
                                    f"model shape {t.data.shape}")
            t.data[...] = arr

    def save(self, path, meta: dict | None = None) -> None:
        full = {"config": config_to_dict(self.cfg)}
        if meta:
            full.update(meta)
        storage.save_checkpoint(path, self.state_arrays(), full)

    # -- phase 1: body ------------------------------------------------------

    def body_phase1(self, image_body) -> Phase1Output:
        cfg = self.cfg
        image_body = as_tensor(image_body)
        if image_body.shape != (3, *cfg.body_input_hw):
            raise ShapeMismatch(f"body input must be (3, *{cfg.body_input_hw}), "
                                f"got {image_body.shape}")
        features, block1 = self.body_backbone(image_body * cfg.input_scale)
        pose = self.body_p2p(features)
        heat_channels = go.volume_to_channels(pose.volume)
        box_map = ad.relu(self.box_convs[0](ad.concat([features, heat_channels],
                                                      axis=0)))
        box_map = self.box_convs[1](box_map)
        centers_grid = go.soft_argmax_2d(box_map)            # (3, 2)
        centers_img = body_to_image_px(grid_to_pixels(centers_grid, cfg.stride))
        feats = ad.bilinear_sample(features, centers_grid)   # (3, C)
        size_rows = []
        for i in range(3):
            hidden = ad.relu(self.size_fcs[0](feats[i]))
            size_rows.append(ad.exp(self.size_fcs[1](hidden)) * self._box_bases[i])
        sizes = ad.stack(size_rows, axis=0)                  # (3, 2)
        boxes = {name: ad.concat([centers_img[i], sizes[i]], axis=0)
                 for i, name in enumerate(BOX_NAMES)}
        v_base = variant_inputs(cfg.regressor_input_mode, pose, features)
        return Phase1Output(features=features, block1=block1, pose=pose,
                            v_base=v_base, boxes=boxes,
                            centers_grid=centers_grid, sizes=sizes)

    # -- hands ----------------------------------------------------------------

    def _inject_box(self, box) -> Tensor:
        # image-pixel box -> body first-stage grid (stride 4): u1 = (u - 1.5)/4
        shift = ad.constant(np.array([1.5, 1.5, 0.0, 0.0]))
        return (as_tensor(box) - shift) * 0.25

    def handnet_forward(self, image, box_lhand, box_rhand,
                        body_block1=None) -> HandOutput:
        cfg = self.cfg
        image = as_tensor(image)
        s = cfg.hand_crop
        crop_r = go.roi_align(image, box_rhand, s, s) * cfg.input_scale
        crop_l = go.hflip_image(go.roi_align(image, box_lhand, s, s)) \
            * cfg.input_scale
        inj_r = inj_l = None
        if body_block1 is not None:
            half = s // 2
            inj_r = go.roi_align(body_block1, self._inject_box(box_rhand),
                                 half, half)
            inj_l = go.hflip_image(go.roi_align(
                body_block1, self._inject_box(box_lhand), half, half))
        feat_r, _ = self.hand_backbone(crop_r, inject=inj_r)
        feat_l, _ = self.hand_backbone(crop_l, inject=inj_l)
        pose_r = self.hand_p2p(feat_r)
        pose_l = self.hand_p2p(feat_l)
        six_r = self.hand_rot(variant_inputs(cfg.regressor_input_mode, pose_r,
                                             feat_r))
        six_l = self.hand_rot(variant_inputs(cfg.regressor_input_mode, pose_l,
                                             feat_l))
        theta_r = matrix_to_axis_angle(rot6d_to_matrix(six_r))
        theta_l = mirror_rotation(matrix_to_axis_angle(rot6d_to_matrix(six_l)))

        idx = np.asarray(cfg.mcp_joint_slots, dtype=np.intp)

        def knuckle_rows(pose_out):
            rows = ad.concat([ad.take(pose_out.joint_features, idx, axis=0),
                              ad.take(pose_out.coords, idx, axis=0)], axis=-1)
            return ad.reshape(rows, (-1,))

        v_m = ad.concat([knuckle_rows(pose_r), knuckle_rows(pose_l)], axis=0)
        return HandOutput(theta_rhand=theta_r, theta_lhand=theta_l,
                          pose_rhand=pose_r, pose_lhand=pose_l,
                          features_rhand=feat_r, features_lhand=feat_l, v_m=v_m)

    def _wrist_extras(self, hand: HandOutput):
        mode = self.cfg.wrist_input_mode
        if mode == "body_only":
            return None
        if mode == "body_plus_hand_gap":
            extras = ad.concat([ad.mean_pool_spatial(hand.features_rhand),
                                ad.mean_pool_spatial(hand.features_lhand)], axis=0)
        elif mode == "body_plus_all_joints":
            extras = ad.concat([hand.pose_rhand.flat, hand.pose_lhand.flat], axis=0)
        elif mode == "body_plus_mcp":
            extras = hand.v_m
        else:
            raise UnknownMode(f"unknown wrist input mode {mode!r}")
        if self.cfg.detach_wrist_extras:
            extras = ad.detach(extras)
        return extras

    # -- phase 2: body rotations, shape, camera ------------------------------

    def body_phase2(self, phase1: Phase1Output, hand: HandOutput):
        """Final body rotations plus shape and camera translation."""
        six = self.body_rot(phase1.v_base, extra=self._wrist_extras(hand))
        theta_body = matrix_to_axis_angle(rot6d_to_matrix(six))
        shape_cam = self.shape_head(ad.mean_pool_spatial(phase1.features))
        return theta_body, shape_cam[:10], shape_cam[10:]

    # -- face -----------------------------------------------------------------

    def facenet_forward(self, image, box_face) -> FaceOutput:
        fh, fw = self.cfg.face_input_hw
        crop = go.roi_align(as_tensor(image), box_face, fh, fw)
        feat, _ = self.face_backbone(crop * self.cfg.input_scale)
        out = self.face_fc(ad.mean_pool_spatial(feat))       # (16,)
        jaw = matrix_to_axis_angle(rot6d_to_matrix(ad.reshape(out[:6], (1, 6))))
        return FaceOutput(theta_jaw=jaw[0], psi=out[6:])

    # -- everything -----------------------------------------------------------

    def full_forward(self, image, override_boxes: dict | None = None
                     ) -> PipelineOutput:
        cfg = self.cfg
        image = as_tensor(image)
        if image.shape != (3, *cfg.image_hw):
            raise ShapeMismatch(f"image must be (3, *{cfg.image_hw}), "
                                f"got {image.shape}")
        phase1 = self.body_phase1(avg_pool2(image))
        if override_boxes is None:
            boxes_used = dict(phase1.boxes)
        else:
            boxes_used = {name: _box_tensor(override_boxes[name])
                          for name in BOX_NAMES}
        block1 = phase1.block1 if cfg.finger_body_feature else None
        hand = self.handnet_forward(image, boxes_used["lhand"],
                                    boxes_used["rhand"], body_block1=block1)
        theta_body, beta, trans = self.body_phase2(phase1, hand)
        face = self.facenet_forward(image, boxes_used["face"])
        params = ModelParams(theta_body=theta_body,
                             theta_lhand=hand.theta_lhand,
                             theta_rhand=hand.theta_rhand,
                             theta_jaw=face.theta_jaw,
                             beta=beta, psi=face.psi, trans=trans)
        mesh = forward_model(self.model, params)
        joints3d = regress_joints(self.model, mesh.vertices)
        return PipelineOutput(params=params, mesh=mesh, joints3d=joints3d,
                              boxes=phase1.boxes, boxes_used=boxes_used,
                              coords_body=phase1.pose.coords,
                              coords_rhand=hand.pose_rhand.coords,
                              coords_lhand=hand.pose_lhand.coords,
                              v_m=hand.v_m, phase1=phase1, hand=hand, face=face)


def _box_tensor(box) -> Tensor:
    if isinstance(box, go.Box):
        box = box.as_array()
    return as_tensor(box)


def load_pipeline(path, model: BodyModel):
    """Rebuild a pipeline from a checkpoint; returns (pipeline, metadata)."""
    arrays, meta = storage.load_checkpoint(path)
    if "config" not in meta:
        raise FormatError(f"{path}: checkpoint metadata lacks a config")
    cfg = config_from_dict(meta["config"])
    pipe = WholeBodyPipeline(cfg, model, np.random.default_rng(0))
    pipe.load_state(arrays)
    return pipe, meta


# ---------------------------------------------------------------------------
# mirror symmetrization
#
# Projects the weights onto the subspace where the whole pipeline is
# exactly equivariant to horizontal image mirroring: flipped input ->
# joint-permuted, x-mirrored, rotation-mirrored output. Hand branches
# need no projection (the two crops swap roles exactly); shared heads
# whose input is flip-invariant get their mirror-odd output rows zeroed.


def _perm_sign_matrix(n: int, perm=None, sign=None) -> np.ndarray:
    m = np.zeros((n, n))
    perm = np.arange(n) if perm is None else np.asarray(perm, dtype=np.intp)
    s = np.ones(n) if sign is None else np.asarray(sign, dtype=np.float64)
    m[np.arange(n), perm] = s
    return m


def _row_block(perm_rows: np.ndarray, row_len: int, x_slots=(), x_offset=0.0):
    """Transform acting per joint row: rows permute, x slots mirror."""
    j = len(perm_rows)
    perm = (perm_rows[:, None] * row_len + np.arange(row_len)).reshape(-1)
    sign = np.ones(j * row_len)
    offset = np.zeros(j * row_len)
    for slot in x_slots:
        sign[slot::row_len] = -1.0
        offset[slot::row_len] = x_offset
    return perm, sign, offset


def _swap_block(n_half: int):
    perm = np.concatenate([np.arange(n_half, 2 * n_half), np.arange(n_half)])
    return perm, np.ones(2 * n_half), np.zeros(2 * n_half)


def _identity_block(n: int):
    return np.arange(n), np.ones(n), np.zeros(n)


def _concat_blocks(blocks):
    perms, signs, offsets = [], [], []
    base = 0
    for perm, sign, offset in blocks:
        perms.append(perm + base)
        signs.append(sign)
        offsets.append(offset)
        base += len(perm)
    return (np.concatenate(perms), np.concatenate(signs),
            np.concatenate(offsets))


def _body_input_descriptor(pipe: "WholeBodyPipeline"):
    """(perm, sign, offset) of the full body-regressor input under a flip."""
    cfg = pipe.cfg
    perm_j = pipe.model.left_right_pairs[:22]
    grid_w = cfg.body_grid_hw[1]
    c = cfg.joint_channels
    mode = cfg.regressor_input_mode
    if mode == "gap":
        base = _identity_block(cfg.backbone_channels[-1])
    elif mode == "joint_feat":
        base = _row_block(perm_j, c)
    elif mode == "coord2d":
        base = _row_block(perm_j, 2, x_slots=(0,), x_offset=grid_w - 1.0)
    elif mode == "coord3d":
        base = _row_block(perm_j, 3, x_slots=(0,), x_offset=grid_w - 1.0)
    else:
        base = _row_block(perm_j, c + 3, x_slots=(c,), x_offset=grid_w - 1.0)
    blocks = [base]
    extra = wrist_extra_length(cfg)
    if extra:
        blocks.append(_swap_block(extra // 2))
    return _concat_blocks(blocks)


def _affine_conjugate(linear: Linear, s_mat: np.ndarray, p_mat: np.ndarray,
                      q: np.ndarray) -> None:
    """Average an affine map with its mirror conjugate, in place.

    With input law v' = P v + q and output law y' = S y, the averaged
    map satisfies f(P v + q) = S f(v) exactly (P q = -q is required and
    holds for all descriptors here).
    """
    a = linear.w.data
    b = linear.b.data
    a_sym = 0.5 * (a + s_mat @ a @ p_mat)
    b_sym = 0.5 * (b + s_mat @ b) - 0.5 * (a_sym @ q)
    a[...] = a_sym
    b[...] = b_sym


def symmetrize_weights(pipe: WholeBodyPipeline) -> None:
    cfg = pipe.cfg
    perm_j = pipe.model.left_right_pairs[:22]
    dz = cfg.depth_bins

    for conv in pipe.body_backbone.convs + pipe.face_backbone.convs:
        w = conv.w.data
        w[...] = 0.5 * (w + w[..., ::-1])

    # heatmap channels must trade left/right joint identities under a flip
    heat_perm = (perm_j[:, None] * dz + np.arange(dz)).reshape(-1)
    hw = pipe.body_p2p.heat.w.data
    hb = pipe.body_p2p.heat.b.data
    hw[...] = 0.5 * (hw + hw[heat_perm])
    hb[...] = 0.5 * (hb + hb[heat_perm])

    # box head: input channels carry the heatmap permutation, output
    # channels swap the two hand boxes
    c_feat = cfg.backbone_channels[-1]
    pin = np.concatenate([np.arange(c_feat), c_feat + heat_perm])
    w0 = pipe.box_convs[0].w.data
    w0[...] = 0.5 * (w0 + w0[:, pin][..., ::-1])
    pout = np.array([1, 0, 2])
    w1 = pipe.box_convs[1].w.data
    b1 = pipe.box_convs[1].b.data
    w1[...] = 0.5 * (w1 + w1[pout][..., ::-1])
    b1[...] = 0.5 * (b1 + b1[pout])

    # body rotation regressor: conjugate by the input/output mirror laws
    perm, sign, offset = _body_input_descriptor(pipe)
    p_mat = _perm_sign_matrix(len(perm), perm, sign)
    six_sign = np.array([1.0, -1.0, -1.0, -1.0, 1.0, 1.0])
    out_perm, out_sign, _ = _row_block(perm_j, 6)
    s_mat = _perm_sign_matrix(22 * 6, out_perm, np.tile(six_sign, 22))
    _affine_conjugate(pipe.body_rot.fc, s_mat, p_mat, offset)

    # shape/camera head input is flip-invariant; lateral translation is
    # mirror-odd, so its row must vanish
    n_gap = pipe.shape_head.w.data.shape[1]
    s_shape = _perm_sign_matrix(13, sign=np.array([1.0] * 10 + [-1.0, 1.0, 1.0]))
    _affine_conjugate(pipe.shape_head, s_shape, np.eye(n_gap), np.zeros(n_gap))

    # face head likewise: mirror-odd jaw components vanish, expression stays
    n_face = pipe.face_fc.w.data.shape[1]
    s_face = _perm_sign_matrix(16, sign=np.concatenate([six_sign, np.ones(10)]))
    _affine_conjugate(pipe.face_fc, s_face, np.eye(n_face), np.zeros(n_face))
