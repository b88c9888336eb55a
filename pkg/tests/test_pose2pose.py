"""Joint-feature regression head: shapes, recomposition, gradients.

The sampled joint features are recomputed with an independent bilinear
oracle; the pooled-variant vectors get explicit construction oracles.
"""

import numpy as np
import pytest

from wbpose import autodiff as ad
from wbpose import grid_ops as go
from wbpose import pose2pose as pp
from wbpose.errors import ShapeMismatch, UnknownMode

RNG = np.random.default_rng(29)
CFG = pp.Pose2PoseConfig(num_joints=5, depth_bins=4, in_channels=8,
                         joint_channels=6)


def data(t):
    return t.data if isinstance(t, ad.Tensor) else np.asarray(t)


def make_net(seed=0):
    return pp.Pose2Pose(CFG, np.random.default_rng(seed))


def bilinear_oracle(fmap, x, y):
    h, w = fmap.shape[1:]
    x, y = min(max(x, 0.0), w - 1.0), min(max(y, 0.0), h - 1.0)
    x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * fmap[:, y0, x0]
            + fx * (1 - fy) * fmap[:, y0, x0 + 1]
            + (1 - fx) * fy * fmap[:, y0 + 1, x0]
            + fx * fy * fmap[:, y0 + 1, x0 + 1])


def test_output_shapes_and_flat_layout():
    net = make_net()
    out = net(RNG.normal(size=(8, 6, 7)))
    assert out.coords.shape == (5, 3)
    assert out.volume.shape == (5, 4, 6, 7)
    assert out.joint_features.shape == (5, 6)
    assert out.flat.shape == ((6 + 3) * 5,)
    want = np.concatenate(
        [data(out.joint_features), data(out.coords)], axis=-1).ravel()
    np.testing.assert_array_equal(data(out.flat), want)


def test_coords_stay_in_voxel_box():
    net = make_net(1)
    for _ in range(5):
        out = net(RNG.normal(size=(8, 6, 7)) * 10)
        p = data(out.coords)
        assert (p >= 0).all()
        assert (p <= [7 - 1, 6 - 1, 4 - 1]).all()


def test_joint_features_recompose():
    net = make_net(2)
    fmap = RNG.normal(size=(8, 6, 7))
    out = net(fmap)
    fp = data(net.feat(ad.constant(fmap)))
    for j in range(5):
        x, y = data(out.coords)[j, :2]
        np.testing.assert_allclose(
            data(out.joint_features)[j], bilinear_oracle(fp, x, y), atol=1e-12)


def test_volume_is_channel_relabel():
    net = make_net(3)
    fmap = RNG.normal(size=(8, 6, 7))
    logits = data(net.heat(ad.constant(fmap)))
    out = net(fmap)
    np.testing.assert_array_equal(
        data(out.volume), logits.reshape(5, 4, 6, 7))
    # depth-major layout: channel c = d * J + j
    cfg2 = pp.Pose2PoseConfig(num_joints=5, depth_bins=4, in_channels=8,
                              joint_channels=6, channel_order="depth_major")
    net2 = pp.Pose2Pose(cfg2, np.random.default_rng(3))
    out2 = net2(fmap)
    logits2 = data(net2.heat(ad.constant(fmap)))
    np.testing.assert_array_equal(
        data(out2.volume), logits2.reshape(4, 5, 6, 7).transpose(1, 0, 2, 3))


def test_heatmap_shift_moves_coordinates():
    # sharply peaked interior logits: rolling the volume one cell in x or y
    # moves the soft-argmax by exactly one grid unit
    vol = np.full((3, 4, 6, 8), -10.0)
    vol[:, 1:3, 2:4, 2:5] += RNG.uniform(30, 40, size=(3, 2, 2, 3))
    base = data(go.soft_argmax_3d(vol))
    for axis, delta in ((3, [1, 0, 0]), (2, [0, 1, 0]), (1, [0, 0, 1])):
        shifted = data(go.soft_argmax_3d(np.roll(vol, 1, axis=axis)))
        np.testing.assert_allclose(shifted, base + delta, atol=1e-6)


def test_regressor_zero_weights_zero_bias():
    reg = pp.RotationRegressor(10, 4, np.random.default_rng(0),
                               weight_scale=0.0, identity_bias=False)
    out = data(reg(np.ones(10)))
    assert out.shape == (4, 6)
    np.testing.assert_array_equal(out, 0.0)


def test_regressor_identity_bias_default():
    reg = pp.RotationRegressor(7, 3, np.random.default_rng(0))
    out = data(reg(RNG.normal(size=7)))
    np.testing.assert_array_equal(out, np.tile(pp.IDENTITY_6D, (3, 1)))


def test_regressor_extra_input_and_mismatch():
    reg = pp.RotationRegressor(9, 2, np.random.default_rng(1), weight_scale=0.1)
    out = reg(np.ones(5), extra=np.ones(4))
    assert out.shape == (2, 6)
    with pytest.raises(ShapeMismatch):
        reg(np.ones(5))
    with pytest.raises(ShapeMismatch):
        reg(np.ones(5), extra=np.ones(5))


def test_regressor_gradient():
    reg = pp.RotationRegressor(12, 3, np.random.default_rng(2), weight_scale=0.2)
    w = RNG.normal(size=(3, 6))
    rep = ad.grad_check(lambda v: ad.tsum(reg(v) * w),
                        [ad.param(RNG.normal(size=12))], h=1e-6)
    assert rep.ok, repr(rep)


def test_variant_inputs_lengths_and_oracles():
    net = make_net(4)
    fmap = RNG.normal(size=(8, 6, 7))
    out = net(fmap)
    assert data(pp.variant_inputs("coord3d", out, fmap)).shape == (15,)
    assert data(pp.variant_inputs("coord2d", out, fmap)).shape == (10,)
    assert data(pp.variant_inputs("joint_feat", out, fmap)).shape == (30,)
    np.testing.assert_array_equal(
        data(pp.variant_inputs("coord3d_plus_feat", out, fmap)), data(out.flat))
    np.testing.assert_allclose(
        data(pp.variant_inputs("gap", out, fmap)), fmap.mean(axis=(1, 2)),
        atol=1e-12)
    for mode in pp.VARIANT_MODES:
        assert data(pp.variant_inputs(mode, out, fmap)).shape == (
            pp.variant_length(mode, CFG),)
    with pytest.raises(UnknownMode):
        pp.variant_inputs("attention", out, fmap)
    with pytest.raises(UnknownMode):
        pp.variant_length("attention", CFG)


def test_end_to_end_gradient_through_sampling():
    # the soft-argmax -> bilinear coupling: loss on regressed rotations,
    # gradient w.r.t. the incoming feature map
    net = make_net(5)
    reg = pp.RotationRegressor(CFG.flat_length, 5, np.random.default_rng(6),
                               weight_scale=0.3)
    w = np.random.default_rng(7).normal(size=(5, 6))
    fmap = RNG.normal(size=(8, 6, 7))

    def f(m):
        out = net(m)
        return ad.tsum(reg(out.flat) * w)

    rep = ad.grad_check(f, [ad.param(fmap)], h=1e-5, tol=1e-3)
    assert rep.ok, repr(rep)


def test_rejects_wrong_channel_count():
    with pytest.raises(ShapeMismatch):
        make_net()(np.zeros((7, 6, 7)))
    with pytest.raises(ShapeMismatch):
        pp.Pose2PoseConfig(num_joints=0)
