"""Body model: kinematics oracle, skinning, projection, construction.

The forward-kinematics oracle composes 4x4 homogeneous transforms joint by
joint down each ancestor chain with scipy rotations; skinning and joint
regression get naive double-loop oracles.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation as R

from wbpose import autodiff as ad
from wbpose import body_model as bm
from wbpose import rotations as rot
from wbpose.errors import BehindCamera, FormatError, InvalidTree, ShapeMismatch

RNG = np.random.default_rng(23)


def data(t):
    return t.data if isinstance(t, ad.Tensor) else np.asarray(t)


@pytest.fixture(scope="module")
def model():
    return bm.build_toy_model()


def random_params(rng, scale=0.5):
    return bm.ModelParams(
        theta_body=rng.normal(scale=scale, size=(22, 3)),
        theta_lhand=rng.normal(scale=scale, size=(15, 3)),
        theta_rhand=rng.normal(scale=scale, size=(15, 3)),
        theta_jaw=rng.normal(scale=scale, size=3),
        beta=rng.normal(size=10),
        psi=rng.normal(size=10),
        trans=rng.normal(size=3))


def aa_stack(params):
    return np.concatenate([
        data(params.theta_body), data(params.theta_lhand),
        data(params.theta_rhand), data(params.theta_jaw).reshape(1, 3)])


def fk_oracle(model, params):
    """Chain 4x4 transforms root-to-leaf, one joint at a time."""
    aa = aa_stack(params)
    rest, parents = model.rest_joints, model.kinematic_parents
    transforms = {}
    joints = np.zeros((model.num_joints, 3))
    for j in range(model.num_joints):
        local = np.eye(4)
        local[:3, :3] = R.from_rotvec(aa[j]).as_matrix()
        p = parents[j]
        local[:3, 3] = rest[j] - (rest[p] if p >= 0 else 0.0)
        transforms[j] = local if p < 0 else transforms[p] @ local
        joints[j] = transforms[j][:3, 3]
    return joints + data(params.trans), transforms


def lbs_oracle(model, params):
    _, transforms = fk_oracle(model, params)
    shaped = (model.template_vertices
              + model.shape_dirs @ data(params.beta)
              + model.expr_dirs @ data(params.psi))
    out = np.zeros_like(shaped)
    for k in range(model.num_joints):
        g = transforms[k].copy()
        g[:3, 3] -= g[:3, :3] @ model.rest_joints[k]
        moved = shaped @ g[:3, :3].T + g[:3, 3]
        out += model.skin_weights[:, k:k + 1] * moved
    return out + data(params.trans)


# ---------------------------------------------------------------------------
# construction invariants


def test_toy_model_invariants(model):
    assert model.num_joints == 53
    assert 450 <= model.num_vertices <= 750
    np.testing.assert_allclose(model.skin_weights.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(model.joint_regressor.sum(axis=1), 1.0, atol=1e-9)
    assert (model.skin_weights >= 0).all()
    assert ((model.skin_weights > 0).sum(axis=1) <= 4).all()
    for row, wrist in zip(model.mcp_indices, (20, 21)):
        assert (model.kinematic_parents[row] == wrist).all()


def test_toy_model_rest_symmetry(model):
    pairs = model.left_right_pairs
    np.testing.assert_allclose(
        model.rest_joints[pairs], model.rest_joints * (-1, 1, 1), atol=1e-12)
    mm = model.vertex_mirror_map
    np.testing.assert_allclose(
        model.template_vertices[mm], model.template_vertices * (-1, 1, 1),
        atol=1e-12)
    # binding and bases commute with the mirror maps
    np.testing.assert_allclose(
        model.skin_weights[mm][:, pairs], model.skin_weights, atol=1e-12)
    np.testing.assert_allclose(
        model.shape_dirs[mm], model.shape_dirs * np.array([-1, 1, 1])[:, None],
        atol=1e-12)


def test_toy_model_deterministic():
    a = bm.build_toy_model(bm.ToyBodyConfig(seed=4))
    b = bm.build_toy_model(bm.ToyBodyConfig(seed=4))
    np.testing.assert_array_equal(a.template_vertices, b.template_vertices)
    np.testing.assert_array_equal(a.skin_weights, b.skin_weights)
    np.testing.assert_array_equal(a.shape_dirs, b.shape_dirs)
    c = bm.build_toy_model(bm.ToyBodyConfig(seed=5))
    assert not np.array_equal(a.template_vertices, c.template_vertices)


def test_part_vertex_cover(model):
    sizes = {k: len(v) for k, v in model.part_vertices.items()}
    assert set(sizes) == {"body", "lhand", "rhand", "face"}
    assert sizes["lhand"] == sizes["rhand"] > 0
    assert sum(sizes.values()) == model.num_vertices


def test_invalid_tree_rejected(model):
    bad = model.kinematic_parents.copy()
    bad[3] = 6  # spine1 <-> spine2 cycle
    with pytest.raises(InvalidTree):
        bm._tree_levels(bad)
    two_roots = model.kinematic_parents.copy()
    two_roots[12] = -1
    with pytest.raises(InvalidTree):
        bm._tree_levels(two_roots)


# ---------------------------------------------------------------------------
# forward kinematics and skinning


def test_rest_pose_is_identity(model):
    out = bm.forward_model(model, bm.ModelParams.zeros())
    np.testing.assert_allclose(data(out.joints), model.rest_joints, atol=1e-12)
    np.testing.assert_allclose(data(out.vertices), model.template_vertices,
                               atol=1e-12)


def test_root_rotation_pivots_about_pelvis(model):
    params = bm.ModelParams.zeros()
    axis_angle = np.array([0.3, -1.1, 0.7])
    params.theta_body[0] = axis_angle
    out = bm.forward_model(model, params)
    rm = R.from_rotvec(axis_angle).as_matrix()
    root = model.rest_joints[0]
    want = (model.rest_joints - root) @ rm.T + root
    np.testing.assert_allclose(data(out.joints), want, atol=1e-12)


def test_joints_match_transform_chain_oracle(model):
    for seed in range(3):
        params = random_params(np.random.default_rng(seed))
        out = bm.forward_model(model, params)
        want, _ = fk_oracle(model, params)
        np.testing.assert_allclose(data(out.joints), want, atol=1e-10)


def test_vertices_match_lbs_oracle(model):
    params = random_params(np.random.default_rng(9))
    out = bm.forward_model(model, params)
    np.testing.assert_allclose(data(out.vertices), lbs_oracle(model, params),
                               atol=1e-10)


def test_identity_pose_skinning_moves_nothing(model):
    params = bm.ModelParams.zeros()
    params.beta = RNG.normal(size=10)
    params.psi = RNG.normal(size=10)
    shaped = (model.template_vertices + model.shape_dirs @ params.beta
              + model.expr_dirs @ params.psi)
    out = bm.forward_model(model, params)
    np.testing.assert_allclose(data(out.vertices), shaped, atol=1e-12)


def test_rigid_equivariance(model):
    rng = np.random.default_rng(31)
    params = random_params(rng)
    params.theta_body[0] = 0.0
    params.trans = np.zeros(3)
    base = bm.forward_model(model, params)

    axis_angle = rng.normal(size=3)
    t0 = rng.normal(size=3)
    moved = bm.ModelParams(**{**params.blocks()})
    moved.theta_body = params.theta_body.copy()
    moved.theta_body[0] = axis_angle
    moved.trans = t0
    out = bm.forward_model(model, moved)

    rm = R.from_rotvec(axis_angle).as_matrix()
    root = model.rest_joints[0]
    for got, ref in ((out.joints, base.joints), (out.vertices, base.vertices)):
        want = (data(ref) - root) @ rm.T + root + t0
        np.testing.assert_allclose(data(got), want, atol=1e-9)


def test_mirror_property(model):
    rng = np.random.default_rng(17)
    params = random_params(rng)
    pairs = model.left_right_pairs
    aa = aa_stack(params)
    mirrored_aa = data(rot.mirror_rotation(aa[pairs]))
    mparams = bm.ModelParams(
        theta_body=mirrored_aa[:22], theta_lhand=mirrored_aa[22:37],
        theta_rhand=mirrored_aa[37:52], theta_jaw=mirrored_aa[52],
        beta=data(params.beta), psi=data(params.psi),
        trans=data(params.trans) * (-1, 1, 1))
    out = bm.forward_model(model, params)
    mout = bm.forward_model(model, mparams)
    np.testing.assert_allclose(
        data(mout.joints), data(out.joints)[pairs] * (-1, 1, 1), atol=1e-9)
    np.testing.assert_allclose(
        data(mout.vertices),
        data(out.vertices)[model.vertex_mirror_map] * (-1, 1, 1), atol=1e-9)


def test_forward_gradients(model):
    rng = np.random.default_rng(41)
    params = random_params(rng, scale=0.3)
    wj = rng.normal(size=(model.num_joints, 3))
    wv = rng.normal(size=(model.num_vertices, 3))

    blocks = list(params.blocks())

    def f(*tensors):
        p = bm.ModelParams(**dict(zip(blocks, tensors)))
        out = bm.forward_model(model, p)
        return ad.tsum(out.joints * wj) + ad.tsum(out.vertices * wv)

    leaves = [ad.param(data(getattr(params, n))) for n in blocks]
    rep = ad.grad_check(f, leaves, h=1e-6, max_entries=10,
                        rng=np.random.default_rng(0), names=blocks)
    assert rep.ok, repr(rep)


# ---------------------------------------------------------------------------
# joint regression and projection


def test_regress_joints_oracle(model):
    verts = RNG.normal(size=(model.num_vertices, 3))
    got = data(bm.regress_joints(model, verts))
    want = np.zeros((53, 3))
    for j in range(53):
        for v in np.flatnonzero(model.joint_regressor[j]):
            want[j] += model.joint_regressor[j, v] * verts[v]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_regress_one_hot_and_uniform():
    verts = RNG.normal(size=(6, 3))
    reg = np.zeros((2, 6))
    reg[0, 4] = 1.0
    reg[1] = 1.0 / 6.0
    model = _tiny_model_with_regressor(reg)
    got = data(bm.regress_joints(model, np.vstack([verts, verts[:0]])))
    np.testing.assert_allclose(got[0], verts[4], atol=1e-15)
    np.testing.assert_allclose(got[1], verts.mean(axis=0), atol=1e-15)


def _tiny_model_with_regressor(reg):
    class Stub:
        num_vertices = reg.shape[1]
        joint_regressor = reg
    return Stub()


def test_regress_shape_mismatch(model):
    with pytest.raises(ShapeMismatch):
        bm.regress_joints(model, np.zeros((model.num_vertices + 1, 3)))


def test_projection_frozen_examples():
    f, c = (5000.0, 5000.0), (96.0, 128.0)
    np.testing.assert_allclose(
        data(bm.perspective_project(np.array([[0.0, 0.0, 5.0]]), f, c)),
        [[96.0, 128.0]], atol=1e-12)
    np.testing.assert_allclose(
        data(bm.perspective_project(np.array([[1.0, 0.0, 5000.0]]), f, c)),
        [[97.0, 128.0]], atol=1e-12)


def test_projection_matches_scalar_oracle():
    pts = RNG.normal(size=(20, 3)) + (0, 0, 10)
    f, c = (123.0, 456.0), (7.0, 9.0)
    got = data(bm.perspective_project(pts, f, c))
    for i, (x, y, z) in enumerate(pts):
        np.testing.assert_allclose(
            got[i], [123.0 * x / z + 7.0, 456.0 * y / z + 9.0], atol=1e-12)


def test_projection_rejects_behind_camera():
    with pytest.raises(BehindCamera):
        bm.perspective_project(np.array([[0.0, 0.0, 0.0]]), (5000, 5000), (0, 0))
    with pytest.raises(BehindCamera):
        bm.perspective_project(np.array([[1.0, 1.0, -2.0]]), (5000, 5000), (0, 0))


def test_projection_gradient():
    pts = RNG.normal(size=(5, 3)) + (0, 0, 8)
    w = RNG.normal(size=(5, 2))
    rep = ad.grad_check(
        lambda p: ad.tsum(bm.perspective_project(p, (100, 200), (3, 4)) * w),
        [ad.param(pts)], h=1e-6)
    assert rep.ok, repr(rep)


# ---------------------------------------------------------------------------
# serialization


def test_model_roundtrip(tmp_path, model):
    path = tmp_path / "model.json"
    bm.save_model(model, path)
    back = bm.load_model(path)
    np.testing.assert_array_equal(back.template_vertices, model.template_vertices)
    np.testing.assert_array_equal(back.skin_weights, model.skin_weights)
    np.testing.assert_array_equal(back.joint_regressor, model.joint_regressor)
    np.testing.assert_array_equal(back.kinematic_parents, model.kinematic_parents)
    np.testing.assert_array_equal(back.vertex_mirror_map, model.vertex_mirror_map)
    for k in model.part_vertices:
        np.testing.assert_array_equal(back.part_vertices[k], model.part_vertices[k])


def test_model_file_format_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"format\": \"something-else\"}")
    with pytest.raises(FormatError):
        bm.load_model(bad)
    bad.write_text("not json at all")
    with pytest.raises(FormatError):
        bm.load_model(bad)
