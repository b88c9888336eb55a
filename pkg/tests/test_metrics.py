"""Metric tests: loop oracles, Procrustes optimality, report plumbing."""

import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from wbpose import metrics as mt
from wbpose.body_model import ModelParams, build_toy_model, forward_model
from wbpose.errors import Degenerate, ShapeMismatch

MODEL = build_toy_model()


def cloud(seed, n=20):
    return np.random.default_rng(seed).normal(size=(n, 3))


def random_params(seed, scale=0.2):
    r = np.random.default_rng(seed)
    return ModelParams(theta_body=r.normal(scale=scale, size=(22, 3)),
                       theta_lhand=r.normal(scale=scale, size=(15, 3)),
                       theta_rhand=r.normal(scale=scale, size=(15, 3)),
                       theta_jaw=r.normal(scale=scale, size=3),
                       beta=r.normal(size=10), psi=r.normal(size=10),
                       trans=r.normal(size=3))


def mesh_vertices(seed):
    return forward_model(MODEL, random_params(seed)).vertices.data


# ---------------------------------------------------------------------------
# mpjpe


def test_mpjpe_ignores_translation():
    g = cloud(0)
    assert mt.mpjpe(g + np.array([0.3, -1.2, 4.0]), g) < 1e-9


def test_mpjpe_single_displacement():
    g = cloud(1, n=5)
    p = g.copy()
    p[3, 1] += 0.005
    assert abs(mt.mpjpe(p, g, root_index=0) - 1.0) < 1e-12


def test_mpjpe_matches_loop_oracle():
    p, g = cloud(2), cloud(3)
    root = 4
    want = np.mean([np.linalg.norm((p[i] - p[root]) - (g[i] - g[root]))
                    for i in range(len(p))]) * 1000.0
    assert abs(mt.mpjpe(p, g, root_index=root) - want) < 1e-9


def test_mpjpe_rejects_bad_input():
    with pytest.raises(ShapeMismatch):
        mt.mpjpe(cloud(0, n=4), cloud(0, n=5))
    with pytest.raises(ShapeMismatch):
        mt.mpjpe(cloud(0), cloud(1), root_index=20)


# ---------------------------------------------------------------------------
# Procrustes alignment


def similarity(points, seed, scale=None):
    r = np.random.default_rng(seed)
    rot = Rotation.random(random_state=int(r.integers(2**31))).as_matrix()
    s = float(r.uniform(0.5, 2.0)) if scale is None else scale
    t = r.normal(size=3) * 3
    return s * points @ rot.T + t


def test_pa_align_identity():
    g = cloud(5)
    assert np.abs(mt.pa_align(g, g) - g).max() < 1e-12


@pytest.mark.parametrize("seed", range(8))
def test_pa_align_recovers_similarity(seed):
    g = cloud(seed + 10)
    p = similarity(g, seed + 50)
    assert np.abs(mt.pa_align(p, g) - g).max() < 1e-9


def test_pa_align_beats_random_search():
    # global optimum over (proper R, s >= 0, t): no sampled transform wins
    p, g = cloud(6), cloud(7)
    aligned = mt.pa_align(p, g)
    best = ((aligned - g) ** 2).sum()
    xp = p - p.mean(axis=0)
    xg = g - g.mean(axis=0)
    rots = Rotation.random(1000, random_state=123).as_matrix()
    ys = np.einsum("kij,nj->kni", rots, xp)
    num = (ys * xg).sum(axis=(1, 2))
    den = (ys ** 2).sum(axis=(1, 2))
    s = np.maximum(num / den, 0.0)
    resid = ((s[:, None, None] * ys - xg) ** 2).sum(axis=(1, 2))
    assert best <= resid.min() + 1e-9


def test_pa_align_excludes_reflection():
    g = cloud(8)
    p = g * np.array([-1.0, 1.0, 1.0])
    # a reflection would fit exactly; the proper-rotation fit cannot
    resid = np.linalg.norm(mt.pa_align(p, g) - g, axis=1).mean()
    assert resid > 1e-3


def test_pa_align_freely_rigid_invariant():
    p, g = cloud(9), cloud(10)
    base = mt.pa_align(p, g)
    rot = Rotation.random(random_state=5).as_matrix()
    t = np.array([1.0, -2.0, 0.5])
    moved = mt.pa_align(p @ rot.T + t, g @ rot.T + t)
    want = base @ rot.T + t
    assert np.abs(moved - want).max() < 1e-9


def test_pa_align_no_worse_than_root_alignment():
    # root alignment is a feasible similarity, so its residual bounds pa
    for seed in range(20):
        p, g = cloud(seed * 2 + 100), cloud(seed * 2 + 101)
        pa_ss = ((mt.pa_align(p, g) - g) ** 2).sum()
        rooted_ss = (((p - p[0]) - (g - g[0])) ** 2).sum()
        assert pa_ss <= rooted_ss + 1e-9


def test_pa_align_degenerate_cases():
    line = np.outer(np.linspace(0, 1, 6), np.array([1.0, 2.0, 0.5]))
    with pytest.raises(Degenerate):
        mt.pa_align(line, line)
    flat = np.zeros((6, 3))
    with pytest.raises(Degenerate):
        mt.pa_align(flat, cloud(11, n=6))
    with pytest.raises(ShapeMismatch):
        mt.pa_align(cloud(0, n=2), cloud(1, n=2))


def test_pa_align_planar_cloud_is_fine():
    # rank 2 still pins the rotation
    g = cloud(12)
    g[:, 2] = 0.0
    p = similarity(g, 60)
    assert np.abs(mt.pa_align(p, g) - g).max() < 1e-9


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_zero_when_equal():
    v = mesh_vertices(0)
    rep = mt.evaluate(v, v, MODEL)
    for table in (rep.mpjpe, rep.pa_mpjpe, rep.mpvpe, rep.pa_mpvpe,
                  rep.hand_mpvpe_pelvis):
        assert table, "table should not be empty"
        for key, value in table.items():
            assert value < 1e-9, (key, value)


def test_evaluate_rigid_motion():
    g = mesh_vertices(1)
    rot = Rotation.from_rotvec([0.0, 0.6, 0.0]).as_matrix()
    p = g @ rot.T + np.array([0.1, 0.0, -0.2])
    rep = mt.evaluate(p, g, MODEL)
    assert rep.pa_mpjpe["all"] < 1e-9
    assert rep.pa_mpvpe["all"] < 1e-9
    assert rep.mpjpe["all"] > 1.0


def test_evaluate_hands_avg_is_arithmetic_mean():
    rep = mt.evaluate(mesh_vertices(2), mesh_vertices(3), MODEL)
    for table in (rep.mpjpe, rep.pa_mpjpe):
        assert abs(table["hands_avg"]
                   - 0.5 * (table["lhand"] + table["rhand"])) < 1e-12
    assert abs(rep.hand_mpvpe_pelvis["hands_avg"]
               - 0.5 * (rep.hand_mpvpe_pelvis["lhand"]
                        + rep.hand_mpvpe_pelvis["rhand"])) < 1e-12


def test_evaluate_matches_explicit_formulas():
    pv, gv = mesh_vertices(4), mesh_vertices(5)
    rep = mt.evaluate(pv, gv, MODEL)
    pj = MODEL.joint_regressor @ pv
    gj = MODEL.joint_regressor @ gv

    idx = mt.PART_JOINTS["lhand"]
    root = mt.PART_ROOTS["lhand"]
    want = np.linalg.norm((pj[idx] - pj[root]) - (gj[idx] - gj[root]),
                          axis=1).mean() * 1000.0
    assert abs(rep.mpjpe["lhand"] - want) < 1e-9

    vidx = MODEL.part_vertices["rhand"]
    wrist = mt.PART_ROOTS["rhand"]
    want = np.linalg.norm((pv[vidx] - pj[wrist]) - (gv[vidx] - gj[wrist]),
                          axis=1).mean() * 1000.0
    assert abs(rep.mpvpe["rhand"] - want) < 1e-9

    # pelvis-rooted hand vertices measure wrist placement too
    want = np.linalg.norm((pv[vidx] - pj[0]) - (gv[vidx] - gj[0]),
                          axis=1).mean() * 1000.0
    assert abs(rep.hand_mpvpe_pelvis["rhand"] - want) < 1e-9

    fidx = mt.PART_JOINTS["face"]
    neck = mt.PART_ROOTS["face"]
    want = np.linalg.norm((pj[fidx] - pj[neck]) - (gj[fidx] - gj[neck]),
                          axis=1).mean() * 1000.0
    assert abs(rep.mpjpe["face"] - want) < 1e-9


def test_evaluate_hand_wrist_rooting_hides_placement_error():
    # moving one whole hand rigidly leaves its wrist-rooted errors small
    # but shows up pelvis-rooted
    gv = mesh_vertices(6)
    gj = MODEL.joint_regressor @ gv
    pv = gv.copy()
    vidx = MODEL.part_vertices["rhand"]
    pv[vidx] += np.array([0.02, 0.0, 0.0])
    rep = mt.evaluate(pv, gv, MODEL)
    # regressed wrist moves with the hand vertices only partially, so the
    # wrist-rooted error stays well below the 20mm shift
    assert rep.hand_mpvpe_pelvis["rhand"] > rep.mpvpe["rhand"]
    assert rep.mpvpe["lhand"] < 1e-9


def test_evaluate_rejects_wrong_vertex_count():
    v = mesh_vertices(0)
    with pytest.raises(ShapeMismatch):
        mt.evaluate(v[:-1], v[:-1], MODEL)


def test_report_roundtrip_and_table():
    rep = mt.evaluate(mesh_vertices(7), mesh_vertices(8), MODEL)
    wire = json.dumps(rep.to_dict(), sort_keys=True)
    back = mt.MetricReport.from_dict(json.loads(wire))
    assert back.to_dict() == rep.to_dict()
    table = rep.format_table()
    for part in mt.PARTS:
        assert part in table
    assert "hand mpvpe" in table


def test_part_index_tables():
    assert np.array_equal(mt.PART_JOINTS["lhand"], np.arange(22, 37))
    assert mt.PART_ROOTS["lhand"] == 20 and mt.PART_ROOTS["rhand"] == 21
    assert mt.PART_ROOTS["face"] == mt.NECK
