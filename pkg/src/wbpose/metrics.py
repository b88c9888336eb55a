"""Evaluation metrics: rooted and Procrustes-aligned position errors.

Everything here is plain numpy on concrete arrays; metrics never touch
the autodiff graph. Errors are reported in millimeters. Joints are the
regressed ones (regressor matrix times mesh vertices), parts are rooted
at pelvis, wrists, or neck, and hands are additionally reported as a
left/right average. Hand vertex errors come in two flavors: rooted at
the wrist (the standard report) and rooted at the pelvis, which keeps
the wrist's own placement error in view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_model import BodyModel, JOINT_NAMES, L_WRIST, R_WRIST
from .errors import Degenerate, ShapeMismatch

__all__ = [
    "MetricReport", "mpjpe", "pa_align", "evaluate", "PARTS",
    "PART_JOINTS", "PART_ROOTS", "NECK", "HEAD", "JAW_JOINT",
]

NECK = JOINT_NAMES.index("neck")
HEAD = JOINT_NAMES.index("head")
JAW_JOINT = JOINT_NAMES.index("jaw")

PART_JOINTS = {
    "all": np.arange(53),
    "body": np.arange(22),
    "lhand": np.arange(22, 37),
    "rhand": np.arange(37, 52),
    "face": np.array([NECK, HEAD, JAW_JOINT]),
}
PART_ROOTS = {"all": 0, "body": 0, "lhand": L_WRIST, "rhand": R_WRIST,
              "face": NECK}
PARTS = ("all", "body", "lhand", "rhand", "hands_avg", "face")


@dataclass
class MetricReport:
    """Millimeter errors per part, plus pelvis-rooted hand vertex errors."""

    mpjpe: dict = field(default_factory=dict)
    pa_mpjpe: dict = field(default_factory=dict)
    mpvpe: dict = field(default_factory=dict)
    pa_mpvpe: dict = field(default_factory=dict)
    hand_mpvpe_pelvis: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mpjpe": dict(self.mpjpe), "pa_mpjpe": dict(self.pa_mpjpe),
                "mpvpe": dict(self.mpvpe), "pa_mpvpe": dict(self.pa_mpvpe),
                "hand_mpvpe_pelvis": dict(self.hand_mpvpe_pelvis)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: dict(v) for k, v in d.items()})

    def format_table(self) -> str:
        cols = ("mpjpe", "pa_mpjpe", "mpvpe", "pa_mpvpe")
        lines = ["part        " + "".join(f"{c:>12}" for c in cols)]
        for part in PARTS:
            row = f"{part:<12}"
            for c in cols:
                v = getattr(self, c).get(part)
                row += f"{v:12.3f}" if v is not None else f"{'-':>12}"
            lines.append(row)
        extra = ", ".join(f"{k}={v:.3f}" for k, v in
                          sorted(self.hand_mpvpe_pelvis.items()))
        lines.append(f"hand mpvpe (pelvis-rooted, mm): {extra}")
        return "\n".join(lines)


def _check_points(pred, gt, min_n=1):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ShapeMismatch(f"need matching (N, 3) arrays, got {pred.shape} "
                            f"and {gt.shape}")
    if pred.shape[0] < min_n:
        raise ShapeMismatch(f"need at least {min_n} points, got {pred.shape[0]}")
    return pred, gt


def mpjpe(pred, gt, root_index: int = 0) -> float:
    """Mean Euclidean distance in mm after matching the root joint."""
    pred, gt = _check_points(pred, gt)
    if not (0 <= root_index < pred.shape[0]):
        raise ShapeMismatch(f"root index {root_index} out of range")
    d = (pred - pred[root_index]) - (gt - gt[root_index])
    return float(np.linalg.norm(d, axis=1).mean() * 1000.0)


def pa_align(pred, gt) -> np.ndarray:
    """Similarity-Procrustes alignment of pred onto gt.

    Returns s * R @ pred + t minimizing the summed squared residual,
    with the rotation constrained to be proper (no reflection). Raises
    Degenerate when the cross-covariance has rank < 2, where the
    rotation is not identifiable.
    """
    pred, gt = _check_points(pred, gt, min_n=3)
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    xp = pred - mu_p
    xg = gt - mu_g
    cov = xg.T @ xp / pred.shape[0]
    u, s, vt = np.linalg.svd(cov)
    if np.sum(s > 1e-12 * max(s[0], 1e-300)) < 2:
        raise Degenerate("cross-covariance rank < 2; rotation unidentifiable")
    sign = np.sign(np.linalg.det(u @ vt))
    d = np.diag([1.0, 1.0, sign])
    rot = u @ d @ vt
    var_p = (xp ** 2).sum() / pred.shape[0]
    if var_p <= 0.0:
        raise Degenerate("prediction cloud has zero variance")
    scale = np.trace(np.diag(s) @ d) / var_p
    return scale * xp @ rot.T + mu_g


def _mean_dist_mm(a, b) -> float:
    return float(np.linalg.norm(a - b, axis=1).mean() * 1000.0)


def _rooted(points, joints, root_index):
    return points - joints[root_index]


def evaluate(pred_vertices, gt_vertices, model: BodyModel) -> MetricReport:
    """Per-part joint and vertex errors between two meshes.

    Joints are regressed from the vertices with the model's regressor,
    parts are rooted per PART_ROOTS, and Procrustes variants re-align
    each part's point set independently.
    """
    pred_vertices = np.asarray(pred_vertices, dtype=np.float64)
    gt_vertices = np.asarray(gt_vertices, dtype=np.float64)
    v = model.num_vertices
    if pred_vertices.shape != (v, 3) or gt_vertices.shape != (v, 3):
        raise ShapeMismatch(f"vertices must be ({v}, 3)")
    pred_j = model.joint_regressor @ pred_vertices
    gt_j = model.joint_regressor @ gt_vertices

    report = MetricReport()
    for part in PARTS:
        if part == "hands_avg":
            continue
        idx = PART_JOINTS[part]
        root = PART_ROOTS[part]
        pj = _rooted(pred_j, pred_j, root)[idx]
        gj = _rooted(gt_j, gt_j, root)[idx]
        report.mpjpe[part] = _mean_dist_mm(pj, gj)
        report.pa_mpjpe[part] = _mean_dist_mm(pa_align(pred_j[idx], gt_j[idx]),
                                              gt_j[idx])
        if part == "all":
            vidx = np.arange(v)
        else:
            vidx = model.part_vertices.get(part)
            if vidx is None or len(vidx) < 3:
                continue
        pv = _rooted(pred_vertices[vidx], pred_j, root)
        gv = _rooted(gt_vertices[vidx], gt_j, root)
        report.mpvpe[part] = _mean_dist_mm(pv, gv)
        report.pa_mpvpe[part] = _mean_dist_mm(
            pa_align(pred_vertices[vidx], gt_vertices[vidx]),
            gt_vertices[vidx])
    for table in (report.mpjpe, report.pa_mpjpe, report.mpvpe, report.pa_mpvpe):
        if "lhand" in table and "rhand" in table:
            table["hands_avg"] = 0.5 * (table["lhand"] + table["rhand"])

    # pelvis-rooted hand vertices keep the wrist placement error in view
    for side in ("lhand", "rhand"):
        vidx = model.part_vertices[side]
        pv = _rooted(pred_vertices[vidx], pred_j, 0)
        gv = _rooted(gt_vertices[vidx], gt_j, 0)
        report.hand_mpvpe_pelvis[side] = _mean_dist_mm(pv, gv)
    report.hand_mpvpe_pelvis["hands_avg"] = 0.5 * (
        report.hand_mpvpe_pelvis["lhand"] + report.hand_mpvpe_pelvis["rhand"])
    return report
