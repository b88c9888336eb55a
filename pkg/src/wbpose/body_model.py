"""Parametric whole-body surface model.

A low-poly articulated human: a 53-joint kinematic tree (22 body joints,
two 15-joint hands, one jaw), linear shape and expression blend bases,
and linear blend skinning over a bilaterally symmetric template mesh.
Joint layout: 0..21 body, 22..36 left hand, 37..51 right hand, 52 jaw.
Joint 0 (pelvis) carries the global rotation.

Axes: x lateral (subject's left is +x), y down, z depth; the sagittal
mirror plane is x = 0. All lengths in meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rotations as rot
from .autodiff import Tensor, as_tensor
from .errors import BehindCamera, FormatError, InvalidTree, ShapeMismatch

__all__ = [
    "JOINT_NAMES", "NUM_JOINTS", "BodyModel", "ModelParams", "MeshOutput",
    "forward_model", "regress_joints", "perspective_project",
    "ToyBodyConfig", "build_toy_model", "save_model", "load_model",
]

_BODY_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist",
]
_FINGERS = ["index", "middle", "ring", "pinky", "thumb"]
_HAND_NAMES = [f"{f}{i}" for f in _FINGERS for i in (1, 2, 3)]

JOINT_NAMES = (
    _BODY_NAMES
    + [f"l_{n}" for n in _HAND_NAMES]
    + [f"r_{n}" for n in _HAND_NAMES]
    + ["jaw"]
)
NUM_JOINTS = len(JOINT_NAMES)

_BODY_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14,
                 16, 17, 18, 19]
L_WRIST, R_WRIST = 20, 21
_LHAND_BASE, _RHAND_BASE, JAW = 22, 37, 52


def _full_parent_table() -> np.ndarray:
    parents = list(_BODY_PARENTS)
    for base, wrist in ((_LHAND_BASE, L_WRIST), (_RHAND_BASE, R_WRIST)):
        for f in range(5):
            parents += [wrist, base + 3 * f, base + 3 * f + 1]
    parents.append(12)  # jaw hangs off the neck
    return np.asarray(parents, dtype=np.intp)


def _mirror_name(name: str) -> str:
    if name.startswith("l_"):
        return "r_" + name[2:]
    if name.startswith("r_"):
        return "l_" + name[2:]
    return name


def _pair_table() -> np.ndarray:
    index = {n: i for i, n in enumerate(JOINT_NAMES)}
    return np.asarray([index[_mirror_name(n)] for n in JOINT_NAMES], dtype=np.intp)


def _tree_levels(parents: np.ndarray) -> list:
    """Joints grouped by depth; raises InvalidTree on cycles or bad roots."""
    k = len(parents)
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1 or roots[0] != 0:
        raise InvalidTree(f"expected a single root at joint 0, got roots {roots}")
    depth = np.full(k, -1, dtype=np.intp)
    depth[0] = 0
    for j in range(1, k):
        d, hops, node = 0, 0, j
        while node != 0:
            node = parents[node]
            hops += 1
            if node < 0 or node >= k or hops > k:
                raise InvalidTree(f"joint {j} does not reach the root")
        depth[j] = hops
    levels = [np.flatnonzero(depth == d) for d in range(depth.max() + 1)]
    return levels


@dataclass
class BodyModel:
    """Immutable-by-convention bundle of rest geometry and binding data."""

    template_vertices: np.ndarray   # (V, 3)
    kinematic_parents: np.ndarray   # (K,) int, -1 at the root
    rest_joints: np.ndarray         # (K, 3)
    skin_weights: np.ndarray        # (V, K), rows sum to 1
    shape_dirs: np.ndarray          # (V, 3, 10)
    expr_dirs: np.ndarray           # (V, 3, 10)
    joint_regressor: np.ndarray     # (K, V), rows sum to 1
    left_right_pairs: np.ndarray    # (K,) joint permutation
    mcp_indices: np.ndarray         # (2, 4): knuckle joints, rows (left, right)
    vertex_mirror_map: np.ndarray   # (V,) vertex permutation
    part_vertices: dict = field(default_factory=dict)

    def __post_init__(self):
        self._levels = _tree_levels(self.kinematic_parents)
        v, k = self.skin_weights.shape
        if self.template_vertices.shape != (v, 3) or self.rest_joints.shape != (k, 3):
            raise ShapeMismatch("template/rest_joints sizes disagree with skin_weights")
        if np.any(self.skin_weights < -1e-12):
            raise ShapeMismatch("negative skin weights")
        if np.abs(self.skin_weights.sum(axis=1) - 1.0).max() > 1e-9:
            raise ShapeMismatch("skin weight rows must sum to 1")
        if np.abs(self.joint_regressor.sum(axis=1) - 1.0).max() > 1e-9:
            raise ShapeMismatch("joint regressor rows must sum to 1")
        wrists = (L_WRIST, R_WRIST)
        for row, wrist in zip(self.mcp_indices, wrists):
            if not np.all(self.kinematic_parents[row] == wrist):
                raise InvalidTree("knuckle joints must be children of their wrist")

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.rest_joints.shape[0]


@dataclass
class ModelParams:
    """Pose, shape, expression, and placement of one body instance.

    Rotations are axis-angle. Any field may be a plain array or a graph
    tensor; forward_model promotes them as needed.
    """

    theta_body: object     # (22, 3)
    theta_lhand: object    # (15, 3)
    theta_rhand: object    # (15, 3)
    theta_jaw: object      # (3,)
    beta: object           # (10,)
    psi: object            # (10,)
    trans: object          # (3,)

    _SHAPES = {
        "theta_body": (22, 3), "theta_lhand": (15, 3), "theta_rhand": (15, 3),
        "theta_jaw": (3,), "beta": (10,), "psi": (10,), "trans": (3,),
    }

    def __post_init__(self):
        for name, want in self._SHAPES.items():
            got = as_tensor(getattr(self, name)).shape
            if got != want:
                raise ShapeMismatch(f"{name} must have shape {want}, got {got}")

    @classmethod
    def zeros(cls) -> "ModelParams":
        return cls(*(np.zeros(s) for s in cls._SHAPES.values()))

    def blocks(self) -> dict:
        return {name: getattr(self, name) for name in self._SHAPES}


@dataclass
class MeshOutput:
    vertices: Tensor   # (V, 3)
    joints: Tensor     # (K, 3)


def _rotation_stack(params: ModelParams) -> Tensor:
    """All 53 local rotations as one (K, 3, 3) stack, in joint order."""
    jaw = ad.reshape(as_tensor(params.theta_jaw), (1, 3))
    aa = ad.concat([as_tensor(params.theta_body), as_tensor(params.theta_lhand),
                    as_tensor(params.theta_rhand), jaw], axis=0)
    return rot.axis_angle_to_matrix(aa)


def forward_model(model: BodyModel, params: ModelParams) -> MeshOutput:
    """Pose the model: blend shapes, forward kinematics, skinning.

    Vertices move as template + shape_dirs @ beta + expr_dirs @ psi, then
    by linear blend skinning under the posed tree; the global translation
    is added to vertices and joints last. Rest joints are fixed (blend
    shapes act on the surface only). Differentiable in every parameter.
    """
    local = _rotation_stack(params)             # (K, 3, 3)
    rest = model.rest_joints
    parents = model.kinematic_parents
    k = model.num_joints

    # walk the tree one depth level at a time; each level batches its matmuls
    order: list = []
    r_parts: list = []
    p_parts: list = []
    placed = np.full(k, -1, dtype=np.intp)
    for lvl, joints in enumerate(model._levels):
        if lvl == 0:
            r_lvl = local[joints[0]:joints[0] + 1]
            p_lvl = ad.constant(rest[joints])
        else:
            r_all = r_parts[0] if len(r_parts) == 1 else ad.concat(r_parts, axis=0)
            p_all = p_parts[0] if len(p_parts) == 1 else ad.concat(p_parts, axis=0)
            par = placed[parents[joints]]
            r_par = ad.take(r_all, par, axis=0)
            p_par = ad.take(p_all, par, axis=0)
            offs = rest[joints] - rest[parents[joints]]
            r_lvl = ad.matmul(r_par, ad.take(local, joints, axis=0))
            swing = ad.matmul(r_par, offs[..., None])[..., 0]
            p_lvl = p_par + swing
        placed[joints] = len(order) + np.arange(len(joints))
        order.extend(joints.tolist())
        r_parts.append(r_lvl)
        p_parts.append(p_lvl)

    inv = placed  # placed[j] is j's row in traversal order
    r_glob = ad.take(ad.concat(r_parts, axis=0), inv, axis=0)   # (K, 3, 3)
    p_glob = ad.take(ad.concat(p_parts, axis=0), inv, axis=0)   # (K, 3)

    shaped = (ad.constant(model.template_vertices)
              + ad.matmul(ad.constant(model.shape_dirs.reshape(-1, 10)),
                          ad.reshape(as_tensor(params.beta), (10, 1))).reshape(-1, 3)
              + ad.matmul(ad.constant(model.expr_dirs.reshape(-1, 10)),
                          ad.reshape(as_tensor(params.psi), (10, 1))).reshape(-1, 3))

    # per-joint affine [R_k | p_k - R_k r_k], blended per vertex as a
    # (V, 12) matmul against the fixed binding weights
    t_glob = p_glob - ad.matmul(r_glob, rest[..., None])[..., 0]
    b_flat = ad.reshape(ad.concat([r_glob, t_glob[..., None]], axis=-1), (k, 12))
    blend = ad.reshape(ad.matmul(ad.constant(model.skin_weights), b_flat), (-1, 3, 4))
    skinned = (blend[:, :, 0] * shaped[:, 0:1] + blend[:, :, 1] * shaped[:, 1:2]
               + blend[:, :, 2] * shaped[:, 2:3] + blend[:, :, 3])

    trans = ad.reshape(as_tensor(params.trans), (1, 3))
    return MeshOutput(vertices=skinned + trans, joints=p_glob + trans)


def regress_joints(model: BodyModel, vertices) -> Tensor:
    """Sparse linear vertex-to-joint map: joint_regressor @ vertices."""
    vertices = as_tensor(vertices)
    if vertices.shape != (model.num_vertices, 3):
        raise ShapeMismatch(
            f"expected {(model.num_vertices, 3)} vertices, got {vertices.shape}")
    return ad.matmul(ad.constant(model.joint_regressor), vertices)


def perspective_project(points, focal, princpt) -> Tensor:
    """Pinhole projection of (..., 3) camera-frame points to pixels.

    u = fx x / z + cx, v = fy y / z + cy. Raises BehindCamera when any
    depth is at or behind the optical center (z <= 1e-6).
    """
    points = as_tensor(points)
    if points.shape[-1] != 3:
        raise ShapeMismatch(f"points must have last dim 3, got {points.shape}")
    if np.any(points.data[..., 2] <= 1e-6):
        raise BehindCamera(f"min depth {points.data[..., 2].min():.3e} <= 1e-6")
    fx, fy = float(focal[0]), float(focal[1])
    cx, cy = float(princpt[0]), float(princpt[1])
    z = points[..., 2:3]
    u = points[..., 0:1] / z * fx + cx
    v = points[..., 1:2] / z * fy + cy
    return ad.concat([u, v], axis=-1)


# ---------------------------------------------------------------------------
# toy model construction


@dataclass(frozen=True)
class ToyBodyConfig:
    seed: int = 0
    vertex_budget: int = 600


# rest skeleton, left and center joints; right side mirrors in x
_REST_TABLE = {
    "pelvis": (0.0, 0.0, 0.0),
    "l_hip": (0.09, 0.05, 0.0),
    "spine1": (0.0, -0.12, 0.0),
    "l_knee": (0.10, 0.50, 0.0),
    "spine2": (0.0, -0.24, 0.0),
    "l_ankle": (0.11, 0.93, 0.0),
    "spine3": (0.0, -0.36, 0.0),
    "l_foot": (0.12, 1.00, -0.10),
    "neck": (0.0, -0.50, 0.0),
    "l_collar": (0.07, -0.44, 0.0),
    "head": (0.0, -0.62, 0.0),
    "l_shoulder": (0.17, -0.42, 0.0),
    "l_elbow": (0.42, -0.42, 0.0),
    "l_wrist": (0.67, -0.42, 0.0),
    "jaw": (0.0, -0.57, -0.05),
}
_FINGER_Z = {"index": -0.030, "middle": -0.010, "ring": 0.010, "pinky": 0.030}

# per-bone mesh density (seed count at the default budget) and tube radius,
# keyed by the bone's child joint
_BONE_SPECS = {
    "l_hip": (6, 0.07), "l_knee": (20, 0.065), "l_ankle": (18, 0.05),
    "l_foot": (8, 0.04), "l_collar": (6, 0.06), "l_shoulder": (6, 0.055),
    "l_elbow": (18, 0.045), "l_wrist": (16, 0.035),
    "spine1": (22, 0.11), "spine2": (22, 0.11), "spine3": (22, 0.11),
    "neck": (12, 0.05), "head": (20, 0.09), "jaw": (10, 0.05),
}
_HAND_SEEDS = 4
_HAND_RADIUS = 0.008


def _rest_joint_positions() -> np.ndarray:
    pos = np.zeros((NUM_JOINTS, 3))
    index = {n: i for i, n in enumerate(JOINT_NAMES)}
    for name, p in _REST_TABLE.items():
        pos[index[name]] = p
    wrist = np.asarray(_REST_TABLE["l_wrist"])
    for f in _FINGERS:
        if f == "thumb":
            chain = [wrist + (0.030, 0.015, -0.040)]
            for step in ((0.025, 0.008, -0.018), (0.020, 0.006, -0.014)):
                chain.append(chain[-1] + step)
        else:
            z = _FINGER_Z[f]
            chain = [wrist + (0.090 + 0.035 * i, 0.0, z) for i in range(3)]
        for i in range(3):
            pos[index[f"l_{f}{i + 1}"]] = chain[i]
    pairs = _pair_table()
    for j, name in enumerate(JOINT_NAMES):
        if name.startswith("r_"):
            pos[j] = pos[pairs[j]] * (-1.0, 1.0, 1.0)
    return pos


def _bone_frame(axis: np.ndarray):
    ref = np.array([1.0, 0.0, 0.0])
    if abs(axis @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def build_toy_model(config: ToyBodyConfig | None = None) -> BodyModel:
    """Deterministic low-poly humanoid with an exactly symmetric rest state.

    Vertices are seeded along left-side and center bones as jittered tube
    rings, then every off-plane seed is mirrored across x = 0, which makes
    the template, skin weights, blend bases, and joint regressor symmetric
    by construction. Each vertex binds to its bone's parent/child pair.
    """
    cfg = config or ToyBodyConfig()
    rng = np.random.default_rng(cfg.seed)
    rest = _rest_joint_positions()
    parents = _full_parent_table()
    pairs = _pair_table()
    index = {n: i for i, n in enumerate(JOINT_NAMES)}
    scale = cfg.vertex_budget / 600.0

    seed_bones = []
    for name, (count, radius) in _BONE_SPECS.items():
        seed_bones.append((index[name], max(2, round(count * scale)), radius))
    for f in _FINGERS:
        for i in (1, 2, 3):
            seed_bones.append((index[f"l_{f}{i}"],
                               max(2, round(_HAND_SEEDS * scale)), _HAND_RADIUS))

    mirror = np.array([-1.0, 1.0, 1.0])
    verts: list = []
    weights: list = []     # (joint, w) pairs per vertex
    dirs_shape: list = []
    dirs_expr: list = []
    mirror_map: list = []
    part: list = []

    head_pos = rest[index["head"]]
    shape_field = rng.normal(scale=0.02, size=(10, 3, 3))
    shape_off = rng.normal(scale=0.01, size=(10, 3))
    expr_field = rng.normal(scale=0.02, size=(10, 3, 3))

    def field_dirs(p):
        ds = shape_field @ p + shape_off            # (10, 3)
        win = np.exp(-((p - head_pos) ** 2).sum() / (2 * 0.12 ** 2))
        de = win * (expr_field @ (p - head_pos) + 0.01)
        return ds.T, de.T                           # (3, 10) each

    def part_of(child: int) -> str:
        name = JOINT_NAMES[child]
        if _LHAND_BASE <= child < _RHAND_BASE:
            return "lhand"
        if _RHAND_BASE <= child < JAW:
            return "rhand"
        if name in ("head", "jaw"):
            return "face"
        return "body"

    for child, count, radius in seed_bones:
        par = parents[child]
        a, b = rest[par], rest[child]
        axis = b - a
        axis = axis / np.linalg.norm(axis)
        e1, e2 = _bone_frame(axis)
        for s in range(count):
            t = np.clip((s + 0.5) / count * 0.7 + 0.15 + rng.normal(scale=0.03),
                        0.10, 0.90)
            phi = 2 * np.pi * (s % 4) / 4 + rng.normal(scale=0.25)
            r = radius * rng.uniform(0.8, 1.2)
            p = a + t * (b - a) + r * (np.cos(phi) * e1 + np.sin(phi) * e2)
            w_child = 0.15 + 0.7 * t
            ds, de = field_dirs(p)
            tag = part_of(child)

            i = len(verts)
            verts.append(p)
            weights.append(((child, w_child), (par, 1.0 - w_child)))
            dirs_shape.append(ds)
            dirs_expr.append(de)
            part.append(tag)
            if abs(p[0]) < 1e-12:
                mirror_map.append(i)
            else:
                verts.append(p * mirror)
                weights.append(((pairs[child], w_child), (pairs[par], 1.0 - w_child)))
                dirs_shape.append(ds * mirror[:, None])
                dirs_expr.append(de * mirror[:, None])
                part.append(part_of(int(pairs[child])))
                mirror_map.extend([i + 1, i])

    v = len(verts)
    template = np.asarray(verts)
    skin = np.zeros((v, NUM_JOINTS))
    for i, pairs_w in enumerate(weights):
        for j, w in pairs_w:
            skin[i, j] += w
    shape_dirs = np.asarray(dirs_shape)
    expr_dirs = np.asarray(dirs_expr)
    mirror_map = np.asarray(mirror_map, dtype=np.intp)

    # joint regressor: inverse-distance over the nearest vertices bound to
    # each joint; right-side rows copy mirrored left rows so the regressor
    # commutes with the mirror maps exactly
    regressor = np.zeros((NUM_JOINTS, v))
    for j, name in enumerate(JOINT_NAMES):
        if name.startswith("r_"):
            continue
        bound = np.flatnonzero(skin[:, j] > 1e-9)
        d = np.linalg.norm(template[bound] - rest[j], axis=1)
        keep = bound[np.argsort(d)[:8]]
        inv = 1.0 / (np.linalg.norm(template[keep] - rest[j], axis=1) + 1e-6)
        regressor[j, keep] = inv / inv.sum()
    for j, name in enumerate(JOINT_NAMES):
        if name.startswith("r_"):
            regressor[j] = regressor[pairs[j]][mirror_map]

    part = np.asarray(part)
    part_vertices = {tag: np.flatnonzero(part == tag)
                     for tag in ("body", "lhand", "rhand", "face")}
    mcp = np.asarray(
        [[index[f"l_{f}1"] for f in ("index", "middle", "ring", "pinky")],
         [index[f"r_{f}1"] for f in ("index", "middle", "ring", "pinky")]],
        dtype=np.intp)

    return BodyModel(
        template_vertices=template, kinematic_parents=parents, rest_joints=rest,
        skin_weights=skin, shape_dirs=shape_dirs, expr_dirs=expr_dirs,
        joint_regressor=regressor, left_right_pairs=pairs, mcp_indices=mcp,
        vertex_mirror_map=mirror_map, part_vertices=part_vertices)


# ---------------------------------------------------------------------------
# serialization

_MODEL_FORMAT = "wbpose-body-model"
_MODEL_VERSION = 1


def save_model(model: BodyModel, path) -> None:
    """Write the model as versioned JSON; float64 values round-trip exactly."""
    doc = {
        "format": _MODEL_FORMAT,
        "version": _MODEL_VERSION,
        "template_vertices": model.template_vertices.tolist(),
        "kinematic_parents": model.kinematic_parents.tolist(),
        "rest_joints": model.rest_joints.tolist(),
        "skin_weights": model.skin_weights.tolist(),
        "shape_dirs": model.shape_dirs.tolist(),
        "expr_dirs": model.expr_dirs.tolist(),
        "joint_regressor": model.joint_regressor.tolist(),
        "left_right_pairs": model.left_right_pairs.tolist(),
        "mcp_indices": model.mcp_indices.tolist(),
        "vertex_mirror_map": model.vertex_mirror_map.tolist(),
        "part_vertices": {k: v.tolist() for k, v in model.part_vertices.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> BodyModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read model file {path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != _MODEL_FORMAT:
        raise FormatError(f"{path} is not a body-model file")
    if doc.get("version") != _MODEL_VERSION:
        raise FormatError(f"unsupported model version {doc.get('version')}")
    f64 = lambda k: np.asarray(doc[k], dtype=np.float64)
    ints = lambda k: np.asarray(doc[k], dtype=np.intp)
    return BodyModel(
        template_vertices=f64("template_vertices"),
        kinematic_parents=ints("kinematic_parents"),
        rest_joints=f64("rest_joints"),
        skin_weights=f64("skin_weights"),
        shape_dirs=f64("shape_dirs"),
        expr_dirs=f64("expr_dirs"),
        joint_regressor=f64("joint_regressor"),
        left_right_pairs=ints("left_right_pairs"),
        mcp_indices=ints("mcp_indices"),
        vertex_mirror_map=ints("vertex_mirror_map"),
        part_vertices={k: np.asarray(v, dtype=np.intp)
                       for k, v in doc["part_vertices"].items()})
