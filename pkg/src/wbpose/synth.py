"""Synthetic scenes: posed toy bodies rendered as color-coded joint blobs.

Each sample draws bounded-uniform pose, shape, and placement parameters,
poses the body model, and renders one Gaussian blob per joint at its
projected pixel location. Colors are fixed per joint but shared between
left/right partners, so a horizontally flipped image stays a valid scene
for the mirrored parameters. Ground truth carries everything the losses
consume: parameters, camera-frame joints, projections, heatmap-grid
targets, and part boxes.
"""

import colorsys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import storage
from .body_model import (L_WRIST, R_WRIST, BodyModel, ModelParams,
                         build_toy_model, forward_model, perspective_project)
from .errors import BehindCamera, FormatError, ShapeMismatch
from .grid_ops import Box
from .losses import body_grid_targets, hand_grid_targets
from .pipeline import PipelineConfig, mirror_box, toy_profile
from .rotations import mirror_rotation

DATASET_KIND = "wbpose-dataset"
DATASET_VERSION = 1

_PART_SLICES = {"lhand": slice(22, 37), "rhand": slice(37, 52)}
_FACE_JOINTS = (12, 15, 52)


@dataclass(frozen=True)
class SceneConfig:
    """Pose ranges (radians), placement spread (m), and render knobs."""

    range_body: float = 0.6
    range_wrist: float = 1.2
    range_finger: float = 1.0
    range_jaw: float = 0.3
    range_beta: float = 1.0
    range_psi: float = 1.0
    trans_xy: float = 0.1
    trans_z: float = 3.0
    blob_sigma: float = 2.0
    noise: float = 0.01
    hand_dropout: float = 0.0
    hand_margin: float = 4.0
    face_margin: float = 6.0
    min_box: float = 10.0
    edge_margin: float = 2.0
    max_tries: int = 100

    def __post_init__(self):
        for name in ("range_body", "range_wrist", "range_finger", "range_jaw",
                     "range_beta", "range_psi", "trans_xy", "trans_z",
                     "blob_sigma", "hand_margin", "face_margin", "min_box",
                     "edge_margin"):
            if getattr(self, name) < 0:
                raise ShapeMismatch(f"{name} must be >= 0")
        if self.blob_sigma == 0:
            raise ShapeMismatch("blob_sigma must be positive")
        if not 0.0 <= self.hand_dropout <= 1.0:
            raise ShapeMismatch("hand_dropout must be a probability")
        if self.max_tries < 1:
            raise ShapeMismatch("max_tries must be >= 1")


def scene_to_dict(scene: SceneConfig) -> dict:
    return asdict(scene)


def scene_from_dict(d: dict) -> SceneConfig:
    known = {f.name for f in fields(SceneConfig)}
    unknown = set(d) - known
    if unknown:
        raise FormatError(f"unknown scene fields {sorted(unknown)}")
    return SceneConfig(**d)


@dataclass
class Sample:
    image: np.ndarray          # (3, H, W) float32 in [0, 1]
    gt_params: ModelParams
    gt_joints_3d: np.ndarray   # (53, 3) camera frame, m
    gt_joints_2d: np.ndarray   # (53, 2) full-image px
    gt_heatmap_coords: dict    # body/rhand/lhand grid targets
    gt_boxes: dict             # lhand/rhand/face Box, full-image px


def image_intrinsics(cfg: PipelineConfig):
    """Focal and principal point of the full-resolution image."""
    h, w = cfg.image_hw
    return ((2.0 * cfg.focal[0], 2.0 * cfg.focal[1]),
            ((w - 1) / 2.0, (h - 1) / 2.0))


def joint_palette(model: BodyModel) -> np.ndarray:
    """One RGB color per joint, equal within each left/right pair.

    Golden-ratio hue stepping keeps the colors spread out; pair sharing
    makes rendering commute with horizontal flips.
    """
    pairs = model.left_right_pairs
    colors = np.zeros((len(pairs), 3))
    orbit = {}
    for j in range(len(pairs)):
        key = min(j, int(pairs[j]))
        if key not in orbit:
            orbit[key] = len(orbit)
        k = orbit[key]
        hue = (k * 0.61803398875) % 1.0
        sat = 0.9 if k % 2 == 0 else 0.65
        val = 0.8 if k % 3 == 0 else 1.0
        colors[j] = colorsys.hsv_to_rgb(hue, sat, val)
    return colors


def render_blobs(joints2d, colors, sigma, image_hw, keep=None) -> np.ndarray:
    """Sum of per-joint Gaussian blobs, one color each; float64 output."""
    h, w = image_hw
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    img = np.zeros((3, h, w))
    inv = 1.0 / (2.0 * sigma * sigma)
    for j, (u, v) in enumerate(np.asarray(joints2d, dtype=np.float64)):
        if keep is not None and not keep[j]:
            continue
        g = np.exp(-((xs - u) ** 2 + (ys - v) ** 2) * inv)
        img += colors[j][:, None, None] * g
    return img


def _part_box(points, margin, min_size) -> Box:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    size = np.maximum(hi - lo + 2.0 * margin, min_size)
    center = (lo + hi) / 2.0
    return Box(float(center[0]), float(center[1]),
               float(size[0]), float(size[1]))


def gt_part_boxes(joints2d, scene: SceneConfig) -> dict:
    """Tight min/max boxes with margins around each part's projections."""
    boxes = {name: _part_box(joints2d[sl], scene.hand_margin, scene.min_box)
             for name, sl in _PART_SLICES.items()}
    boxes["face"] = _part_box(joints2d[list(_FACE_JOINTS)], scene.face_margin,
                              scene.min_box)
    return boxes


def _draw_params(rng, scene: SceneConfig, cfg: PipelineConfig) -> ModelParams:
    scale = np.full((22, 1), scene.range_body)
    scale[[L_WRIST, R_WRIST]] = scene.range_wrist
    return ModelParams(
        theta_body=rng.uniform(-1, 1, size=(22, 3)) * scale,
        theta_lhand=rng.uniform(-1, 1, size=(15, 3)) * scene.range_finger,
        theta_rhand=rng.uniform(-1, 1, size=(15, 3)) * scene.range_finger,
        theta_jaw=rng.uniform(-1, 1, size=3) * scene.range_jaw,
        beta=rng.uniform(-1, 1, size=10) * scene.range_beta,
        psi=rng.uniform(-1, 1, size=10) * scene.range_psi,
        trans=np.array([rng.uniform(-scene.trans_xy, scene.trans_xy),
                        rng.uniform(-scene.trans_xy, scene.trans_xy),
                        cfg.trans_z_init
                        + rng.uniform(-scene.trans_z, scene.trans_z)]))


def heatmap_targets(joints2d, joints3d, boxes, cfg: PipelineConfig) -> dict:
    """Grid-space targets for the body net and both hand crops."""
    halfres = (np.asarray(joints2d, dtype=np.float64) - 0.5) * 0.5
    return {
        "body": body_grid_targets(halfres, joints3d, cfg),
        "rhand": hand_grid_targets(halfres, joints3d,
                                   boxes["rhand"].as_array(), "rhand", cfg),
        "lhand": hand_grid_targets(halfres, joints3d,
                                   boxes["lhand"].as_array(), "lhand", cfg),
    }


def sample_scene(seed, scene: SceneConfig | None = None,
                 cfg: PipelineConfig | None = None,
                 model: BodyModel | None = None) -> Sample:
    """One deterministic scene; resamples poses that leave the frame."""
    scene = scene if scene is not None else SceneConfig()
    cfg = cfg if cfg is not None else toy_profile()
    model = model if model is not None else build_toy_model()
    rng = np.random.default_rng(seed)
    h, w = cfg.image_hw
    focal, princpt = image_intrinsics(cfg)
    m = scene.edge_margin

    for _ in range(scene.max_tries):
        params = _draw_params(rng, scene, cfg)
        joints3d = forward_model(model, params).joints.data
        z = joints3d[:, 2]
        if np.any(z <= 1.0):
            continue
        u = joints3d[:, 0] / z * focal[0] + princpt[0]
        v = joints3d[:, 1] / z * focal[1] + princpt[1]
        if (u.min() < m or u.max() > w - 1 - m
                or v.min() < m or v.max() > h - 1 - m):
            continue
        break
    else:
        raise BehindCamera(
            f"no in-frame pose after {scene.max_tries} draws (seed {seed})")

    joints2d = perspective_project(joints3d, focal, princpt).data
    boxes = gt_part_boxes(joints2d, scene)

    keep = np.ones(len(joints2d), dtype=bool)
    for name in ("lhand", "rhand"):
        if rng.uniform() < scene.hand_dropout:
            keep[_PART_SLICES[name]] = False
    image = render_blobs(joints2d, joint_palette(model), scene.blob_sigma,
                         cfg.image_hw, keep=keep)
    if scene.noise > 0:
        image = image + rng.normal(scale=scene.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return Sample(image=image, gt_params=params, gt_joints_3d=joints3d,
                  gt_joints_2d=joints2d,
                  gt_heatmap_coords=heatmap_targets(joints2d, joints3d,
                                                    boxes, cfg),
                  gt_boxes=boxes)


def mirror_sample(sample: Sample, model: BodyModel,
                  cfg: PipelineConfig) -> Sample:
    """Horizontally flipped scene with consistently mirrored ground truth."""
    pairs = model.left_right_pairs
    p = sample.gt_params
    theta_body = mirror_rotation(np.asarray(p.theta_body)).data[pairs[:22]]
    params = ModelParams(
        theta_body=theta_body,
        theta_lhand=mirror_rotation(np.asarray(p.theta_rhand)).data,
        theta_rhand=mirror_rotation(np.asarray(p.theta_lhand)).data,
        theta_jaw=mirror_rotation(np.asarray(p.theta_jaw)).data,
        beta=np.array(p.beta, dtype=np.float64),
        psi=np.array(p.psi, dtype=np.float64),
        trans=np.asarray(p.trans, dtype=np.float64) * (-1.0, 1.0, 1.0))

    joints3d = sample.gt_joints_3d[pairs] * (-1.0, 1.0, 1.0)
    _, w = cfg.image_hw
    joints2d = sample.gt_joints_2d[pairs].copy()
    joints2d[:, 0] = (w - 1.0) - joints2d[:, 0]
    boxes = {"lhand": Box(*mirror_box(sample.gt_boxes["rhand"].as_array(), w)),
             "rhand": Box(*mirror_box(sample.gt_boxes["lhand"].as_array(), w)),
             "face": Box(*mirror_box(sample.gt_boxes["face"].as_array(), w))}
    return Sample(image=np.flip(sample.image, axis=-1).copy(),
                  gt_params=params, gt_joints_3d=joints3d,
                  gt_joints_2d=joints2d,
                  gt_heatmap_coords=heatmap_targets(joints2d, joints3d,
                                                    boxes, cfg),
                  gt_boxes=boxes)


# ---------------------------------------------------------------------------
# split generation and persistence

_PARAM_FIELDS = ("theta_body", "theta_lhand", "theta_rhand", "theta_jaw",
                 "beta", "psi", "trans")
_COORD_KEYS = ("body", "rhand", "lhand")
_BOX_KEYS = ("lhand", "rhand", "face")


def split_seeds(n: int, seed: int) -> np.ndarray:
    """Independent per-sample seeds derived from one master seed."""
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)


def make_split(n: int, seed: int, scene: SceneConfig | None = None,
               cfg: PipelineConfig | None = None, path=None,
               workers: int = 1) -> list:
    """n independent samples; optionally persisted to `path`."""
    if n < 1:
        raise ShapeMismatch(f"need n >= 1 samples, got {n}")
    scene = scene if scene is not None else SceneConfig()
    cfg = cfg if cfg is not None else toy_profile()
    seeds = [int(s) for s in split_seeds(n, seed)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        from functools import partial
        fn = partial(sample_scene, scene=scene, cfg=cfg)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(fn, seeds))
    else:
        model = build_toy_model()
        samples = [sample_scene(s, scene, cfg, model) for s in seeds]
    if path is not None:
        save_split(path, samples, meta={"n": n, "seed": seed,
                                        "scene": scene_to_dict(scene)}, cfg=cfg)
    return samples


def _sample_record(sample: Sample) -> bytes:
    items = [("image", sample.image)]
    items += [(f, np.asarray(getattr(sample.gt_params, f), dtype=np.float64))
              for f in _PARAM_FIELDS]
    items += [("joints3d", sample.gt_joints_3d),
              ("joints2d", sample.gt_joints_2d)]
    items += [(f"hm_{k}", sample.gt_heatmap_coords[k]) for k in _COORD_KEYS]
    items += [(f"box_{k}", sample.gt_boxes[k].as_array()) for k in _BOX_KEYS]
    return storage.encode_named_arrays(items)


def _sample_from_record(rec: bytes) -> Sample:
    arrays = dict(storage.decode_named_arrays(rec))
    try:
        params = ModelParams(**{f: arrays[f] for f in _PARAM_FIELDS})
        return Sample(
            image=arrays["image"],
            gt_params=params,
            gt_joints_3d=arrays["joints3d"],
            gt_joints_2d=arrays["joints2d"],
            gt_heatmap_coords={k: arrays[f"hm_{k}"] for k in _COORD_KEYS},
            gt_boxes={k: Box(*arrays[f"box_{k}"]) for k in _BOX_KEYS})
    except KeyError as e:
        raise FormatError(f"sample record missing field {e}") from e


def save_split(path, samples, meta=None, cfg: PipelineConfig | None = None):
    """Versioned container: JSON header record, then one record per sample."""
    from .pipeline import config_to_dict
    header = {"version": DATASET_VERSION, "count": len(samples)}
    header.update(meta or {})
    if cfg is not None:
        header["pipeline"] = config_to_dict(cfg)
    records = [storage.encode_json(header)]
    records += [_sample_record(s) for s in samples]
    storage.write_archive(path, DATASET_KIND, records)


def load_split(path):
    """Returns (samples, header dict)."""
    records = storage.read_archive(path, DATASET_KIND)
    if not records:
        raise FormatError(f"{path}: empty dataset")
    header = storage.decode_json(records[0])
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version "
                          f"{header.get('version')!r}")
    samples = [_sample_from_record(r) for r in records[1:]]
    if "count" in header and header["count"] != len(samples):
        raise FormatError(f"{path}: header says {header['count']} samples, "
                          f"found {len(samples)}")
    return samples, header
