"""Run configuration: pipeline geometry + data ranges + training schedule.

One JSON document mirrors the three config dataclasses section by
section; unknown keys are rejected so typos fail loudly instead of
silently training a different model.
"""

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import FormatError, IOFailure, ShapeMismatch
from .optim import AdamConfig
from .pipeline import (PipelineConfig, config_from_dict, config_to_dict,
                       reference_profile, toy_profile)
from .synth import SceneConfig, scene_from_dict, scene_to_dict

PROFILES = ("toy", "reference")


@dataclass(frozen=True)
class TrainConfig:
    """Schedule, batching, augmentation, and dataset sizes."""

    steps: int = 600
    batch_size: int = 8
    seed: int = 0
    hflip_p: float = 0.5
    gt_box_p: float = 0.5
    log_every: int = 20
    data_n: int = 64
    data_seed: int = 100
    eval_n: int = 32
    eval_seed: int = 900
    adam: AdamConfig = AdamConfig(decay_step=450)

    def __post_init__(self):
        for name in ("steps", "batch_size", "log_every", "data_n", "eval_n"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"{name} must be >= 1")
        for name in ("hflip_p", "gt_box_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ShapeMismatch(f"{name} must be a probability")


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=toy_profile)
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def default_config(profile: str = "toy", **train_overrides) -> RunConfig:
    if profile not in PROFILES:
        raise FormatError(f"unknown profile {profile!r}; options: {PROFILES}")
    pipeline = toy_profile() if profile == "toy" else reference_profile()
    return RunConfig(pipeline=pipeline, train=TrainConfig(**train_overrides))


def _dataclass_from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise FormatError(f"unknown {cls.__name__} fields {sorted(unknown)}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**coerced)


def run_to_dict(rc: RunConfig) -> dict:
    out = {"pipeline": config_to_dict(rc.pipeline),
           "scene": scene_to_dict(rc.scene),
           "train": asdict(rc.train)}
    return out


def run_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - {"pipeline", "scene", "train"}
    if unknown:
        raise FormatError(f"unknown config sections {sorted(unknown)}")
    pipeline = config_from_dict(d.get("pipeline", {}))
    scene = scene_from_dict(d.get("scene", {}))
    train_doc = dict(d.get("train", {}))
    adam_doc = train_doc.pop("adam", {})
    train = _dataclass_from_dict(
        TrainConfig, {**train_doc, "adam": _dataclass_from_dict(AdamConfig,
                                                                adam_doc)})
    return RunConfig(pipeline=pipeline, scene=scene, train=train)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise IOFailure(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"config {path} must hold a JSON object")
    return run_from_dict(doc)


def save_config(path, rc: RunConfig) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(run_to_dict(rc), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        raise IOFailure(f"cannot write config {path}: {e}") from e
