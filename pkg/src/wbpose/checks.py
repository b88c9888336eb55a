"""Finite-difference verification suite covering every differentiable op.

Each case builds small random inputs, wraps the operation in a scalar
contraction with fixed weights, and compares the taped gradients with
central differences. The full-pipeline case runs the complete loss, so
its tolerance is looser (longer chains accumulate more roundoff).
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .body_model import ModelParams, build_toy_model, forward_model
from .grid_ops import bilinear_sample, roi_align, soft_argmax_2d, soft_argmax_3d
from .losses import compute_loss
from .pipeline import PipelineConfig, WholeBodyPipeline, toy_profile
from .rotations import axis_angle_to_matrix, rot6d_to_matrix
from .synth import sample_scene
from .train import sample_targets

OP_TOL = 1e-4
PIPELINE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel: float
    tol: float
    n_checked: int
    seconds: float
    ok: bool


def _contract(x: Tensor, key: int) -> Tensor:
    # fresh rng per call: grad_check re-evaluates f, which must stay pure
    w = np.random.default_rng(key).normal(size=x.shape)
    return ad.tsum(x * w)


def _run_case(name, f, inputs, tol, rng, h=1e-6, max_entries=40):
    t0 = time.perf_counter()
    report = ad.grad_check(f, inputs, h=h, tol=tol, max_entries=max_entries,
                           rng=rng)
    dt = time.perf_counter() - t0
    max_rel = max((e[1] for e in report.entries), default=0.0)
    n = sum(e[2] for e in report.entries)
    return CheckResult(name=name, max_rel=max_rel, tol=tol, n_checked=n,
                       seconds=dt, ok=report.ok)


def run_grad_suite(seed: int = 0, cfg: PipelineConfig | None = None) -> list:
    """All gradient checks; deterministic for a given seed."""
    cfg = cfg if cfg is not None else toy_profile()
    rng = np.random.default_rng(seed)
    results = []

    vol = Tensor(rng.normal(scale=1.5, size=(3, 4, 6, 5)))
    results.append(_run_case(
        "soft_argmax_3d", lambda v: _contract(soft_argmax_3d(v), seed + 1),
        [vol], OP_TOL, rng))

    maps = Tensor(rng.normal(scale=1.5, size=(4, 6, 5)))
    results.append(_run_case(
        "soft_argmax_2d", lambda m: _contract(soft_argmax_2d(m), seed + 2),
        [maps], OP_TOL, rng))

    fmap = Tensor(rng.normal(size=(3, 9, 7)))
    # fractional positions keep central differences off the bilinear kinks
    pts = Tensor(np.stack([rng.integers(1, 6, size=6) + rng.uniform(0.2, 0.8, 6),
                           rng.integers(1, 8, size=6) + rng.uniform(0.2, 0.8, 6)],
                          axis=1))
    results.append(_run_case(
        "bilinear_sample",
        lambda f, p: _contract(bilinear_sample(f, p), seed + 3),
        [fmap, pts], OP_TOL, rng, h=1e-5))

    src = Tensor(rng.normal(size=(3, 16, 12)))
    box = Tensor(np.array([6.3, 8.2, 7.7, 9.1]))
    results.append(_run_case(
        "roi_align", lambda s, b: _contract(roi_align(s, b, 4, 4), seed + 4),
        [src, box], OP_TOL, rng, h=1e-5))

    r6 = Tensor(rng.normal(size=(4, 6)))
    results.append(_run_case(
        "rot6d_to_matrix", lambda v: _contract(rot6d_to_matrix(v), seed + 5),
        [r6], OP_TOL, rng))

    aa = Tensor(rng.uniform(0.4, 1.8, size=(4, 3)) * rng.choice([-1, 1], (4, 3)))
    results.append(_run_case(
        "axis_angle_to_matrix",
        lambda v: _contract(axis_angle_to_matrix(v), seed + 6),
        [aa], OP_TOL, rng))

    model = build_toy_model()
    params = ModelParams(
        theta_body=Tensor(rng.normal(scale=0.3, size=(22, 3))),
        theta_lhand=Tensor(rng.normal(scale=0.3, size=(15, 3))),
        theta_rhand=Tensor(rng.normal(scale=0.3, size=(15, 3))),
        theta_jaw=Tensor(rng.normal(scale=0.3, size=3)),
        beta=Tensor(rng.normal(size=10)), psi=Tensor(rng.normal(size=10)),
        trans=Tensor(rng.normal(size=3)))
    leaves = [params.theta_body, params.theta_lhand, params.theta_rhand,
              params.theta_jaw, params.beta, params.psi, params.trans]
    def fk_loss(*_):
        mesh = forward_model(model, params)
        return _contract(mesh.vertices, seed + 7) + _contract(mesh.joints,
                                                              seed + 8)

    results.append(_run_case("forward_model", fk_loss, leaves, OP_TOL, rng,
                             max_entries=6))

    pipe = WholeBodyPipeline(cfg, model, np.random.default_rng(seed + 9))
    hr = np.random.default_rng(seed + 10)
    scale = 0.05 / (cfg.head_gain * cfg.input_scale)
    for t in pipe.params().values():
        if np.abs(t.data).max() == 0:
            t.data[...] = hr.normal(scale=scale, size=t.data.shape)
    sample = sample_scene(seed + 11, cfg=cfg, model=model)
    targets = sample_targets(sample, cfg)
    names = ("body_backbone.conv0.w", "body_p2p.heat.w", "body_p2p.feat.w",
             "hand_p2p.feat.w", "box_head.conv1.w", "size_head.fc0.w",
             "body_rot.fc.w", "shape_head.w", "face_fc.w", "hand_rot.fc.w")
    leaves = [pipe.params()[n] for n in names]

    def pipe_loss(*_):
        out = pipe.full_forward(sample.image, override_boxes=sample.gt_boxes)
        return compute_loss(out, targets, cfg).total

    # gained heads multiply curvature per unit weight, so the step shrinks
    results.append(_run_case("pipeline_loss", pipe_loss, leaves, PIPELINE_TOL,
                             rng, h=1e-6, max_entries=3))
    return results


def format_check_table(results) -> str:
    lines = [f"{'case':<22}{'max rel err':>14}{'tol':>10}{'entries':>9}"
             f"{'seconds':>9}  verdict"]
    for r in results:
        lines.append(f"{r.name:<22}{r.max_rel:>14.3e}{r.tol:>10.0e}"
                     f"{r.n_checked:>9}{r.seconds:>9.2f}  "
                     f"{'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
