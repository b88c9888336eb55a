"""Training driver: single-tape mini-batch steps plus mesh evaluation."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .body_model import BodyModel, build_toy_model, forward_model
from .config import RunConfig
from .errors import ShapeMismatch
from .losses import CoordTargets, LossTargets, compute_loss, hand_grid_targets
from .metrics import MetricReport, evaluate
from .optim import Adam
from .pipeline import WholeBodyPipeline
from .synth import make_split, mirror_sample

HISTORY_COLUMNS = ("step", "lr", "l_param", "l_coord", "l_box", "total")


@dataclass
class TrainResult:
    pipe: WholeBodyPipeline
    history: list = field(default_factory=list)   # one dict per logged step
    first_loss: float = float("nan")
    final_loss: float = float("nan")
    steps_run: int = 0


def build_pipeline(rc: RunConfig, model: BodyModel | None = None):
    model = model if model is not None else build_toy_model()
    pipe = WholeBodyPipeline(rc.pipeline, model,
                             np.random.default_rng(rc.train.seed))
    return pipe, model


def sample_targets(sample, cfg, boxes_used=None) -> LossTargets:
    """Loss targets for one sample given the hand boxes actually cropped.

    With boxes_used=None the stored targets (computed from the ground
    truth boxes) apply; otherwise the hand heatmap targets are recomputed
    in the frames of the given boxes.
    """
    halfres = (sample.gt_joints_2d - 0.5) * 0.5
    hm = sample.gt_heatmap_coords
    if boxes_used is None:
        rhand, lhand = hm["rhand"], hm["lhand"]
    else:
        rhand = hand_grid_targets(halfres, sample.gt_joints_3d,
                                  boxes_used["rhand"], "rhand", cfg)
        lhand = hand_grid_targets(halfres, sample.gt_joints_3d,
                                  boxes_used["lhand"], "lhand", cfg)
    coords = CoordTargets(body_grid=hm["body"], rhand_grid=rhand,
                          lhand_grid=lhand, joints3d=sample.gt_joints_3d,
                          joints2d=halfres)
    return LossTargets(params=sample.gt_params, coords=coords,
                       boxes=sample.gt_boxes)


def train_run(rc: RunConfig, data=None, model: BodyModel | None = None,
              stop_frac: float | None = None) -> TrainResult:
    """Adam training on a synthetic split; deterministic given the config.

    stop_frac, when set, ends the run once the batch loss drops below
    stop_frac * (first step's loss).
    """
    tc = rc.train
    pipe, model = build_pipeline(rc, model)
    samples = data if data is not None else make_split(
        tc.data_n, tc.data_seed, rc.scene, rc.pipeline)
    if not samples:
        raise ShapeMismatch("training needs at least one sample")
    leaves = pipe.params()
    opt = Adam(leaves, tc.adam)
    rng = np.random.default_rng(tc.seed + 1)
    result = TrainResult(pipe=pipe)
    order, cursor = rng.permutation(len(samples)), 0

    for step in range(1, tc.steps + 1):
        idx = np.empty(tc.batch_size, dtype=np.intp)
        for b in range(tc.batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(samples)), 0
            idx[b] = order[cursor]
            cursor += 1
        flips = rng.uniform(size=tc.batch_size) < tc.hflip_p
        gt_box = rng.uniform(size=tc.batch_size) < tc.gt_box_p
        parts = []
        breakdown = np.zeros(3)
        with ad.Tape():
            for i in range(tc.batch_size):
                s = samples[int(idx[i])]
                if flips[i]:
                    s = mirror_sample(s, model, rc.pipeline)
                if gt_box[i]:
                    out = pipe.full_forward(s.image, override_boxes=s.gt_boxes)
                    targets = sample_targets(s, rc.pipeline)
                else:
                    out = pipe.full_forward(s.image)
                    used = {k: np.array(v.data) for k, v in out.boxes.items()}
                    targets = sample_targets(s, rc.pipeline, boxes_used=used)
                br = compute_loss(out, targets, rc.pipeline)
                parts.append(br.total)
                breakdown += (float(br.l_param.data), float(br.l_coord.data),
                              float(br.l_box.data))
            loss = ad.tmean(ad.stack(parts, axis=0))
            ad.backward(loss, list(leaves.values()))
        total = float(loss.data)
        opt.step()
        opt.zero_grad()

        if step == 1:
            result.first_loss = total
        result.final_loss = total
        result.steps_run = step
        if step == 1 or step % tc.log_every == 0 or step == tc.steps:
            bk = breakdown / tc.batch_size
            result.history.append({"step": step, "lr": opt.lr,
                                   "l_param": bk[0], "l_coord": bk[1],
                                   "l_box": bk[2], "total": total})
        if stop_frac is not None and total < stop_frac * result.first_loss:
            break
    return result


def history_text(history) -> str:
    """Loss curve as a fixed-format TSV block."""
    lines = ["\t".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append("\t".join(
            [str(row["step"])]
            + [f"{row[c]:.10e}" for c in HISTORY_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def evaluate_pipeline(pipe: WholeBodyPipeline, samples,
                      model: BodyModel) -> MetricReport:
    """Mean per-part metric tables over a sample list (predicted boxes)."""
    if not samples:
        raise ShapeMismatch("evaluation needs at least one sample")
    reports = []
    for s in samples:
        out = pipe.full_forward(s.image)
        gt_v = forward_model(model, s.gt_params).vertices.data
        reports.append(evaluate(out.mesh.vertices.data, gt_v, model))
    mean = MetricReport()
    for name in ("mpjpe", "pa_mpjpe", "mpvpe", "pa_mpvpe",
                 "hand_mpvpe_pelvis"):
        tables = [getattr(r, name) for r in reports]
        out_table = getattr(mean, name)
        for key in tables[0]:
            out_table[key] = float(np.mean([t[key] for t in tables]))
    return mean
