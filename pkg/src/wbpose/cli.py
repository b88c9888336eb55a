"""Command-line front end: train, eval, gradcheck, ablate, gen-data."""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .body_model import build_toy_model
from .checks import format_check_table, run_grad_suite
from .config import PROFILES, RunConfig, default_config, load_config, run_to_dict
from .errors import WbposeError
from .pipeline import load_pipeline
from .synth import load_split, make_split
from .train import evaluate_pipeline, history_text, train_run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK = 3

WRIST_ROWS = (("Body", "body_only"),
              ("Body + Hand GAP", "body_plus_hand_gap"),
              ("Body + All hand joints", "body_plus_all_joints"),
              ("Body + MCP joints (Ours)", "body_plus_mcp"))
FINGER_ROWS = (("With body features", True),
               ("Without body features (Ours)", False))
REGRESSOR_ROWS = (("GAP feat.", "gap"),
                  ("Joint feat.", "joint_feat"),
                  ("2D joint coord.", "coord2d"),
                  ("3D joint coord.", "coord3d"),
                  ("3D joint coord. + joint feat. (Ours)", "coord3d_plus_feat"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wbpose",
        description="Whole-body pose pipeline: training, evaluation, checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", help="JSON run config path")
        src.add_argument("--profile", choices=PROFILES,
                         help="built-in config (default: toy)")
        p.add_argument("--seed", type=int,
                       help="override the run seed from the config")
        p.add_argument("--out-dir", help="artifact directory")
        if workers:
            p.add_argument("--workers", type=int, default=1,
                           help="parallel sample generation processes")

    common(sub.add_parser("train", help="fit a pipeline on synthetic data"))
    p_eval = sub.add_parser("eval", help="per-part metrics for a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", help="dataset archive (default: generate)")
    common(sub.add_parser("gradcheck",
                          help="finite-difference gradient verification"))
    common(sub.add_parser("ablate",
                          help="wrist/finger/regressor input comparisons"))
    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p_gen, workers=True)
    p_gen.add_argument("--n", type=int, help="sample count "
                       "(default: config data_n)")
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config:
        rc = load_config(args.config)
    else:
        rc = default_config(args.profile or "toy")
    if args.seed is not None:
        rc = replace(rc, train=replace(rc.train, seed=args.seed))
    return rc


def _out_dir(args, default: str) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path("runs") / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(out: Path, report) -> None:
    (out / "report.txt").write_text(report.format_table() + "\n")
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")


def cmd_train(args) -> int:
    rc = _resolve_config(args)
    out = _out_dir(args, "train")
    model = build_toy_model()
    result = train_run(rc, model=model)
    (out / "history.tsv").write_text(history_text(result.history))
    result.pipe.save(out / "checkpoint.wbarch",
                     meta={"run_config": run_to_dict(rc),
                           "steps_run": result.steps_run,
                           "first_loss": result.first_loss,
                           "final_loss": result.final_loss})
    eval_samples = make_split(rc.train.eval_n, rc.train.eval_seed, rc.scene,
                              rc.pipeline)
    report = evaluate_pipeline(result.pipe, eval_samples, model)
    _write_report(out, report)
    print(f"trained {result.steps_run} steps: loss "
          f"{result.first_loss:.4f} -> {result.final_loss:.4f}")
    print(report.format_table())
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _resolve_config(args)
    out = _out_dir(args, "eval")
    model = build_toy_model()
    pipe, _ = load_pipeline(args.checkpoint, model)
    if args.data:
        samples, _ = load_split(args.data)
    else:
        samples = make_split(rc.train.eval_n, rc.train.eval_seed, rc.scene,
                             pipe.cfg)
    report = evaluate_pipeline(pipe, samples, model)
    _write_report(out, report)
    print(report.format_table())
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rc = _resolve_config(args)
    out = _out_dir(args, "gradcheck")
    results = run_grad_suite(seed=rc.train.seed, cfg=rc.pipeline)
    text = format_check_table(results)
    (out / "gradcheck.txt").write_text(text)
    print(text, end="")
    if not all(r.ok for r in results):
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _ablation_metrics(report) -> dict:
    return {"body_mpjpe": report.mpjpe["body"],
            "hands_mpvpe": report.mpvpe["hands_avg"],
            "hands_mpvpe_pelvis": report.hand_mpvpe_pelvis["hands_avg"],
            "face_mpvpe": report.mpvpe.get("face", float("nan"))}


def cmd_ablate(args) -> int:
    rc = _resolve_config(args)
    out = _out_dir(args, "ablate")
    model = build_toy_model()
    data = make_split(rc.train.data_n, rc.train.data_seed, rc.scene,
                      rc.pipeline)
    eval_samples = make_split(rc.train.eval_n, rc.train.eval_seed, rc.scene,
                              rc.pipeline)

    def run_variant(pipeline_cfg):
        variant_rc = replace(rc, pipeline=pipeline_cfg)
        result = train_run(variant_rc, data=data, model=model)
        return _ablation_metrics(evaluate_pipeline(result.pipe, eval_samples,
                                                   model))

    tables = {}
    tables["wrist rotation inputs"] = [
        (label, run_variant(replace(rc.pipeline, wrist_input_mode=mode)))
        for label, mode in WRIST_ROWS]
    tables["finger rotation features"] = [
        (label, run_variant(replace(rc.pipeline, finger_body_feature=flag)))
        for label, flag in FINGER_ROWS]
    tables["rotation regressor inputs"] = [
        (label, run_variant(replace(rc.pipeline, regressor_input_mode=mode)))
        for label, mode in REGRESSOR_ROWS]

    cols = ("body_mpjpe", "hands_mpvpe", "hands_mpvpe_pelvis", "face_mpvpe")
    lines = []
    for title, rows in tables.items():
        lines.append(title)
        lines.append(f"  {'variant':<38}" + "".join(f"{c:>20}" for c in cols))
        for label, m in rows:
            lines.append(f"  {label:<38}"
                         + "".join(f"{m[c]:>20.3f}" for c in cols))
        lines.append("")
    text = "\n".join(lines)
    (out / "ablation.txt").write_text(text)
    (out / "ablation.json").write_text(json.dumps(
        {title: {label: m for label, m in rows}
         for title, rows in tables.items()}, sort_keys=True, indent=1) + "\n")
    print(text, end="")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    rc = _resolve_config(args)
    out = _out_dir(args, "data")
    n = args.n if args.n is not None else rc.train.data_n
    seed = args.seed if args.seed is not None else rc.train.data_seed
    path = out / "dataset.wbarch"
    make_split(n, seed, rc.scene, rc.pipeline, path=path,
               workers=args.workers)
    print(f"wrote {n} samples to {path}")
    return EXIT_OK


_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
             "ablate": cmd_ablate, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except WbposeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
