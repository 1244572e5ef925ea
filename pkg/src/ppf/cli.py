"""Command line interface: ``ppf build-model | detect | eval | synth | ablate``.

Exit codes: 0 success, 2 no detection, 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .evaluate import EvalReport, SuiteConfig, ablate, evaluate_dataset, evaluate_synth, prepare_model
from .io import load_depth_png, load_intrinsics, load_ply, pose_to_json, save_intrinsics, save_ply, write_frame
from .model_table import build_model_table, load_table, save_table
from .pipeline import Detector, PipelineParams, apply_overrides
from .preprocess import subsample
from .synth import make_model, synth_scene

log = logging.getLogger("ppf")

EXIT_OK, EXIT_ERROR, EXIT_NO_DETECTION = 0, 1, 2


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_config(path) -> dict:
    """Overrides from a JSON object or from ``key=value`` lines (``#`` starts a comment)."""
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError:
        d = None
    if isinstance(d, dict):
        return d
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _params(args, extra: dict | None = None) -> PipelineParams:
    over = dict(extra or {})
    if getattr(args, "config", None):
        over.update(read_config(args.config))
    over.update(_parse_set(getattr(args, "set", None)))
    return apply_overrides(PipelineParams(), over)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a parameter (repeatable)")
    p.add_argument("--config", help="parameter file (JSON or key=value lines)")


def cmd_build_model(args) -> int:
    cloud = load_ply(args.model)
    if args.scale != 1.0:
        cloud.points = cloud.points * args.scale
    params = _params(args)
    d_obj = None if args.diameter_auto or args.diameter is None else args.diameter
    cloud, d_obj = prepare_model(cloud, params.sampling, d_obj)
    sub = subsample(cloud, params.sampling * d_obj)
    table = build_model_table(sub, d_obj, spreading=not args.no_spread)
    save_table(table, args.output)
    print(json.dumps({"output": str(args.output), "d_obj": d_obj, "model_points": len(sub), "entries": table.n_exact_entries}))
    return EXIT_OK


def cmd_detect(args) -> int:
    table = load_table(args.model)
    K, extra = load_intrinsics(args.intrinsics)
    scale = args.depth_scale if args.depth_scale is not None else float(extra.get("depth_scale", 0.001))
    depth = load_depth_png(args.depth, scale)
    params = _params(args)
    refine = render = None
    if args.model_ply:
        render, _ = prepare_model(load_ply(args.model_ply), params.sampling, table.d_obj)
        refine = subsample(render, 0.5 * params.sampling * table.d_obj)
    res = Detector(table, params, refine, render).detect(depth, K, multi=args.multi or params.multi)
    out = {
        "detections": [
            {"pose": pose_to_json(d.pose), "scores": d.scores.as_dict(), "weight": d.weight, "ball": d.ball}
            for d in res.detections
        ],
        "timings": res.timings,
    }
    text = json.dumps(out, indent=2, default=float)
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return EXIT_OK if res.detections else EXIT_NO_DETECTION


def _write_report(rep, args) -> None:
    text = json.dumps(rep.to_dict(), indent=2, default=float)
    if getattr(args, "output", None):
        Path(args.output).write_text(text)
    if getattr(args, "csv", None):
        rep.write_csv(args.csv)


def _summary(rep: EvalReport) -> str:
    return f"matching score {rep.matching_score:.3f} ({sum(rep.successes)}/{rep.n_frames}), mean time {rep.mean_runtime:.3f} s/frame"


def cmd_eval(args) -> int:
    if (args.dataset is None) == (args.synth is None):
        raise ValueError("give either a dataset directory or --synth cfg.json")
    if args.synth:
        suite = SuiteConfig.load(args.synth)
        if args.frames:
            suite.n_frames = args.frames
        rep = evaluate_synth(suite, _params(args, suite.params))
    else:
        root = Path(args.dataset)
        roots = [root] if (root / "intrinsics.json").exists() else sorted(p.parent for p in root.glob("*/intrinsics.json"))
        if not roots:
            raise FileNotFoundError(f"{root} is not a dataset directory")
        params = _params(args)
        reps = [evaluate_dataset(r, params, max_frames=args.frames) for r in roots]
        rep = EvalReport([f for r in reps for f in r.frames], {"datasets": [r.config for r in reps]})
    _write_report(rep, args)
    print(_summary(rep))
    for f in rep.frames:
        log.info("%s/%s success=%s error=%s time=%.3f", f.object_id, f.frame_id, f.success, f.error, f.runtime)
    return EXIT_OK


def cmd_synth(args) -> int:
    suite = SuiteConfig.load(args.config_file)
    if args.frames:
        suite.n_frames = args.frames
    out = Path(args.output)
    models = {}
    for i in range(suite.n_frames):
        cfg = suite.scene_config(i)
        if cfg.model not in models:
            models[cfg.model] = make_model(cfg.model, cfg.render_spacing)
            odir = out / cfg.model
            odir.mkdir(parents=True, exist_ok=True)
            save_ply(models[cfg.model], odir / "model.ply", binary=True)
            save_intrinsics(cfg.intrinsics, odir / "intrinsics.json", depth_scale=args.depth_scale, object_id=cfg.model)
        sc = synth_scene(cfg, models[cfg.model])
        write_frame(out / cfg.model, f"{i:04d}", sc.depth, sc.gt, cfg.model, args.depth_scale)
    print(json.dumps({"output": str(out), "frames": suite.n_frames, "objects": sorted(models)}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    suite = SuiteConfig.load(args.synth)
    if args.frames:
        suite.n_frames = args.frames
    rep = ablate(suite, _params(args, suite.params))
    text = json.dumps(rep.to_dict(), indent=2, default=float)
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppf", description="Point pair feature 6DoF object detection")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-model", help="build a PPF1 model table from a PLY model")
    p.add_argument("model")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--diameter-auto", action="store_true", help="use the model's own diameter (default)")
    g.add_argument("--diameter", type=float, help="object diameter in m")
    p.add_argument("--scale", type=float, default=1.0, help="multiply model coordinates (e.g. 0.001 for mm)")
    p.add_argument("--no-spread", action="store_true", help="build without neighbor spreading")
    p.add_argument("-o", "--output", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_build_model)

    p = sub.add_parser("detect", help="detect the model in one depth frame")
    p.add_argument("--model", required=True, help="PPF1 model table")
    p.add_argument("--depth", required=True, help="16-bit depth PNG")
    p.add_argument("--intrinsics", required=True, help="intrinsics JSON")
    p.add_argument("--depth-scale", type=float, help="meters per depth unit (default: from intrinsics or 0.001)")
    p.add_argument("--model-ply", help="full model PLY (table frame) for refinement and rendering")
    p.add_argument("--multi", action="store_true", help="report every distinct instance")
    p.add_argument("-o", "--output", help="write detections JSON here too")
    _add_common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="evaluate on a dataset directory or a synthetic suite")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--synth", help="synthetic suite config JSON")
    p.add_argument("--frames", type=int, help="limit the frame count")
    p.add_argument("-o", "--output", help="JSON report path")
    p.add_argument("--csv", help="per-frame CSV path")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a synthetic suite to the dataset layout")
    p.add_argument("config_file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--depth-scale", type=float, default=0.0001, help="meters per PNG depth unit")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="matching score per contribution on a synthetic suite")
    p.add_argument("--synth", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("-o", "--output")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # every failure maps to exit code 1
        if args.verbose:
            log.exception("error")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
