"""Command-line entry point: ``yolo26desk <command> [flags]``.

Exit codes: 0 success, 1 validation or run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .archspec import (PRESETS, ArchSpecError, apply_scale, load_reference, parse_spec, validate,
                       with_preset)
from .assign import AssignConfig, anchors_for_input, assign_one2many, assign_one2one, apply_stal, tal_metric
from .blocks import Model
from .decode import DecodeConfig, decode_boxes, detections_csv
from .harness import (RunConfig, bench_csv, bench_decode, evaluate, fit_slope, gen_scene,
                      save_run_config, train_toy)
from .optim import MomentumState, MuSGDConfig, musgd_step, newton_schulz_orthogonalize, route_params
from .shapetrace import ShapeError, emit_diagram, trace, trace_report

__all__ = ["main", "run"]

_PRESET_ALIASES = {"nano": "n", "small": "s", "medium": "m"}


def _preset(value: str) -> str:
    v = _PRESET_ALIASES.get(value, value)
    if v not in PRESETS:
        raise argparse.ArgumentTypeError(f"unknown preset {value!r} (choose from n, s, m)")
    return v


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="yolo26desk", description="Desk-scale detection stack tools.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_, *flags):
        sp = sub.add_parser(name, help=help_)
        for f in flags:
            if f == "spec":
                sp.add_argument("--spec", help="architecture file (default: bundled reference)")
            elif f == "preset":
                sp.add_argument("--preset", type=_preset, default=None, help="scale preset n, s or m")
            elif f == "size":
                sp.add_argument("--size", type=int, default=None, help="square input size in pixels")
            elif f == "steps":
                sp.add_argument("--steps", type=int, default=None)
            elif f == "seed":
                sp.add_argument("--seed", type=int, default=None)
            elif f == "out":
                sp.add_argument("--out", default=None, help="output file or directory")
            elif f == "topk":
                sp.add_argument("--topk", type=int, default=None)
            elif f == "score":
                sp.add_argument("--score-thresh", type=float, default=None)
            elif f == "config":
                sp.add_argument("--config", default=None, help="JSON run file; flags take precedence")
        return sp

    add("trace", "shape report as JSON", "spec", "preset", "size", "out")
    d = add("diagram", "Mermaid or DOT graph of the traced network", "spec", "preset", "size", "out")
    d.add_argument("--format", choices=("mermaid", "dot"), default="mermaid")
    add("validate", "check an architecture file", "spec")
    add("train-toy", "train on synthetic scenes and evaluate AP@0.5",
        "spec", "preset", "size", "steps", "seed", "out", "topk", "score", "config")
    add("assign-debug", "per-object assignment table as CSV", "spec", "preset", "size", "seed", "out")
    b = add("decode-bench", "Top-K vs NMS timing sweep as CSV", "seed", "out", "topk", "score")
    b.add_argument("--reps", type=int, default=10, help="repetitions per size (>= 10 for a valid run)")
    o = add("optim-check", "orthogonalization residuals and quadratic-bowl convergence as CSV",
            "seed", "steps", "out")
    o.add_argument("--format", choices=("csv",), default="csv")
    return p


def _load_spec(path: str | None):
    return parse_spec(Path(path).read_text(encoding="utf-8")) if path else load_reference()


def _scaled(args):
    spec = _load_spec(args.spec)
    if args.preset:
        spec = with_preset(spec, args.preset)
    return apply_scale(spec)


def _emit(text: str, out: str | None):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_trace(args) -> int:
    size = args.size or 640
    graph = trace(_scaled(args), (1, 3, size, size))
    _emit(trace_report(graph), args.out)
    return 0


def cmd_diagram(args) -> int:
    size = args.size or 640
    graph = trace(_scaled(args), (1, 3, size, size), strict_strides=False)
    _emit(emit_diagram(graph, args.format), args.out)
    return 0


def cmd_validate(args) -> int:
    try:
        spec = parse_spec(Path(args.spec).read_text(encoding="utf-8"), check=False) if args.spec else load_reference()
    except ArchSpecError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    diags = validate(spec)
    for d in diags:
        print(f"block {d.index}: {d.message}")
    if not diags:
        print("ok")
    return 1 if diags else 0


def _run_config(args) -> RunConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = RunConfig.from_mapping(data)
    for flag, attr in (("spec", "spec"), ("preset", "preset"), ("size", "input_size"), ("steps", "steps"),
                       ("seed", "seed"), ("out", "out_dir")):
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg, attr, v)
    if args.topk is not None or args.score_thresh is not None:
        cfg.decode = DecodeConfig(args.topk if args.topk is not None else cfg.decode.top_k,
                                  args.score_thresh if args.score_thresh is not None else cfg.decode.score_threshold)
    RunConfig.__post_init__(cfg)
    return cfg


def cmd_train_toy(args) -> int:
    cfg = _run_config(args)
    if cfg.out_dir is None:
        cfg.out_dir = "runs/toy"
    res = train_toy(cfg)
    ap, dets, iou_calls = evaluate(res)
    out = Path(cfg.out_dir)
    save_run_config(cfg, out / "run.json")
    detections_csv(dets[0], out / "detections_scene0.csv")
    summary = {
        "initial_loss": res.initial_loss,
        "final_loss": res.final_loss(),
        "ap50": ap.ap,
        "ap50_per_class": {str(k): v for k, v in ap.per_class.items()},
        "inference_iou_evaluations": iou_calls,
        "stal_added_anchors": res.stal_added,
        "o2m_matches": res.o2m_matches,
        "o2o_matches": res.o2o_matches,
        "seconds": round(res.seconds, 2),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))
    return 0


def cmd_assign_debug(args) -> int:
    size = args.size or 640
    seed = args.seed or 0
    spec = _scaled(args)
    model = Model(spec, seed=seed, dtype=np.float32, img_size=size)
    scene = gen_scene(seed, size, n_classes=spec.class_count, size_range=(max(1, size // 40), size // 4),
                      small_objects=True)
    anchors = anchors_for_input(size, size)
    with T.no_grad():
        out = model(T.Tensor(scene.image[None].astype(np.float32)))
    bm, sm = decode_boxes([m.data[0] for m in out.one2many], anchors)
    bo, so = decode_boxes([m.data[0] for m in out.one2one], anchors)
    cfg = AssignConfig()
    nat = assign_one2many(tal_metric(sm, bm, scene.boxes, scene.classes, anchors, cfg), cfg)
    post = apply_stal(nat, scene.boxes, anchors, cfg, size)
    o2o = assign_one2one(tal_metric(so, bo, scene.boxes, scene.classes, anchors, cfg))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gt_id", "class", "width", "height", "small", "natural_anchors", "post_stal_anchors",
                "o2o_anchors", "weights"])
    thr = cfg.small_threshold(size)
    nc, pc, oc = nat.counts(), post.counts(), o2o.counts()
    for g, (b, c) in enumerate(zip(scene.boxes, scene.classes)):
        wd, ht = b[2] - b[0], b[3] - b[1]
        wts = ";".join(f"{x:.4f}" for x in post.weights[post.anchors_of(g)])
        w.writerow([g, int(c), f"{wd:g}", f"{ht:g}", int(max(wd, ht) < thr), nc[g], pc[g], oc[g], wts])
    _emit(buf.getvalue(), args.out)
    return 0


def cmd_decode_bench(args) -> int:
    if args.reps < 1:
        print("error: --reps must be >= 1", file=sys.stderr)
        return 2
    cfg = DecodeConfig(args.topk or 300, args.score_thresh if args.score_thresh is not None else 0.001)
    rows = bench_decode(repetitions=args.reps, seed=args.seed or 0, config=cfg)
    text = bench_csv(rows)
    _emit(text, args.out)
    ns = [r["n"] for r in rows]
    print(f"# slope topk={fit_slope(ns, [r['topk_ms'] for r in rows]):.3f} "
          f"nms={fit_slope(ns, [r['nms_ms'] for r in rows]):.3f}", file=sys.stderr)
    return 0


def _polar(m: np.ndarray) -> np.ndarray:
    # polar factor from the symmetric eigendecomposition of M^T M
    vals, vecs = np.linalg.eigh(m.T @ m)
    return m @ vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T


def cmd_optim_check(args) -> int:
    rng = np.random.default_rng(args.seed or 0)
    steps = args.steps or 100
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "case", "rows", "cols", "cond", "rel_err_vs_polar", "orth_residual"])
    for i in range(10):
        m = rng.standard_normal((64, 48))
        o = newton_schulz_orthogonalize(m, 5)
        s = np.linalg.svd(m, compute_uv=False)
        err = np.linalg.norm(o - _polar(m)) / np.linalg.norm(_polar(m))
        res = np.linalg.norm(o.T @ o - np.eye(48)) / np.sqrt(48)
        w.writerow(["orthogonality", i, 64, 48, f"{s[0] / s[-1]:.2f}", f"{err:.5f}", f"{res:.5f}"])
    w.writerow([])
    w.writerow(["table", "step", "loss", "distance"])
    target = rng.standard_normal((16, 12))
    params = {"w": np.zeros((16, 12))}
    routes = route_params([("w", (16, 12))])
    state, cfg = MomentumState(), MuSGDConfig()
    for t in range(steps + 1):
        diff = params["w"] - target
        w.writerow(["bowl", t, f"{0.5 * float(np.sum(diff * diff)):.6e}", f"{np.linalg.norm(diff):.6e}"])
        if t < steps:
            musgd_step(params, {"w": diff}, state, cfg, routes)
    _emit(buf.getvalue(), args.out)
    return 0


_COMMANDS = {
    "trace": cmd_trace,
    "diagram": cmd_diagram,
    "validate": cmd_validate,
    "train-toy": cmd_train_toy,
    "assign-debug": cmd_assign_debug,
    "decode-bench": cmd_decode_bench,
    "optim-check": cmd_optim_check,
}


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ArchSpecError, ShapeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
