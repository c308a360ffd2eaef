"""Acceptance run: one test per criterion, each printing a single PASS/FAIL line.

The lines go straight to the terminal (bypassing capture), so
``pytest tests/test_acceptance.py -v`` shows them inline. Artifacts (the
decode benchmark CSV and both toy-run directories) are written under
``reports/acceptance`` in the repository root.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import check_op_gradient, polar_factor
from gradcases import OP_CASES, toy_model_rel_error
from oracles import log_log_slope, one2one_oracle, random_metric, separated_scene, stal_check
from yolo26desk import tensor as T
from yolo26desk.archspec import apply_scale, load_reference
from yolo26desk.assign import assign_one2one
from yolo26desk.blocks import SPPF, ParamStore, PSABlock
from yolo26desk.boxes import IOU_COUNTER
from yolo26desk.decode import DecodeConfig, decode_boxes, nms_oracle, topk_select
from yolo26desk.harness import RunConfig, bench_csv, bench_decode, evaluate, train_toy
from yolo26desk.loss import ProgLossState, progloss_weights
from yolo26desk.optim import newton_schulz_orthogonalize
from yolo26desk.shapetrace import trace, trace_report

REPORTS = Path(__file__).resolve().parent.parent / "reports" / "acceptance"
GOLDEN = Path(__file__).parent / "golden" / "yolo26-desk-640.trace.json"


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail, seconds):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({seconds:.1f} s)")
        assert ok, f"{name}: {detail}"

    return emit


def test_shape_trace(report):
    t0 = time.perf_counter()
    g = trace(apply_scale(load_reference()), (1, 3, 640, 640))
    heads = [(h.height, h.width) for h in g.heads]
    golden = trace_report(g) == GOLDEN.read_text()
    dt = time.perf_counter() - t0
    ok = heads == [(80, 80), (40, 40), (20, 20)] and g.anchor_count == 8400 and golden and dt < 1
    report("shape trace", ok, f"heads {heads}, anchors {g.anchor_count}, golden bytes match {golden}", dt)


def test_stal_property(report):
    t0 = time.perf_counter()
    checked = fails = lost = 0
    for seed in range(1000):
        n, f, l_ = stal_check(seed)
        checked, fails, lost = checked + n, fails + f, lost + l_
    dt = time.perf_counter() - t0
    ok = checked > 0 and fails == 0 and lost == 0 and dt < 10
    report("STAL floor", ok, f"{checked} small gts over 1000 scenes, {fails} under 4 anchors, {lost} lost anchors",
           dt)


def test_one2one_assignment(report):
    t0 = time.perf_counter()
    bijective = equal = 0
    for seed in range(1000):
        rng = np.random.default_rng(10_000 + seed)
        g, a = int(rng.integers(1, 11)), int(rng.integers(1, 201))
        m = random_metric(rng, g, a, density=float(rng.uniform(0.01, 0.5)), ties=seed % 3 == 0)
        res = assign_one2one(m)
        got = {int(i): int(j) for i, j in enumerate(res.gt_index) if j >= 0}
        bijective += len(set(got.values())) == len(got)
        equal += got == one2one_oracle(m)
    dt = time.perf_counter() - t0
    ok = bijective == 1000 and equal == 1000 and dt < 30
    report("one-to-one assignment", ok, f"bijective {bijective}/1000, oracle-equal {equal}/1000", dt)


def test_gradient_checks(report):
    t0 = time.perf_counter()
    worst = {}
    for name, case in OP_CASES.items():
        errs = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            build, inputs = case(rng)
            errs.append(check_op_gradient(build, inputs, rng))
        worst[name] = max(errs)
    worst["toy_model_total_loss"] = max(toy_model_rel_error(seed) for seed in range(20))
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and dt < 120
    report("gradient checks", ok, f"{len(worst)} cases x 20 seeds, worst {top} rel err {worst[top]:.2e}", dt)


def test_newton_schulz(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2026)
    errs, conds = [], []
    while len(errs) < 50:
        m = rng.standard_normal((64, 48))
        s = np.linalg.svd(m, compute_uv=False)
        if s[0] / s[-1] >= 100:
            continue
        conds.append(s[0] / s[-1])
        p = polar_factor(m)
        errs.append(np.linalg.norm(newton_schulz_orthogonalize(m, 5) - p) / np.linalg.norm(p))
    m = rng.standard_normal((64, 48))
    base = newton_schulz_orthogonalize(m, 5)
    drift = max(np.max(np.abs(newton_schulz_orthogonalize(c * m, 5) - base)) for c in (1e-3, 1.0, 1e3))
    dt = time.perf_counter() - t0
    ok = max(errs) <= 5e-2 and drift <= 1e-10 and dt < 10
    report("Newton-Schulz", ok, f"max rel err {max(errs):.4f} over 50 (cond <= {max(conds):.1f}), "
                                f"scale drift {drift:.1e}", dt)


def test_progloss(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    bad = 0
    w_start, w_end = (1.0, 0.2), (0.2, 1.0)
    for _ in range(1000):
        total = int(rng.integers(1, 100_000))
        step = int(rng.integers(0, total))
        a = progloss_weights(ProgLossState(step, total, w_start, w_end))
        b = progloss_weights(ProgLossState(step + 1, total, w_start, w_end))
        bad += not (b[0] <= a[0] and b[1] >= a[1])
        bad += abs(sum(a) - 1.2) > 1e-12 or abs(sum(b) - 1.2) > 1e-12
        bad += progloss_weights(ProgLossState(0, total)) != w_start
        bad += progloss_weights(ProgLossState(total, total)) != w_end
    dt = time.perf_counter() - t0
    report("ProgLoss", bad == 0 and dt < 1, f"1000 (step, total) pairs, {bad} violations", dt)


def test_decode_equivalence(report):
    t0 = time.perf_counter()
    same, calls = 0, 0
    for seed in range(100):
        maps, anchors, chosen = separated_scene(seed)
        IOU_COUNTER.reset()
        boxes, scores = decode_boxes(maps, anchors)
        top = topk_select(boxes, scores, DecodeConfig())
        calls += IOU_COUNTER.count
        nms = nms_oracle(boxes, scores, 0.5, 0.001)
        key = [(d.anchor, d.class_id, d.box, d.score) for d in top]
        same += key == [(d.anchor, d.class_id, d.box, d.score) for d in nms] and \
            sorted(d.anchor for d in top) == sorted(chosen)
    dt = time.perf_counter() - t0
    ok = same == 100 and calls == 0 and dt < 5
    report("decode equivalence", ok, f"{same}/100 scenes identical, IoU evaluations on Top-K path {calls}", dt)


def test_decode_scaling(report):
    t0 = time.perf_counter()
    sizes = (1_000, 10_000, 100_000)
    rows = bench_decode(sizes=sizes, repetitions=10)
    REPORTS.mkdir(parents=True, exist_ok=True)
    path = REPORTS / "decode_bench.csv"
    bench_csv(rows, path)
    s_top = log_log_slope(sizes, [r["topk_ms"] for r in rows])
    s_nms = log_log_slope(sizes, [r["nms_ms"] for r in rows])
    var = max(r["variance"] for r in rows)
    dt = time.perf_counter() - t0
    ok = s_top <= 1.2 and s_nms >= 1.6 and path.exists() and var < 0.5 and dt < 120
    report("decode scaling", ok, f"slope topk {s_top:.2f}, nms {s_nms:.2f}, max MAD/median {var:.2f}, "
                                 f"CSV {path.name}", dt)


def test_toy_end_to_end(report):
    t0 = time.perf_counter()
    runs = []
    for tag in ("run1", "run2"):
        cfg = RunConfig(preset="n", input_size=160, train_scenes=200, eval_scenes=50, steps=300, seed=0,
                        out_dir=str(REPORTS / f"toy_{tag}"))
        res = train_toy(cfg)
        runs.append(res)
    first = runs[0]
    ap, _, calls = evaluate(first)
    ratio = first.final_loss() / first.initial_loss
    identical = runs[0].metrics_path.read_bytes() == runs[1].metrics_path.read_bytes()
    longest = max(r.seconds for r in runs)
    dt = time.perf_counter() - t0
    ok = ratio < 0.5 and ap.ap >= 0.5 and longest < 300 and identical and calls == 0
    report("toy end-to-end", ok,
           f"loss {first.initial_loss:.3f} -> {first.final_loss():.3f} (ratio {ratio:.3f}), AP@0.5 {ap.ap:.3f}, "
           f"slowest run {longest:.0f} s, metrics CSVs identical {identical}, inference IoU calls {calls}", dt)


def test_shortcut_identities(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    store = ParamStore(1)
    sppf = SPPF(store, "s", 16, 16, 5)
    store._tensors["s.cv2.weight"].data[...] = 0.0
    store._tensors["s.cv2.bias"].data[...] = 0.0
    x = rng.standard_normal((2, 16, 9, 9))
    e_sppf = float(np.max(np.abs(sppf(T.Tensor(x)).data - x)))
    store = ParamStore(2)
    psa = PSABlock(store, "p", 16)
    for n in ("p.attn.proj.weight", "p.attn.proj.bias", "p.ffn.1.weight", "p.ffn.1.bias"):
        store._tensors[n].data[...] = 0.0
    e_psa = float(np.max(np.abs(psa(T.Tensor(x)).data - x)))
    dt = time.perf_counter() - t0
    ok = e_sppf <= 1e-12 and e_psa <= 1e-12
    report("shortcut identities", ok, f"SPPF max |y - x| {e_sppf:.1e}, PSABlock {e_psa:.1e}", dt)
