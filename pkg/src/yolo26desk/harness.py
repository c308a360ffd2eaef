"""Synthetic scenes, toy training, AP evaluation and the decode benchmark.

Scenes are flat noisy backgrounds with axis-aligned rectangles. Each class has
its own fill: class 0 is a solid fill, class 1 horizontal stripes, class 2 a
checkerboard (further classes cycle through the three patterns with their own
colour). That keeps the task learnable by a nano model in a few hundred steps.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .archspec import apply_scale, load_reference, parse_spec, with_preset
from .assign import AssignConfig, GroundTruth, anchors_for_input, assign_image
from .blocks import Model, save_checkpoint
from .boxes import IOU_COUNTER, pairwise_iou
from .decode import DecodeConfig, decode_boxes, decode_outputs, nms_oracle, topk_select
from .loss import LossConfig, ProgLossState, total_loss
from .optim import MuSGD, MuSGDConfig

__all__ = [
    "APResult",
    "METRIC_COLUMNS",
    "RunConfig",
    "SyntheticScene",
    "TrainResult",
    "TrainingDiverged",
    "bench_decode",
    "dense_predictions",
    "eval_ap",
    "evaluate",
    "fit_slope",
    "gen_scene",
    "infer",
    "train_toy",
]

METRIC_COLUMNS = ("step", "total", "box_o2m", "cls_o2m", "box_o2o", "cls_o2o", "w_o2m", "w_o2o",
                  "stal_added_anchors")

_PALETTE = np.array([[0.9, 0.2, 0.2], [0.2, 0.85, 0.3], [0.25, 0.35, 0.95],
                     [0.9, 0.8, 0.2], [0.8, 0.3, 0.85], [0.2, 0.85, 0.85]])


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, H, W) in [0, 1]
    boxes: np.ndarray  # (G, 4) integer pixel edges, as floats
    classes: np.ndarray  # (G,)
    seed: int

    @property
    def gts(self) -> list[GroundTruth]:
        return [GroundTruth(tuple(map(float, b)), int(c)) for b, c in zip(self.boxes, self.classes)]


def _fill(patch_h: int, patch_w: int, cls: int) -> np.ndarray:
    colour = _PALETTE[cls % len(_PALETTE)][:, None, None]
    yy, xx = np.mgrid[0:patch_h, 0:patch_w]
    kind = cls % 3
    if kind == 0:
        mask = np.ones((patch_h, patch_w))
    elif kind == 1:
        mask = ((yy // 2) % 2 == 0).astype(float)
    else:
        mask = (((yy // 3) + (xx // 3)) % 2 == 0).astype(float)
    return colour * (0.35 + 0.65 * mask)


def gen_scene(seed: int, size: int = 160, count=(1, 4), size_range=(16, 56), n_classes: int = 3,
              small_objects: bool = False) -> SyntheticScene:
    """Render one deterministic scene.

    Object sides are drawn from ``size_range`` (pixels, inclusive) and placed
    without overlapping each other. With ``small_objects`` one extra object
    with a longer side below ``8 * size / 640`` pixels is added, so the
    small-target padding in the assigner always has work to do.
    """
    lo, hi = size_range
    if not (1 <= lo <= hi <= size) or not (1 <= count[0] <= count[1]):
        raise ValueError("invalid count or size range")
    rng = np.random.default_rng(seed)
    img = 0.3 + 0.08 * rng.standard_normal((3, size, size))
    boxes, classes = [], []
    want = int(rng.integers(count[0], count[1] + 1))
    occupied = np.zeros((size, size), dtype=bool)

    def place(w, h, tries=50):
        for _ in range(tries):
            x1 = int(rng.integers(0, size - w + 1))
            y1 = int(rng.integers(0, size - h + 1))
            # one pixel of margin so neighbours never touch
            if not occupied[max(0, y1 - 1):y1 + h + 1, max(0, x1 - 1):x1 + w + 1].any():
                return x1, y1
        return None

    for _ in range(want):
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        spot = place(w, h)
        if spot is None:
            continue
        c = int(rng.integers(0, n_classes))
        x1, y1 = spot
        img[:, y1:y1 + h, x1:x1 + w] = _fill(h, w, c)
        occupied[y1:y1 + h, x1:x1 + w] = True
        boxes.append((x1, y1, x1 + w, y1 + h))
        classes.append(c)
    if small_objects or not boxes:
        side_limit = 8 * size / 640
        side = max(1, int(np.ceil(side_limit)) - 1) if small_objects else lo
        spot = place(side, side, tries=500)
        if spot is None:
            raise RuntimeError(f"scene {seed}: no room for an extra object")
        c = int(rng.integers(0, n_classes))
        x1, y1 = spot
        img[:, y1:y1 + side, x1:x1 + side] = _PALETTE[c % len(_PALETTE)][:, None, None]
        occupied[y1:y1 + side, x1:x1 + side] = True
        boxes.append((x1, y1, x1 + side, y1 + side))
        classes.append(c)
    np.clip(img, 0.0, 1.0, out=img)
    return SyntheticScene(img, np.array(boxes, dtype=np.float64), np.array(classes, dtype=np.int64), seed)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    spec: str | None = None  # path; None = bundled reference
    preset: str = "n"
    input_size: int = 160
    steps: int = 300
    batch_size: int = 8
    seed: int = 0
    train_scenes: int = 200
    eval_scenes: int = 50
    small_objects: bool = True
    eval_small_objects: bool = False
    optim: MuSGDConfig = field(default_factory=lambda: MuSGDConfig(lr=0.02, momentum=0.9, warmup_steps=20))
    assign: AssignConfig = field(default_factory=AssignConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    # BCE is averaged over every anchor-class slot, so the toy run needs a much
    # larger class gain than the module default to give classification a voice
    loss: LossConfig = field(default_factory=lambda: LossConfig(cls_gain=40.0))
    w_start: tuple[float, float] = (1.0, 0.2)
    w_end: tuple[float, float] = (0.2, 1.0)
    out_dir: str | None = None

    def __post_init__(self):
        if self.input_size % 32:
            raise ValueError("input_size must be divisible by 32")
        if self.steps < 0 or self.batch_size < 1 or self.train_scenes < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and train_scenes >= 1 required")

    @classmethod
    def from_mapping(cls, data: dict) -> RunConfig:
        """Build from a plain dict (e.g. parsed JSON); nested configs are dicts too."""
        nested = {"optim": MuSGDConfig, "assign": AssignConfig, "decode": DecodeConfig, "loss": LossConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        kw = {}
        for k, v in data.items():
            if k in nested and isinstance(v, dict):
                v = nested[k](**v)
            elif k in ("w_start", "w_end"):
                v = tuple(v)
            kw[k] = v
        return cls(**kw)

    def to_mapping(self) -> dict:
        return asdict(self)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class TrainResult:
    history: list[dict]
    model: Model
    anchors: object
    config: RunConfig
    seconds: float
    o2m_matches: int
    o2o_matches: int
    stal_added: int
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None

    @property
    def initial_loss(self) -> float:
        return self.history[0]["total"]

    def final_loss(self, window: int = 10) -> float:
        """Mean total loss over the last ``window`` steps (single batches are noisy)."""
        tail = self.history[-window:]
        return sum(r["total"] for r in tail) / len(tail)


def build_model(config: RunConfig, dtype=np.float32) -> Model:
    spec = parse_spec(Path(config.spec).read_text()) if config.spec else load_reference()
    spec = apply_scale(with_preset(spec, config.preset))
    return Model(spec, seed=config.seed, dtype=dtype, img_size=config.input_size)


def make_scenes(config: RunConfig, split: str) -> list[SyntheticScene]:
    n_classes = build_spec_classes(config)
    if split == "train":
        base, n, small = 1_000_003 * (config.seed + 1), config.train_scenes, config.small_objects
    else:
        base, n, small = 7_000_017 * (config.seed + 1) + 13, config.eval_scenes, config.eval_small_objects
    return [gen_scene(base + i, config.input_size, n_classes=n_classes, small_objects=small) for i in range(n)]


def build_spec_classes(config: RunConfig) -> int:
    spec = parse_spec(Path(config.spec).read_text()) if config.spec else load_reference()
    return spec.class_count


def _write_metrics(history, path: Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in history:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:-1]] + [r["stal_added_anchors"]])


def train_toy(config: RunConfig, scenes: list[SyntheticScene] | None = None, log=None) -> TrainResult:
    """Train the scaled model on synthetic scenes with MuSGD and the dual-branch loss.

    Each step: forward both branches, assign (one-to-many with small-target
    padding, one-to-one), weight the branches by the progressive schedule,
    back-propagate and update. Raises :class:`TrainingDiverged` on a
    non-finite loss. Writes ``metrics.csv`` and ``model.ckpt`` to
    ``config.out_dir`` when it is set.
    """
    t0 = time.perf_counter()
    model = build_model(config)
    scenes = scenes if scenes is not None else make_scenes(config, "train")
    size = config.input_size
    anchors = anchors_for_input(size, size)
    opt = MuSGD(model.store, config.optim)
    params = model.parameters()
    names = model.store.names()
    rng = np.random.default_rng(config.seed)
    order = np.array([], dtype=np.int64)
    history, o2m_total, o2o_total, stal_total = [], 0, 0, 0
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(scenes))])
        pick, order = order[:config.batch_size], order[config.batch_size:]
        batch = [scenes[i] for i in pick]
        x = T.Tensor(np.stack([s.image for s in batch]).astype(model.dtype))
        out = model(x)
        gts, assignments, stal = [], [], 0
        for i, s in enumerate(batch):
            bm, sm = decode_boxes([m.data[i] for m in out.one2many], anchors)
            bo, so = decode_boxes([m.data[i] for m in out.one2one], anchors)
            a_m, a_o = assign_image(sm, bm, so, bo, s.boxes, s.classes, anchors, config.assign, size)
            gts.append((s.boxes, s.classes))
            assignments.append((a_m, a_o))
            stal += a_m.stal_added
            o2m_total += len(a_m.positives)
            o2o_total += len(a_o.positives)
        stal_total += stal
        state = ProgLossState(step, config.steps, config.w_start, config.w_end)
        lb = total_loss(out, gts, assignments, state, anchors, config.loss)
        if not np.isfinite(lb.weighted_total):
            raise TrainingDiverged(step)
        T.backward(lb.total, params)
        grads = {n: p.grad for n, p in zip(names, params)}
        try:
            opt.step(grads)
        except FloatingPointError as e:
            raise TrainingDiverged(step, "gradient") from e
        row = {"step": step, "total": lb.weighted_total, "box_o2m": lb.box_o2m, "cls_o2m": lb.cls_o2m,
               "box_o2o": lb.box_o2o, "cls_o2o": lb.cls_o2o, "w_o2m": lb.w_o2m, "w_o2o": lb.w_o2o,
               "stal_added_anchors": stal}
        history.append(row)
        if log is not None:
            log(row)
    res = TrainResult(history, model, anchors, config, time.perf_counter() - t0, o2m_total, o2o_total, stal_total)
    if config.out_dir:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        res.metrics_path = out_dir / "metrics.csv"
        res.checkpoint_path = out_dir / "model.ckpt"
        _write_metrics(history, res.metrics_path)
        save_checkpoint(model.store, res.checkpoint_path)
    return res


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def infer(model: Model, images: np.ndarray, anchors, config: DecodeConfig | None = None):
    """Inference-mode forward plus Top-K decode; returns per-image detection lists."""
    with T.no_grad():
        out = model(T.Tensor(np.asarray(images, dtype=model.dtype)), inference=True)
    return [decode_outputs(out, anchors, config, image=i) for i in range(len(images))]


@dataclass
class APResult:
    ap: float  # mean over classes that have ground truths
    per_class: dict[int, float]
    no_gts: bool = False


def _class_ap(dets, gts_per_scene, cls: int, iou_threshold: float) -> tuple[float, int]:
    cand = [(d.score, si, d.anchor, d.box) for si, ds in enumerate(dets) for d in ds if d.class_id == cls]
    cand.sort(key=lambda t: (-t[0], t[1], t[2]))
    gt_boxes = [b[c == cls] for b, c in gts_per_scene]
    n_gt = sum(len(b) for b in gt_boxes)
    if n_gt == 0:
        return 0.0, 0
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    tp = np.zeros(len(cand))
    for j, (_, si, _, box) in enumerate(cand):
        g = gt_boxes[si]
        if len(g) == 0:
            continue
        ious = pairwise_iou(np.asarray(box)[None], g)[0]
        ious[used[si]] = -1.0
        k = int(np.argmax(ious))
        if ious[k] >= iou_threshold:
            used[si][k] = True
            tp[j] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(cand) + 1)
    recall = ctp / n_gt
    dr = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(dr * precision)), n_gt


def eval_ap(dets_per_scene, gts_per_scene, iou_threshold: float = 0.5) -> APResult:
    """AP at a single IoU threshold, averaged over classes with ground truths.

    ``gts_per_scene`` holds ``(boxes (G, 4), classes (G,))`` pairs. Detections
    are matched greedily by descending score to the best-IoU unmatched object
    of the same class; the precision-recall curve is integrated with the
    rectangle rule (no interpolation). Without any ground truths the result is
    0 with ``no_gts`` set.
    """
    gts_per_scene = [(np.asarray(b, dtype=np.float64).reshape(-1, 4), np.asarray(c).reshape(-1))
                     for b, c in gts_per_scene]
    classes = sorted({int(c) for _, cs in gts_per_scene for c in cs})
    if not classes:
        return APResult(0.0, {}, no_gts=True)
    per = {c: _class_ap(dets_per_scene, gts_per_scene, c, iou_threshold)[0] for c in classes}
    return APResult(float(np.mean(list(per.values()))), per)


def evaluate(result: TrainResult, scenes: list[SyntheticScene] | None = None, batch: int = 10):
    """AP@0.5 of a trained model on held-out scenes; also returns IoU evaluations made during inference."""
    scenes = scenes if scenes is not None else make_scenes(result.config, "eval")
    dets, iou_calls = [], 0
    for i in range(0, len(scenes), batch):
        chunk = scenes[i:i + batch]
        before = IOU_COUNTER.count
        dets += infer(result.model, np.stack([s.image for s in chunk]), result.anchors, result.config.decode)
        iou_calls += IOU_COUNTER.count - before
    ap = eval_ap(dets, [(s.boxes, s.classes) for s in scenes])
    return ap, dets, iou_calls


# ---------------------------------------------------------------------------
# Decode benchmark
# ---------------------------------------------------------------------------


def dense_predictions(n: int, n_classes: int = 12, seed: int = 0, cluster: int = 50):
    """``n`` heavily overlapping predicted boxes in clusters of about ``cluster`` boxes."""
    rng = np.random.default_rng(seed)
    k = max(1, n // cluster)
    centres = rng.uniform(50, 590, (k, 2))
    c = centres[rng.integers(0, k, n)] + rng.normal(0, 3, (n, 2))
    wh = rng.uniform(30, 60, (n, 2))
    boxes = np.concatenate([c - wh / 2, c + wh / 2], axis=1)
    scores = rng.uniform(0, 0.02, (n, n_classes))
    scores[np.arange(n), rng.integers(0, n_classes, n)] = rng.uniform(0.05, 1.0, n)
    return boxes, scores


def _median_mad(xs):
    med = statistics.median(xs)
    return med, statistics.median(abs(x - med) for x in xs)


def bench_decode(sizes=(1_000, 10_000, 100_000), repetitions: int = 10, n_classes: int = 12, seed: int = 0,
                 iou_threshold: float = 0.5, config: DecodeConfig | None = None) -> list[dict]:
    """Time ``topk_select`` and ``nms_oracle`` on dense clustered predictions.

    Returns one row per size with median milliseconds, the repetition count,
    and ``variance``: the larger of the two relative spreads MAD / median.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    config = config or DecodeConfig()
    rows = []
    for n in sizes:
        boxes, scores = dense_predictions(int(n), n_classes, seed)
        tk, nm = [], []
        for _ in range(repetitions):
            t = time.perf_counter()
            topk_select(boxes, scores, config)
            tk.append((time.perf_counter() - t) * 1e3)
            t = time.perf_counter()
            nms_oracle(boxes, scores, iou_threshold, config.score_threshold)
            nm.append((time.perf_counter() - t) * 1e3)
        (mt, dt), (mn, dn) = _median_mad(tk), _median_mad(nm)
        rows.append({"n": int(n), "topk_ms": mt, "nms_ms": mn, "repetitions": repetitions,
                     "variance": max(dt / mt, dn / mn)})
    return rows


def fit_slope(ns, ts) -> float:
    """Least-squares slope of log(t) against log(n)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(ts, float)), 1)[0])


def bench_csv(rows, path=None) -> str:
    lines = ["n,topk_ms,nms_ms,repetitions,variance"]
    lines += [f"{r['n']},{r['topk_ms']:.4f},{r['nms_ms']:.4f},{r['repetitions']},{r['variance']:.4f}" for r in rows]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def save_run_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_mapping(), indent=1, sort_keys=True))
