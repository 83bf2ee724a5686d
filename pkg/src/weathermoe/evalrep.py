"""Average precision, per-weather evaluation, routing confusion and report files."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .weathersim import N_WEATHER, WEATHER_NAMES, WeatherClass
from .wse import DetectionSet

RECALL_POINTS = np.arange(1, 41) / 40.0
METRICS = (("AP_BEV", 0.3), ("AP_BEV", 0.5), ("AP_3D", 0.3), ("AP_3D", 0.5))
COLUMNS = ("Total",) + WEATHER_NAMES
EVAL_SCHEMA = "# schema: weathermoe-eval v1"
CONFUSION_SCHEMA = "# schema: weathermoe-confusion v1"
_IOU = {"AP_BEV": geo.bev_iou, "AP_3D": geo.iou_3d}


def _as_dets(d) -> DetectionSet:
    return d if isinstance(d, DetectionSet) else DetectionSet(*d)


def _as_boxes(g) -> np.ndarray:
    if isinstance(g, np.ndarray):
        return g.reshape(-1, 7).astype(np.float64)
    return geo.boxes_to_array(list(g)) if len(g) else np.zeros((0, 7))


def match_detections(dets, gts, iou_fn, threshold: float):
    """Greedy matching over all frames by descending score.

    Each detection takes the unmatched GT of its frame with the highest IoU,
    provided that IoU is at least ``threshold``. Returns (scores, tp flags, n_gt)
    with scores sorted descending.
    """
    items = []
    for f, d in enumerate(dets):
        d = _as_dets(d)
        for i in range(len(d)):
            items.append((-float(d.scores[i]), f, i))
    items.sort()
    gts = [_as_boxes(g) for g in gts]
    dets = [_as_dets(d) for d in dets]
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(items), dtype=bool)
    for n, (_, f, i) in enumerate(items):
        best, best_j = threshold, -1
        for j, g in enumerate(gts[f]):
            if taken[f][j]:
                continue
            iou = iou_fn(dets[f].boxes[i], g)
            if iou >= best and (best_j < 0 or iou > best):
                best, best_j = iou, j
        if best_j >= 0:
            taken[f][best_j] = True
            tp[n] = True
    scores = np.array([-s for s, _, _ in items])
    return scores, tp, sum(len(g) for g in gts)


def precision_recall(tp: np.ndarray, n_gt: int):
    ctp = np.cumsum(tp)
    k = np.arange(1, len(tp) + 1)
    return ctp / k, ctp / n_gt


def average_precision(dets, gts, iou_fn=geo.iou_3d, threshold: float = 0.3) -> float | None:
    """40-point interpolated AP; ``None`` when there is no GT at all."""
    _, tp, n_gt = match_detections(dets, gts, iou_fn, threshold)
    if n_gt == 0:
        return None
    if len(tp) == 0:
        return 0.0
    prec, rec = precision_recall(tp, n_gt)
    # interpolated precision: max precision at any recall >= r
    env = np.maximum.accumulate(prec[::-1])[::-1]
    total = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(rec, r - 1e-12, side="left")
        total += env[idx] if idx < len(rec) else 0.0
    return float(total / len(RECALL_POINTS))


# ------------------------------------------------------------------ results


class ConfusionMatrix:
    """Rows are true weather, columns the routed (top-1) class."""

    def __init__(self, n: int = N_WEATHER):
        self.counts = np.zeros((n, n), dtype=np.int64)

    def add(self, true, pred) -> None:
        self.counts[int(true), int(pred)] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def per_class_accuracy(self) -> list:
        rows = self.counts.sum(axis=1)
        return [float(self.counts[i, i] / rows[i]) if rows[i] else None for i in range(len(rows))]


@dataclass
class EvalResult:
    ap: dict = field(default_factory=dict)  # (metric, iou) -> {column: float | None}
    confusion: ConfusionMatrix = field(default_factory=ConfusionMatrix)
    gt_counts: dict = field(default_factory=dict)
    frame_counts: dict = field(default_factory=dict)

    def value(self, metric: str, iou: float, column: str = "Total"):
        return self.ap[(metric, iou)][column]

    def adverse_mean(self, metric: str = "AP_3D", iou: float = 0.3) -> float:
        vals = [self.ap[(metric, iou)][c] for c in WEATHER_NAMES[1:]]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else float("nan")


def evaluate_detections(dets, frames, decisions=None) -> EvalResult:
    """AP for every metric, per weather bucket and pooled; optional routing decisions fill the confusion matrix."""
    res = EvalResult()
    gts = [f.gt_boxes for f in frames]
    buckets = {name: [i for i, f in enumerate(frames) if f.weather.label == name] for name in WEATHER_NAMES}
    res.frame_counts = {name: len(ix) for name, ix in buckets.items()}
    res.gt_counts = {name: sum(len(gts[i]) for i in ix) for name, ix in buckets.items()}
    res.gt_counts["Total"] = sum(len(g) for g in gts)
    res.frame_counts["Total"] = len(frames)
    for metric, thr in METRICS:
        row = {"Total": average_precision(dets, gts, _IOU[metric], thr) if frames else None}
        for name, ix in buckets.items():
            row[name] = average_precision([dets[i] for i in ix], [gts[i] for i in ix], _IOU[metric], thr) \
                if ix else None
        res.ap[(metric, thr)] = row
    if decisions is not None:
        for f, dec in zip(frames, decisions):
            res.confusion.add(int(f.weather), dec.top)
    return res


def per_weather_eval(model, frames) -> EvalResult:
    """Run ``model.infer`` on every frame and score by true weather tag."""
    if len(frames) == 0:
        raise ValueError("test split is empty")
    outs = [model.infer(f) for f in frames]
    return evaluate_detections([o[0] for o in outs], frames, [o[1] for o in outs])


# ------------------------------------------------------------------ reports


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def results_csv(results: dict) -> str:
    """One row per (run, metric, iou); columns follow the per-weather table layout."""
    buf = io.StringIO()
    buf.write(EVAL_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("run", "metric", "iou") + COLUMNS)
    for run in sorted(results):
        res = results[run]
        for metric, thr in METRICS:
            if (metric, thr) not in res.ap:
                continue
            row = res.ap[(metric, thr)]
            w.writerow((run, metric, repr(thr)) + tuple(_fmt(row.get(c)) for c in COLUMNS))
    return buf.getvalue()


def parse_results_csv(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0] != EVAL_SCHEMA:
        raise ValueError("unsupported eval CSV schema")
    reader = csv.reader(lines[1:])
    header = next(reader)
    out: dict = {}
    for row in reader:
        run, metric, thr = row[0], row[1], float(row[2])
        vals = {c: (float(v) if v != "" else None) for c, v in zip(header[3:], row[3:])}
        out.setdefault(run, {})[(metric, thr)] = vals
    return out


def confusion_csv(results: dict) -> str:
    buf = io.StringIO()
    buf.write(CONFUSION_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("run", "true") + WEATHER_NAMES + ("accuracy",))
    for run in sorted(results):
        cm = results[run].confusion
        if cm.total == 0:
            continue
        acc = cm.per_class_accuracy()
        for i, name in enumerate(WEATHER_NAMES):
            w.writerow((run, name) + tuple(str(int(c)) for c in cm.counts[i]) + (_fmt(acc[i]),))
        w.writerow((run, "Total") + tuple(str(int(c)) for c in cm.counts.sum(axis=0)) + (_fmt(cm.accuracy),))
    return buf.getvalue()


_PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def bar_chart_svg(results: dict, metric: str, iou: float) -> str:
    """Grouped bars: one group per column, one bar per run. Plain text, fixed formatting."""
    runs = [r for r in sorted(results) if (metric, iou) in results[r].ap]
    width, height, left, bottom, top = 760, 300, 50, 60, 30
    plot_h = height - bottom - top
    group_w = (width - left - 10) / len(COLUMNS)
    bar_w = (group_w - 8) / max(1, len(runs))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" '
           f'font-size="13">{metric} @ IoU {iou:g}</text>',
           f'<line x1="{left}" y1="{top + plot_h}" x2="{width - 10}" y2="{top + plot_h}" stroke="#000"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="#000"/>']
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = top + plot_h * (1 - t)
        out.append(f'<text x="{left - 4}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{t:.2f}</text>')
    for g, col in enumerate(COLUMNS):
        x0 = left + g * group_w + 4
        for r, run in enumerate(runs):
            v = results[run].ap[(metric, iou)].get(col)
            if v is None:
                continue
            h = plot_h * float(v)
            out.append(f'<rect x="{x0 + r * bar_w:.2f}" y="{top + plot_h - h:.2f}" width="{bar_w:.2f}" '
                       f'height="{h:.2f}" fill="{_PALETTE[r % len(_PALETTE)]}"/>')
        out.append(f'<text x="{x0 + (group_w - 8) / 2:.1f}" y="{top + plot_h + 14}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{col}</text>')
    for r, run in enumerate(runs):
        y = height - 18
        x = left + r * 140
        out.append(f'<rect x="{x}" y="{y - 9}" width="10" height="10" fill="{_PALETTE[r % len(_PALETTE)]}"/>')
        out.append(f'<text x="{x + 14}" y="{y}" font-family="sans-serif" font-size="11">{run}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report file {path}: {exc.strerror or exc}") from exc


def emit_report(results: dict, out_dir) -> list:
    """Write results.csv, confusion.csv and one SVG per metric. Returns the written paths."""
    out = Path(out_dir)
    paths = [out / "results.csv", out / "confusion.csv"]
    _write(paths[0], results_csv(results))
    _write(paths[1], confusion_csv(results))
    if results:
        for metric, thr in METRICS:
            p = out / f"{metric.lower()}_{int(round(thr * 100)):02d}.svg"
            _write(p, bar_chart_svg(results, metric, thr))
            paths.append(p)
    return paths


def weather_index(name: str) -> int:
    return int(WeatherClass.parse(name))
