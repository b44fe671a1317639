"""Tracking and proposal metrics.

Conventions: IoU thresholds are strict (``iou > t``), distance thresholds are
inclusive (``d <= t``). Frames whose groundtruth is absent are left out of the
one-pass curves and only enter :func:`presence_metrics`.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from . import _accel
from .geometry import iou_aligned

log = logging.getLogger(__name__)

# the usual toolkit grids; note linspace(0.5, 0.95, 10)[8] is 0.8999999999999999
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)
AR_THRESHOLDS = np.linspace(0.5, 0.95, 10)


@dataclass
class CurveResult:
    thresholds: np.ndarray
    values: np.ndarray
    summary: float


# --------------------------------------------------------------------------
# threshold-count kernels


@_accel.njit
def _count_above_loops(values, thresholds):
    out = np.zeros(thresholds.shape[0])
    for j in range(thresholds.shape[0]):
        c = 0
        for i in range(values.shape[0]):
            if values[i] > thresholds[j]:
                c += 1
        out[j] = c
    return out


@_accel.njit
def _count_at_most_loops(values, thresholds):
    out = np.zeros(thresholds.shape[0])
    for j in range(thresholds.shape[0]):
        c = 0
        for i in range(values.shape[0]):
            if values[i] <= thresholds[j]:
                c += 1
        out[j] = c
    return out


def _count_above_numpy(values, thresholds):
    s = np.sort(values)
    return (len(s) - np.searchsorted(s, thresholds, side="right")).astype(np.float64)


def _count_at_most_numpy(values, thresholds):
    s = np.sort(values)
    return np.searchsorted(s, thresholds, side="right").astype(np.float64)


def fraction_above(values, thresholds) -> np.ndarray:
    v = np.ascontiguousarray(values, dtype=np.float64)
    t = np.ascontiguousarray(thresholds, dtype=np.float64)
    counts = _count_above_loops(v, t) if _accel.USE_NUMBA else _count_above_numpy(v, t)
    return counts / len(v)


def _mean(values) -> float:
    """Correctly rounded mean, independent of summation order."""
    return math.fsum(values) / len(values)


def fraction_at_most(values, thresholds) -> np.ndarray:
    v = np.ascontiguousarray(values, dtype=np.float64)
    t = np.ascontiguousarray(thresholds, dtype=np.float64)
    counts = _count_at_most_loops(v, t) if _accel.USE_NUMBA else _count_at_most_numpy(v, t)
    return counts / len(v)


# --------------------------------------------------------------------------
# per-sequence curves


def _present_rows(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction/groundtruth length mismatch: {len(pred)} vs {len(gt)}")
    keep = np.all(np.isfinite(gt), axis=1)
    return pred[keep], gt[keep]


def frame_ious(pred, gt) -> np.ndarray:
    p, g = _present_rows(pred, gt)
    return iou_aligned(p, g) if len(p) else np.zeros(0)


def center_errors(pred, gt, normalized: bool = False) -> np.ndarray:
    p, g = _present_rows(pred, gt)
    pc = (p[:, :2] + p[:, 2:]) / 2
    gc = (g[:, :2] + g[:, 2:]) / 2
    d = pc - gc
    if normalized:
        wh = g[:, 2:] - g[:, :2]
        ok = np.all(wh > 0, axis=1)
        if not ok.all():
            log.warning("skipping %d frame(s) with zero-size groundtruth", int((~ok).sum()))
        d = d[ok] / wh[ok]
    return np.sqrt((d ** 2).sum(axis=1))


def success_curve(pred, gt) -> CurveResult:
    """Fraction of frames with IoU above each of 21 thresholds in [0, 1];
    the summary is the mean of the curve."""
    ious = frame_ious(pred, gt)
    if len(ious) == 0:
        raise ValueError("no frames with groundtruth to evaluate")
    values = fraction_above(ious, SUCCESS_THRESHOLDS)
    return CurveResult(SUCCESS_THRESHOLDS.copy(), values, _mean(values))


def precision_curve(pred, gt, threshold: float = 20.0) -> CurveResult:
    """Fraction of frames with center error <= t pixels, t = 0..50; the
    summary is the value at ``threshold``."""
    d = center_errors(pred, gt)
    if len(d) == 0:
        raise ValueError("no frames with groundtruth to evaluate")
    values = fraction_at_most(d, PRECISION_THRESHOLDS)
    return CurveResult(PRECISION_THRESHOLDS.copy(), values, float(fraction_at_most(d, [threshold])[0]))


def normalized_precision_curve(pred, gt) -> CurveResult:
    """Center error scaled per axis by the groundtruth size; curve over 51
    thresholds in [0, 0.5], summary is the curve mean."""
    d = center_errors(pred, gt, normalized=True)
    if len(d) == 0:
        raise ValueError("no frames with usable groundtruth to evaluate")
    values = fraction_at_most(d, NORM_PRECISION_THRESHOLDS)
    return CurveResult(NORM_PRECISION_THRESHOLDS.copy(), values, _mean(values))


def overlap_precision(pred, gt, threshold: float = 0.5) -> float:
    """Fraction of frames whose IoU exceeds ``threshold``."""
    ious = frame_ious(pred, gt)
    if len(ious) == 0:
        raise ValueError("no frames with groundtruth to evaluate")
    return float(fraction_above(ious, [threshold])[0])


# --------------------------------------------------------------------------
# proposals


def average_recall_at_k(proposals: Sequence, groundtruths: Sequence, k: int, mode: str = "coco") -> float:
    """Mean over instances (and over IoU thresholds 0.5:0.05:0.95 in
    ``"coco"`` mode, or just 0.5 in ``"single"`` mode) of whether any of
    the top-``k`` proposals beats the threshold."""
    if k < 1:
        raise ValueError("k must be >= 1")
    thresholds = AR_THRESHOLDS if mode == "coco" else np.array([0.5])
    best = best_iou_at_k(proposals, groundtruths, k)
    if len(best) == 0:
        raise ValueError("no instances")
    return _mean(fraction_above(best, thresholds))


def best_iou_at_k(proposals: Sequence, groundtruths: Sequence, k: int) -> np.ndarray:
    from .geometry import iou_matrix

    if len(proposals) != len(groundtruths):
        raise ValueError("one proposal list per groundtruth instance required")
    best = np.zeros(len(groundtruths))
    for i, (props, gt) in enumerate(zip(proposals, groundtruths)):
        boxes = np.asarray(getattr(props, "boxes", props), dtype=np.float64).reshape(-1, 4)[:k]
        if len(boxes):
            best[i] = iou_matrix(boxes, np.asarray(gt, dtype=np.float64).reshape(1, 4)).max()
    return best


# --------------------------------------------------------------------------
# presence


@dataclass
class PresenceResult:
    tpr: float
    tnr: Optional[float]  # None when no frame is labelled absent
    gm: Optional[float]
    max_gm: Optional[float] = None
    best_threshold: Optional[float] = None


def _presence_counts(scores, hit, gt_present, thresholds):
    """TP and TN counts for predicted presence ``score > t`` at each t."""
    s = np.asarray(scores, dtype=np.float64)
    pos_scores = np.sort(s[gt_present & hit])
    neg_scores = np.sort(s[~gt_present])
    tp = len(pos_scores) - np.searchsorted(pos_scores, thresholds, side="right")
    tn = np.searchsorted(neg_scores, thresholds, side="right")
    return tp.astype(np.float64), tn.astype(np.float64)


def presence_metrics(pred, gt, scores, present=None, iou_threshold: float = 0.5) -> PresenceResult:
    """TPR / TNR / geometric mean for long-term tracking.

    TPR counts groundtruth-present frames reported present with IoU above
    ``iou_threshold``; TNR counts groundtruth-absent frames reported absent.
    ``present`` gives the operating point's flags; MaxGM sweeps the
    confidence threshold over every observed score (plus the
    never-absent/always-absent extremes) and reports the plain maximum.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not (len(pred) == len(gt) == len(scores)):
        raise ValueError("prediction, groundtruth and score lengths differ")
    gt_present = np.all(np.isfinite(gt), axis=1)
    if not gt_present.any():
        raise ValueError("no groundtruth-present frames")
    hit = np.zeros(len(gt), dtype=bool)
    hit[gt_present] = iou_aligned(pred[gt_present], gt[gt_present]) > iou_threshold
    n_pos, n_neg = int(gt_present.sum()), int((~gt_present).sum())

    result = PresenceResult(tpr=float("nan"), tnr=None, gm=None)
    if present is not None:
        present = np.asarray(present, dtype=bool).reshape(-1)
        result.tpr = float((present & hit & gt_present).sum() / n_pos)
        if n_neg:
            result.tnr = float((~present & ~gt_present).sum() / n_neg)
            result.gm = math.sqrt(result.tpr * result.tnr)
    if n_neg:
        thresholds = np.concatenate([[-np.inf], np.unique(scores)])
        tp, tn = _presence_counts(scores, hit, gt_present, thresholds)
        gm = np.sqrt((tp / n_pos) * (tn / n_neg))
        i = int(np.argmax(gm))
        result.max_gm, result.best_threshold = float(gm[i]), float(thresholds[i])
    if present is None:
        result.tpr = float((hit & gt_present).sum() / n_pos)
    return result


# --------------------------------------------------------------------------
# whole runs


@dataclass
class SequenceRun:
    pred: np.ndarray  # (T, 4)
    scores: np.ndarray  # (T,)
    present: np.ndarray  # (T,) bool
    gt: np.ndarray  # (T, 4), NaN where absent


@dataclass
class EvalRun:
    sequences: Dict[str, SequenceRun] = field(default_factory=dict)


ALL_METRICS = ("success", "precision", "norm_precision", "op", "presence")


def evaluate_run(run: EvalRun, metrics: Iterable[str] = ALL_METRICS) -> dict:
    """Per-sequence and aggregate metrics. Curve metrics and OP are averaged
    over sequences; presence metrics pool all frames."""
    metrics = tuple(metrics)
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; valid: {ALL_METRICS}")
    if not run.sequences:
        raise ValueError("empty run")
    per_seq, curves = {}, {m: [] for m in ("success", "precision", "norm_precision")}
    for name in sorted(run.sequences):
        sr = run.sequences[name]
        row = {}
        if not np.all(np.isfinite(sr.gt), axis=1).any():
            per_seq[name] = row
            continue
        if "success" in metrics:
            c = success_curve(sr.pred, sr.gt)
            row["success"] = c.summary
            curves["success"].append(c.values)
        if "precision" in metrics:
            c = precision_curve(sr.pred, sr.gt)
            row["precision"] = c.summary
            curves["precision"].append(c.values)
        if "norm_precision" in metrics:
            c = normalized_precision_curve(sr.pred, sr.gt)
            row["norm_precision"] = c.summary
            curves["norm_precision"].append(c.values)
        if "op" in metrics:
            row["op"] = overlap_precision(sr.pred, sr.gt)
        per_seq[name] = row
    agg = {}
    thresholds = {"success": SUCCESS_THRESHOLDS, "precision": PRECISION_THRESHOLDS, "norm_precision": NORM_PRECISION_THRESHOLDS}
    curve_tables = {}
    for m in ("success", "precision", "norm_precision", "op"):
        vals = [row[m] for row in per_seq.values() if m in row]
        if m in metrics and vals:
            agg[m] = float(np.mean(vals))
        if m in curves and curves[m]:
            curve_tables[m] = (thresholds[m], np.mean(curves[m], axis=0))
    if "presence" in metrics:
        names = sorted(run.sequences)
        cat = lambda attr: np.concatenate([getattr(run.sequences[n], attr) for n in names])
        gt = cat("gt")
        if (~np.all(np.isfinite(gt), axis=1)).any():
            pr = presence_metrics(cat("pred"), gt, cat("scores"), cat("present"))
            agg.update({"tpr": pr.tpr, "tnr": pr.tnr, "gm": pr.gm, "max_gm": pr.max_gm})
        else:
            agg.update({"tpr": None, "tnr": None, "gm": None, "max_gm": None})
    return {"per_sequence": per_seq, "aggregate": agg, "curves": curve_tables}


REPORT_HEADER = "# globaltrack-report v1"


def format_report(report: dict) -> str:
    """Plain-text report: aggregate lines, per-sequence lines, then curve
    tables of ``threshold,value`` rows."""
    lines = [REPORT_HEADER, "[aggregate]"]
    for k, v in report["aggregate"].items():
        lines.append(f"{k} = {'n/a' if v is None else f'{v:.6f}'}")
    lines.append("[per_sequence]")
    for name, row in report["per_sequence"].items():
        lines.append(name + " " + " ".join(f"{k}={v:.6f}" for k, v in row.items()))
    for m, (t, v) in report.get("curves", {}).items():
        lines.append(f"[curve {m}]")
        lines.extend(f"{a:.6f},{b:.6f}" for a, b in zip(t, v))
    for msg in report.get("errors", []):
        lines.append(f"error: {msg}")
    return "\n".join(lines) + "\n"
