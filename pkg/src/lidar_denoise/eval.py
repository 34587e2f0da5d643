"""Point-wise scoring: confusion matrices, IoU, and degradation estimates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .core import CLASSES, Label

N_CLASSES = len(CLASSES)
CLASS_NAMES = tuple(c.name for c in CLASSES)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns predictions, both over VALID/RAIN/FOG."""

    counts: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


@dataclass(frozen=True)
class IouReport:
    """Per-class IoU (NaN where a class has neither support nor predictions) and their mean."""

    per_class: tuple
    mean: float

    @property
    def defined(self):
        return tuple(not math.isnan(v) for v in self.per_class)

    def to_dict(self):
        return {"per_class": {n: (None if math.isnan(v) else v) for n, v in zip(CLASS_NAMES, self.per_class)},
                "mean": self.mean}


def confusion_update(acc: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Add the (gt, pred) pairs of one frame; pixels that are NO_RETURN on either side are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    codes = np.full(256, -1, dtype=np.int64)
    for k, c in enumerate(CLASSES):
        codes[int(c)] = k
    p = codes[pred.astype(np.uint8)]
    g = codes[gt.astype(np.uint8)]
    use = (p >= 0) & (g >= 0)
    counts = np.bincount(g[use] * N_CLASSES + p[use], minlength=N_CLASSES * N_CLASSES)
    return ConfusionMatrix(acc.counts + counts.reshape(N_CLASSES, N_CLASSES))


def confusion(preds, gts) -> ConfusionMatrix:
    acc = ConfusionMatrix.empty()
    for p, g in zip(preds, gts):
        acc = confusion_update(acc, p, g)
    return acc


def iou_scores(conf: ConfusionMatrix) -> IouReport:
    """``TP / (TP + FP + FN)`` per class; the mean skips undefined classes."""
    if conf.total == 0:
        raise ValueError("confusion matrix is empty")
    c = conf.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    defined = ~np.isnan(iou)
    return IouReport(tuple(float(v) for v in iou), float(iou[defined].mean()))


def binary_clutter_confusions(masks, gts):
    """Score binary filter masks: CLUTTER counted once as RAIN and once as FOG.

    Returns ``(as_rain, as_fog)`` confusion matrices.
    """
    from .filters import mask_to_labels

    as_rain, as_fog = ConfusionMatrix.empty(), ConfusionMatrix.empty()
    for m, g in zip(masks, gts):
        as_rain = confusion_update(as_rain, mask_to_labels(m, Label.RAIN), g)
        as_fog = confusion_update(as_fog, mask_to_labels(m, Label.FOG), g)
    return as_rain, as_fog


def binary_clutter_iou(as_rain: ConfusionMatrix, as_fog: ConfusionMatrix) -> IouReport:
    """Table-style IoU for a filter that cannot tell rain from fog."""
    r = iou_scores(as_rain).per_class
    f = iou_scores(as_fog).per_class
    per = (r[0], r[1], f[2])
    vals = [v for v in per if not math.isnan(v)]
    return IouReport(per, float(np.mean(vals)))


def evaluate_predictions(net, samples) -> IouReport:
    """Class-mean IoU of a network over ``(RangeImage, labels)`` samples."""
    from .nnet.train import predict_labels

    images = [s[0] for s in samples]
    preds = predict_labels(net, images)
    return iou_scores(confusion(preds, [s[1] for s in samples]))


# --- degradation -----------------------------------------------------------

@dataclass(frozen=True)
class DegradationReport:
    clutter_ratio: float
    clutter: int
    valid: int
    beta_estimate: float | None = None
    visibility_estimate: float | None = None


@dataclass(frozen=True)
class DegradationCurve:
    """Monotone calibration of clutter ratio against extinction coefficient."""

    betas: tuple
    ratios: tuple
    contrast_threshold: float = 0.05

    def __post_init__(self):
        if len(self.betas) != len(self.ratios) or len(self.betas) < 2:
            raise ValueError("calibration needs at least two (beta, ratio) points")
        if np.any(np.diff(self.betas) <= 0):
            raise ValueError("calibration betas must be strictly increasing")

    def beta_for_ratio(self, ratio):
        # running max makes the curve invertible even if the sweep wiggles
        r = np.maximum.accumulate(np.asarray(self.ratios, dtype=np.float64))
        return float(np.interp(ratio, r, np.asarray(self.betas, dtype=np.float64)))


def clutter_ratio(labels):
    labels = np.asarray(labels)
    clutter = int(np.count_nonzero((labels == Label.RAIN) | (labels == Label.FOG)))
    valid = int(np.count_nonzero(labels == Label.VALID))
    return clutter, valid


NEAR_FIELD_M = 20.0


def near_field_clutter_fraction(distance, labels, near=NEAR_FIELD_M):
    """Share of returns closer than ``near`` metres that are labelled RAIN or FOG.

    Frames where this reaches 0.2 count as dense fog (or heavy rain) in the
    acceptance suite. Returns 0.0 when nothing returned within ``near``.
    """
    distance, labels = np.asarray(distance), np.asarray(labels)
    inside = (distance > 0) & (distance < near) & (labels != Label.NO_RETURN)
    clutter, valid = clutter_ratio(labels[inside])
    return clutter / (clutter + valid) if clutter + valid else 0.0


def degradation_report(labels, curve: DegradationCurve | None = None) -> DegradationReport:
    """Ratio of scatter points to all labelled returns, optionally mapped to a visibility."""
    clutter, valid = clutter_ratio(labels)
    if clutter + valid == 0:
        raise ValueError("frame has no labelled returns")
    ratio = clutter / (clutter + valid)
    if curve is None:
        return DegradationReport(ratio, clutter, valid)
    beta = curve.beta_for_ratio(ratio)
    vis = -math.log(curve.contrast_threshold) / beta
    return DegradationReport(ratio, clutter, valid, beta, vis)


# --- tables ----------------------------------------------------------------

TABLE_COLUMNS = ("approach", "clear", "rain", "fog", "mean", "params_mio", "runtime_ms")


def _pct(v):
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.2f}"


def table_rows(results):
    """``results``: sequence of ``(name, IouReport, param_count, runtime_ms | None)``."""
    rows = []
    for name, rep, params, runtime in results:
        v, r, f = rep.per_class
        rows.append({
            "approach": name, "clear": _pct(v), "rain": _pct(r), "fog": _pct(f), "mean": _pct(rep.mean),
            "params_mio": "-" if params is None else f"{params / 1e6:.2f}",
            "runtime_ms": "-" if runtime is None else f"{runtime:.2f}",
        })
    return rows


def format_table(results) -> str:
    """Fixed-width text table: IoU in percent per class, mean, parameters and runtime."""
    rows = table_rows(results)
    head = ("Approach", "Clear", "Rain", "Fog", "Mean", "Param[Mio]", "Runtime[ms]")
    cells = [head] + [tuple(r[c] for c in TABLE_COLUMNS) for r in rows]
    widths = [max(len(row[k]) for row in cells) for k in range(len(head))]
    lines = []
    for n, row in enumerate(cells):
        lines.append("  ".join(s.ljust(w) if k == 0 else s.rjust(w) for k, (s, w) in enumerate(zip(row, widths))))
        if n == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def table_csv(results) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(table_rows(results))
    return buf.getvalue()


def ratio_curve_dat(points) -> str:
    """gnuplot-style data: ``visibility_m beta clutter_ratio`` per line."""
    lines = ["# visibility_m beta clutter_ratio"]
    for vis, beta, ratio in points:
        lines.append(f"{vis:.6g} {beta:.6g} {ratio:.6f}")
    return "\n".join(lines) + "\n"

