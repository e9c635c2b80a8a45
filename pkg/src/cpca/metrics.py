"""Confusion-matrix segmentation scores: per-class P/R/F1/IoU and OA, MA, mIoU."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ContractError

IGNORE = 255


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # int64 [K, K]; rows ground truth, columns prediction
    ignored_pixels: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), 0)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum()) + self.ignored_pixels

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored_pixels + other.ignored_pixels)


def accumulate(conf: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ContractError("prediction and ground truth differ in shape")
    K = conf.num_classes
    if pred.size and (pred.min() < 0 or pred.max() >= K):
        raise ContractError(f"predicted class outside 0..{K - 1}")
    ign = gt == IGNORE
    g, p = gt[~ign], pred[~ign]
    if g.size and (g.min() < 0 or g.max() >= K):
        raise ContractError(f"ground-truth class outside 0..{K - 1}")
    counts = conf.counts + np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    return ConfusionMatrix(counts, conf.ignored_pixels + int(ign.sum()))


def _div(a, b):
    return a / b if b else math.nan


@dataclass
class MetricReport:
    class_names: list
    precision: list
    recall: list
    f1: list
    iou: list
    oa: float
    ma: float
    miou: float
    support: list = field(default_factory=list)
    undefined: list = field(default_factory=list)  # classes with no support and no predictions
    total_pixels: int = 0
    ignored_pixels: int = 0
    name: str = ""

    def to_dict(self):
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return {k: clean(v) for k, v in asdict(self).items()}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        def nan(v):
            if v is None:
                return math.nan
            if isinstance(v, list):
                return [nan(x) for x in v]
            return v
        d = dict(d)
        for key in ("precision", "recall", "f1", "iou", "oa", "ma", "miou"):
            d[key] = nan(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def scores(conf: ConfusionMatrix, class_names=None) -> MetricReport:
    c = conf.counts.astype(np.int64)
    K = c.shape[0]
    names = list(class_names) if class_names else [f"class_{k}" for k in range(K)]
    tp = np.diag(c)
    fp = c.sum(0) - tp
    fn = c.sum(1) - tp
    precision, recall, f1, iou, undefined = [], [], [], [], []
    for k in range(K):
        if tp[k] + fp[k] + fn[k] == 0:
            undefined.append(k)
            precision.append(math.nan)
            recall.append(math.nan)
            f1.append(math.nan)
            iou.append(math.nan)
            continue
        p = tp[k] / (tp[k] + fp[k]) if tp[k] + fp[k] else 0.0
        r = _div(tp[k], tp[k] + fn[k])
        precision.append(float(p))
        recall.append(float(r))
        iou.append(float(tp[k] / (tp[k] + fp[k] + fn[k])))
        f1.append(float(2 * p * r / (p + r)) if tp[k] else 0.0)
    total = int(c.sum())
    oa = float(tp.sum() / total) if total else math.nan
    rec = [r for r in recall if not math.isnan(r)]
    ious = [v for v in iou if not math.isnan(v)]
    return MetricReport(
        class_names=names, precision=precision, recall=recall, f1=f1, iou=iou,
        oa=oa, ma=float(np.mean(rec)) if rec else math.nan,
        miou=float(np.mean(ious)) if ious else math.nan,
        support=[int(v) for v in c.sum(1)], undefined=undefined,
        total_pixels=conf.total, ignored_pixels=conf.ignored_pixels)


# --------------------------------------------------------------------------
# text tables

def _pct(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.2f}"


def format_table(reports, title=None) -> str:
    """Aligned table: run name, per-class F1, OA, MA, mIoU (percent)."""
    if not reports:
        raise ContractError("need at least one report")
    names = reports[0].class_names
    for r in reports[1:]:
        if list(r.class_names) != list(names):
            raise ContractError("reports have inconsistent class lists")
    header = ["Method"] + list(names) + ["OA", "MA", "mIoU"]
    rows = [[(r.name or "-").replace(" ", "_")] + [_pct(v) for v in r.f1] + [_pct(r.oa), _pct(r.ma), _pct(r.miou)]
            for r in reports]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    fmt = lambda row: "  ".join(
        cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
    lines = ([title] if title else []) + [fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(row) for row in rows]
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> list[dict]:
    """Inverse of :func:`format_table` (values come back in percent)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    start = next(i for i, ln in enumerate(lines) if ln.split()[0] == "Method")
    header = lines[start].split()
    out = []
    for ln in lines[start + 2:]:
        cells = ln.split()
        row = {"name": cells[0]}
        for key, cell in zip(header[1:], cells[1:]):
            row[key] = math.nan if cell == "nan" else float(cell)
        out.append(row)
    return out
