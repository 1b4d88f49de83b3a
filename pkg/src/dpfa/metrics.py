"""Confusion-matrix metrics and the report printed after every evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(y_true, y_pred, num_classes) -> np.ndarray:
    """``conf[t, p]`` counts points of true class ``t`` predicted as ``p``."""
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{y_true.size} labels vs {y_pred.size} predictions")
    for name, y in (("label", y_true), ("prediction", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise ValueError(f"{name} ids must lie in [0, {num_classes})")
    return np.bincount(y_true * num_classes + y_pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(conf):
    """Per-class IoU; NaN where TP + FP + FN is zero."""
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def latency_stats(seconds):
    ms = np.asarray(seconds, dtype=np.float64) * 1e3
    if ms.size == 0:
        return {}
    return dict(mean_ms=float(ms.mean()), median_ms=float(np.median(ms)), p95_ms=float(np.percentile(ms, 95)), n=int(ms.size))


@dataclass
class MetricsReport:
    confusion: np.ndarray
    oa: float
    per_class_iou: np.ndarray
    miou: float
    class_table: list = field(default_factory=list)
    # timing never takes part in equality: identical runs differ in wall clock
    latency: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_confusion(cls, conf, class_table=None, latencies=None):
        conf = np.asarray(conf, dtype=np.int64)
        total = conf.sum()
        iou = iou_from_confusion(conf)
        present = ~np.isnan(iou)
        return cls(
            confusion=conf,
            oa=float(np.trace(conf) / total) if total else float("nan"),
            per_class_iou=iou,
            miou=float(iou[present].mean()) if present.any() else float("nan"),
            class_table=list(class_table) if class_table is not None else [str(i) for i in range(len(conf))],
            latency=latency_stats(latencies) if latencies is not None else {},
        )

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return (
            np.array_equal(self.confusion, other.confusion)
            and np.array_equal(self.per_class_iou, other.per_class_iou, equal_nan=True)
            and self.oa == other.oa
            and (self.miou == other.miou or (np.isnan(self.miou) and np.isnan(other.miou)))
            and self.class_table == other.class_table
        )

    @property
    def count(self):
        return int(self.confusion.sum())

    def to_dict(self):
        out = dict(oa=self.oa, miou=self.miou, points=self.count)
        for name, v in zip(self.class_table, self.per_class_iou):
            out[f"iou.{name}"] = float(v)
        for k, v in self.latency.items():
            out[f"latency.{k}"] = v
        return out

    def kv_lines(self, prefix=""):
        return [f"{prefix}{k}={v:.6f}" if isinstance(v, float) else f"{prefix}{k}={v}" for k, v in self.to_dict().items()]

    def table(self):
        w = max([5] + [len(n) for n in self.class_table])
        rows = [f"{'class':<{w}}  {'IoU':>7}"]
        for name, v in zip(self.class_table, self.per_class_iou):
            rows.append(f"{name:<{w}}  {'-':>7}" if np.isnan(v) else f"{name:<{w}}  {100 * v:7.2f}")
        rows.append(f"{'OA':<{w}}  {100 * self.oa:7.2f}")
        rows.append(f"{'mIoU':<{w}}  {100 * self.miou:7.2f}")
        if self.latency:
            rows.append(f"latency  median {self.latency['median_ms']:.2f} ms  p95 {self.latency['p95_ms']:.2f} ms")
        return "\n".join(rows)


def recount(y_true, y_pred, num_classes):
    """OA and per-class IoU straight from the per-point labels, no confusion matrix."""
    y_true = np.asarray(y_true).reshape(-1)
    y_pred = np.asarray(y_pred).reshape(-1)
    oa = float(np.count_nonzero(y_true == y_pred) / y_true.size) if y_true.size else float("nan")
    iou = np.full(num_classes, np.nan)
    for c in range(num_classes):
        t, p = y_true == c, y_pred == c
        union = np.count_nonzero(t | p)
        if union:
            iou[c] = np.count_nonzero(t & p) / union
    return oa, iou


def cross_check(report: MetricsReport, y_true, y_pred):
    """Raise if the report disagrees with an independent per-point recount."""
    oa, iou = recount(y_true, y_pred, len(report.confusion))
    if report.count != np.asarray(y_true).size:
        raise AssertionError(f"confusion holds {report.count} points, evaluated {np.asarray(y_true).size}")
    if not (np.isclose(oa, report.oa, rtol=0, atol=1e-12) or np.isnan(oa) and np.isnan(report.oa)):
        raise AssertionError(f"OA {report.oa} disagrees with recount {oa}")
    if not np.allclose(iou, report.per_class_iou, rtol=0, atol=1e-12, equal_nan=True):
        raise AssertionError("per-class IoU disagrees with recount")
