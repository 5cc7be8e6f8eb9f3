"""Confusion-matrix IoU, mIoU and the cross-domain generalisation score."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    num_classes: int
    ignore_index: int = 255
    counts: np.ndarray = None
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self):
        return int(self.counts.sum()) + self.ignored

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.ignore_index, self.counts + other.counts,
                               self.ignored + other.ignored)


def accumulate(cm, pred, truth):
    """Add one prediction/truth pair (any matching shapes) into ``cm`` in place."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    keep = truth != cm.ignore_index
    p = pred[keep].astype(np.int64)
    t = truth[keep].astype(np.int64)
    k = cm.num_classes
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ContractError(f"prediction ids must lie in [0, {k}); got range [{p.min()}, {p.max()}]")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ContractError(f"truth ids must lie in [0, {k}) or equal {cm.ignore_index}")
    cm.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    cm.ignored += int((~keep).sum())
    return cm


def iou_per_class(cm):
    """IoU per class; NaN where the class is absent from both truth and prediction."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def miou(cm):
    """Return ``(per-class IoU list, mIoU)``; absent classes are left out of the mean."""
    ious = iou_per_class(cm)
    present = ~np.isnan(ious)
    value = float(ious[present].mean()) if present.any() else float("nan")
    return [None if np.isnan(v) else float(v) for v in ious], value


def g_perf(mious):
    """Mean mIoU over the unseen test domains."""
    values = list(mious.values()) if isinstance(mious, dict) else list(mious)
    if not values:
        raise ContractError("g_perf needs at least one test-domain mIoU")
    return float(sum(values) / len(values))


@dataclass
class MetricReport:
    per_domain: dict = field(default_factory=dict)  # domain -> {"perClass": [...], "miou": x}

    @property
    def g_perf(self):
        return g_perf([d["miou"] for d in self.per_domain.values()])

    def to_json(self):
        return {"perDomain": self.per_domain, "gPerf": self.g_perf}

    def write(self, json_path, csv_path=None, class_names=None):
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if csv_path:
            with open(csv_path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                domains = list(self.per_domain)
                writer.writerow(["metric"] + domains + ["gPerf"])
                writer.writerow(["mIoU"] + [f"{self.per_domain[d]['miou']:.6f}" for d in domains]
                                + [f"{self.g_perf:.6f}"])
                n = len(next(iter(self.per_domain.values()))["perClass"]) if domains else 0
                for c in range(n):
                    name = class_names[c] if class_names else f"class{c}"
                    row = [self.per_domain[d]["perClass"][c] for d in domains]
                    writer.writerow([f"IoU[{name}]"] + ["" if v is None else f"{v:.6f}" for v in row] + [""])


def evaluate_domains(predict_fn, samples_by_domain, num_classes, ignore_index=255, batch=32):
    """Run ``predict_fn`` over each domain's samples and collect a :class:`MetricReport`."""
    report = MetricReport()
    for domain, samples in samples_by_domain.items():
        cm = ConfusionMatrix(num_classes, ignore_index)
        for start in range(0, len(samples), batch):
            chunk = samples[start:start + batch]
            images = np.stack([s.float_image() for s in chunk])
            preds = predict_fn(images)
            for p, s in zip(preds, chunk):
                accumulate(cm, p, s.label)
        per_class, value = miou(cm)
        report.per_domain[domain] = {"perClass": per_class, "miou": value}
    return report
