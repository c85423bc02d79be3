"""Referring-segmentation evaluation metrics and report assembly.

Conventions: IoU of two empty masks is 1.0 and of exactly one empty mask is
0.0; precision thresholds are inclusive (IoU == threshold counts as a hit);
class-wise IoU pools intersection/union pixels within each class.  Report
values use the percent convention with two-decimal table formatting.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

PR_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class EvalSample:
    pred: np.ndarray
    gt: np.ndarray
    category: str = "unknown"
    image_id: str = ""

    def __post_init__(self):
        self.pred = np.asarray(self.pred)
        self.gt = np.asarray(self.gt)
        if self.pred.shape != self.gt.shape:
            raise ShapeError(
                f"pred shape {self.pred.shape} != gt shape {self.gt.shape}")
        for name, m in (("pred", self.pred), ("gt", self.gt)):
            vals = np.unique(m)
            if not np.isin(vals, (0, 1)).all():
                raise ContractError(f"{name} mask must be binary, got values {vals}")


@dataclass
class EvalReport:
    miou: float
    oiou: float
    pr: dict
    per_class_iou: dict
    classwise_miou: float
    sample_count: int

    def to_dict(self):
        return {
            "sample_count": self.sample_count,
            "pr": {f"{t:.1f}": v for t, v in self.pr.items()},
            "miou": self.miou,
            "oiou": self.oiou,
            "per_class_iou": dict(self.per_class_iou),
            "classwise_miou": self.classwise_miou,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _counts(pred, gt):
    inter = int(np.sum((pred == 1) & (gt == 1)))
    union = int(np.sum((pred == 1) | (gt == 1)))
    return inter, union


def iou(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes disagree: {pred.shape} vs {gt.shape}")
    inter, union = _counts(pred, gt)
    if union == 0:
        return 1.0
    return inter / union


def miou(samples):
    samples = list(samples)
    if not samples:
        raise ContractError("miou needs at least one sample")
    return math.fsum(iou(s.pred, s.gt) for s in samples) / len(samples)


def oiou(samples):
    samples = list(samples)
    if not samples:
        raise ContractError("oiou needs at least one sample")
    total_i = total_u = 0
    for s in samples:
        inter, union = _counts(s.pred, s.gt)
        total_i += inter
        total_u += union
    if total_u == 0:
        return 1.0
    return total_i / total_u


def precision_at(samples, threshold):
    samples = list(samples)
    if not samples:
        raise ContractError("precision_at needs at least one sample")
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must be in (0,1), got {threshold}")
    hits = sum(1 for s in samples if iou(s.pred, s.gt) >= threshold)
    return 100.0 * hits / len(samples)


def classwise_iou(samples):
    """Pooled per-class IoU plus the unweighted mean over classes present."""
    samples = list(samples)
    pools = {}
    for s in samples:
        inter, union = _counts(s.pred, s.gt)
        i0, u0 = pools.get(s.category, (0, 0))
        pools[s.category] = (i0 + inter, u0 + union)
    per_class = {c: (1.0 if u == 0 else i / u) for c, (i, u) in pools.items()}
    if not per_class:
        return {}, 0.0
    cmiou = math.fsum(per_class.values()) / len(per_class)
    return per_class, cmiou


def build_report(samples):
    samples = list(samples)
    if not samples:
        raise ContractError("cannot build a report from zero samples")
    per_class, cmiou = classwise_iou(samples)
    return EvalReport(
        miou=100.0 * miou(samples),
        oiou=100.0 * oiou(samples),
        pr={t: precision_at(samples, t) for t in PR_THRESHOLDS},
        per_class_iou={c: 100.0 * v for c, v in sorted(per_class.items())},
        classwise_miou=100.0 * cmiou,
        sample_count=len(samples),
    )


def render_table(report):
    """Plain-text table in the Pr@0.5..Pr@0.9, mIoU, oIoU column order."""
    headers = [f"Pr@{t:.1f}" for t in PR_THRESHOLDS] + ["mIoU", "oIoU"]
    values = [report.pr[t] for t in PR_THRESHOLDS] + [report.miou, report.oiou]
    widths = [max(len(h), 7) for h in headers]
    lines = [
        "  ".join(h.rjust(w) for h, w in zip(headers, widths)),
        "  ".join(f"{v:.2f}".rjust(w) for v, w in zip(values, widths)),
    ]
    if report.per_class_iou:
        lines.append("")
        lines.append("Class-wise IoU:")
        for cls, v in report.per_class_iou.items():
            lines.append(f"  {cls:<20s} {v:7.2f}")
        lines.append(f"  {'mIoU (class-wise)':<20s} {report.classwise_miou:7.2f}")
    return "\n".join(lines)


def render_csv(report):
    headers = [f"Pr@{t:.1f}" for t in PR_THRESHOLDS] + ["mIoU", "oIoU"]
    values = [report.pr[t] for t in PR_THRESHOLDS] + [report.miou, report.oiou]
    return (",".join(headers) + "\n"
            + ",".join(f"{v:.6f}" for v in values) + "\n")
