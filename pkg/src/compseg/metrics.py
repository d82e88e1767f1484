"""Confusion-matrix based segmentation metrics (per-class F1, mF1, mIoU)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np


@dataclass
class MetricsReport:
    per_class_f1: np.ndarray  # [K], percentages
    mf1: float
    miou: float
    confusion: np.ndarray     # int64 [K, K], rows = label, cols = prediction

    def to_dict(self) -> Dict:
        return {
            "per_class_f1": [float(v) for v in self.per_class_f1],
            "mF1": float(self.mf1),
            "mIoU": float(self.miou),
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(pred: np.ndarray, label: np.ndarray, num_classes: int) -> np.ndarray:
    if pred.shape != label.shape:
        raise ValueError("prediction/label shape mismatch")
    idx = label.reshape(-1) * num_classes + pred.reshape(-1)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64)


def report_from_confusion(confusion: np.ndarray) -> MetricsReport:
    k = confusion.shape[0]
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    f1_den = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, f1_den, out=np.zeros(k), where=f1_den > 0) * 100.0
    iou_den = tp + fp + fn
    iou = np.divide(tp, iou_den, out=np.zeros(k), where=iou_den > 0) * 100.0
    return MetricsReport(
        per_class_f1=f1,
        mf1=float(f1.mean()),
        miou=float(iou.mean()),
        confusion=confusion,
    )
