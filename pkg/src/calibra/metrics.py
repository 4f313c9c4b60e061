"""Classification and segmentation metrics."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UsageError

logger = logging.getLogger(__name__)

N_CLASSES = 3


@dataclass
class EvalReport:
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float | None
    dice: float | None
    miou: float | None
    confusion: list = field(default_factory=list)
    per_class_auc: list = field(default_factory=list)
    n_classification: int = 0
    n_segmentation: int = 0
    config_fingerprint: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def confusion_matrix(pred_labels, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(pred_labels, dtype=int)), 1)
    return cm


def classification_metrics(preds, labels) -> tuple[float, float, float]:
    """Accuracy plus macro one-vs-rest sensitivity and specificity."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if preds.size == 0 or labels.size == 0:
        raise UsageError("classification_metrics needs at least one sample")
    if np.any((labels < 0) | (labels >= N_CLASSES)):
        raise UsageError("labels must lie in {0, 1, 2}")
    pred_labels = preds.argmax(axis=1) if preds.ndim == 2 else preds.astype(int)
    cm = confusion_matrix(pred_labels, labels)
    total = cm.sum()
    sens, spec = [], []
    for c in range(N_CLASSES):
        tp = cm[c, c]
        fn = cm[c].sum() - tp
        fp = cm[:, c].sum() - tp
        tn = total - tp - fn - fp
        if tp + fn:
            sens.append(tp / (tp + fn))
        if tn + fp:
            spec.append(tn / (tn + fp))
    accuracy = float(np.trace(cm) / total)
    return accuracy, float(np.mean(sens)), float(np.mean(spec))


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC for binary labels; ties count one half.

    Returns None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # average ranks over tie groups
    _, first, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    avg = first + (counts + 1) / 2.0
    ranks[order] = np.repeat(avg, counts)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(probs, labels) -> tuple[float | None, list]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    per_class = []
    for c in range(N_CLASSES):
        a = auc(probs[:, c], labels == c)
        if a is None:
            logger.warning("AUC undefined for class %d (single-class split), excluded", c)
        per_class.append(a)
    present = [a for a in per_class if a is not None]
    return (float(np.mean(present)) if present else None), per_class


def dice(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise UsageError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def iou(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def miou(pred_mask, gt_mask) -> float:
    """Mean of foreground and background IoU."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise UsageError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return 0.5 * (iou(a, b) + iou(~a, ~b))


def segmentation_metrics(prob_maps, gt_masks, threshold: float = 0.5) -> tuple[float | None, float | None]:
    """Per-slice dice and mIoU averaged over slices."""
    if len(prob_maps) == 0:
        return None, None
    ds, ms = [], []
    for p, g in zip(prob_maps, gt_masks):
        pred = np.asarray(p) >= threshold
        ds.append(dice(pred, g))
        ms.append(miou(pred, g))
    return float(np.mean(ds)), float(np.mean(ms))


def fingerprint(config_text: str) -> str:
    return hashlib.sha256(config_text.encode()).hexdigest()[:16]


def evaluate(probs, labels, seg_maps, seg_masks, threshold: float = 0.5,
             config_text: str = "") -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    acc, sens, spec = classification_metrics(probs, labels)
    mauc, per_class = macro_auc(probs, labels)
    d, m = segmentation_metrics(seg_maps, seg_masks, threshold)
    cm = confusion_matrix(probs.argmax(axis=1), labels)
    return EvalReport(accuracy=acc, sensitivity=sens, specificity=spec, auc=mauc, dice=d, miou=m,
                      confusion=cm.tolist(), per_class_auc=per_class,
                      n_classification=int(labels.size), n_segmentation=len(seg_maps),
                      config_fingerprint=fingerprint(config_text))


def confusion_csv(cm) -> str:
    from .synthdata import CLASSES

    lines = ["true\\pred," + ",".join(CLASSES)]
    for name, row in zip(CLASSES, cm):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"
