"""Segmentation metrics: overall accuracy, per-class IoU, mean IoU."""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


def confusion_matrix(pred, truth, n_classes) -> np.ndarray:
    """C x C counts; rows are ground truth, columns are prediction."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ContractViolation("pred/truth length mismatch")
    if pred.size and (min(pred.min(), truth.min()) < 0
                      or max(pred.max(), truth.max()) >= n_classes):
        raise ContractViolation("label out of range [0, C)")
    flat = truth * n_classes + pred
    return np.bincount(flat, minlength=n_classes * n_classes) \
             .reshape(n_classes, n_classes)


def overall_accuracy(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractViolation("pred/truth length mismatch")
    return float(np.count_nonzero(pred == truth)) / len(pred)


def oa_from_confusion(conf: np.ndarray) -> float:
    return float(np.trace(conf) / conf.sum())


def iou_per_class(pred, truth, n_classes) -> np.ndarray:
    """IoU_c = TP / (TP + FP + FN); NaN for classes absent from both."""
    return iou_from_confusion(confusion_matrix(pred, truth, n_classes))


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    tp = np.diag(conf).astype(float)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    out = np.full(conf.shape[0], np.nan)
    present = union > 0
    out[present] = tp[present] / union[present]
    return out


def mean_iou(pred, truth, n_classes) -> float:
    """Mean IoU over classes present in truth or pred (absent ones excluded)."""
    return float(np.nanmean(iou_per_class(pred, truth, n_classes)))


def report_csv(rows, n_classes) -> str:
    """rows: list of (tag, conf) pairs; emits per-mesh lines plus an
    aggregate line computed from the summed confusion matrix."""
    header = "mesh,oa,miou," + ",".join(f"iou_c{c}" for c in range(n_classes))
    lines = [header]
    total = np.zeros((n_classes, n_classes), dtype=np.int64)
    for tag, conf in rows:
        total += conf
        lines.append(_row(tag, conf))
    lines.append(_row("aggregate", total))
    return "\n".join(lines) + "\n"


def _row(tag, conf):
    ious = iou_from_confusion(conf)
    cells = [tag, repr(oa_from_confusion(conf)), repr(float(np.nanmean(ious)))]
    cells += ["" if np.isnan(v) else repr(float(v)) for v in ious]
    return ",".join(cells)
