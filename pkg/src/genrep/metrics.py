"""Pixel accuracy, per-class IoU and mIoU from a pooled confusion matrix."""

from dataclasses import dataclass

import numpy as np


def confusion_matrix(pred, target, n_classes):
    """C x C counts with rows = ground truth, columns = prediction."""
    pred = np.asarray(pred).ravel()
    target = np.asarray(target).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"prediction has {pred.size} pixels, ground truth {target.size}")
    for name, arr in (("prediction", pred), ("ground truth", target)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} class index outside [0, {n_classes})")
    idx = n_classes * target.astype(np.int64) + pred.astype(np.int64)
    return np.bincount(idx, minlength=n_classes ** 2).reshape(n_classes, n_classes)


@dataclass
class SegMetrics:
    pixel_accuracy: float
    iou: np.ndarray
    mean_iou: float
    confusion: np.ndarray

    @classmethod
    def from_confusion(cls, m):
        """IoU is NaN for classes absent from the ground truth; mIoU skips them.

        A class present in the ground truth but never predicted scores 0.
        """
        m = np.asarray(m, dtype=np.int64)
        total = m.sum()
        if total == 0:
            raise ValueError("empty confusion matrix")
        tp = np.diag(m).astype(np.float64)
        rows = m.sum(axis=1)
        union = rows + m.sum(axis=0) - tp
        present = rows > 0
        iou = np.full(m.shape[0], np.nan)
        iou[present] = tp[present] / union[present]
        return cls(float(tp.sum() / total), iou, float(np.mean(iou[present])), m)

    def as_row(self):
        row = {"pixel_acc": self.pixel_accuracy, "miou": self.mean_iou}
        for c, v in enumerate(self.iou):
            row[f"iou_class{c}"] = v
        return row


def segmentation_metrics(pred, target, n_classes):
    return SegMetrics.from_confusion(confusion_matrix(pred, target, n_classes))


def evaluate(model, images, labels, n_classes=None, batch_size=32):
    """Metrics of ``model.predict`` over a test set, pooled over all pixels."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty test set")
    n_classes = n_classes or getattr(model, "n_classes", None)
    m = 0
    for lo in range(0, len(images), batch_size):
        pred = model.predict(images[lo:lo + batch_size])
        m = m + confusion_matrix(pred, labels[lo:lo + batch_size], n_classes)
    return SegMetrics.from_confusion(m)
