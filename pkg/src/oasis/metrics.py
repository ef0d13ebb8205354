"""Per-frame segmentation metrics."""

import numpy as np


def frame_miou(pred_mask, gt_mask, n_classes):
    """Mean IoU over the classes present in the ground truth of this frame.

    Classes the model predicts but the ground truth lacks are excluded from
    the average; IoU for a present class c uses exactly the pixels labelled
    c in either mask.
    """
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    pred = pred_mask.reshape(-1).astype(np.int64)
    gt = gt_mask.reshape(-1).astype(np.int64)
    confusion = np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes)
    confusion = confusion.reshape(n_classes, n_classes)
    inter = np.diag(confusion)
    gt_count = confusion.sum(axis=1)
    pred_count = confusion.sum(axis=0)
    union = gt_count + pred_count - inter
    present = gt_count > 0
    ious = inter[present] / union[present]
    return float(np.mean(ious))


def count_classes(mask):
    """Number of distinct classes occupying at least one pixel."""
    return int(np.unique(mask).size)
