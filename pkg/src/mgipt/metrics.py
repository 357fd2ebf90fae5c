"""Segmentation metrics and prediction confidence."""

import numpy as np

from .net import sigmoid


def dsc(mask_pred, mask_true):
    """Per-class Dice similarity for H x W x K (or H x W) binary masks.

    Two empty masks count as perfect agreement.
    """
    a = np.asarray(mask_pred, dtype=bool)
    b = np.asarray(mask_true, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    inter = (a & b).sum(axis=(0, 1))
    total = a.sum(axis=(0, 1)) + b.sum(axis=(0, 1))
    return np.where(total > 0, 2.0 * inter / np.maximum(total, 1), 1.0)


def confidence(logits, reduce="mean"):
    """Decisiveness of a 2-channel sigmoid prediction: mean (or min) of max(q, 1-q)."""
    q = sigmoid(np.asarray(logits, dtype=np.float64))
    per_pixel = np.maximum(q, 1.0 - q)
    if reduce == "mean":
        return float(per_pixel.mean())
    if reduce == "min":
        return float(per_pixel.min())
    raise ValueError(f"unknown confidence reduction {reduce!r}")
