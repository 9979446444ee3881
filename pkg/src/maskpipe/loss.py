"""Hard-pixel-mining cross-entropy with an exact analytic gradient.

Per-pixel cross-entropy is computed from logits via a max-shifted
log-sum-exp; the top fraction of hardest pixels (largest CE, ties to
the lower pixel index) forms the mined set. The loss normalizes by
``|T| * |C|``; dividing by ``|T|`` alone is the more common variant and
sits behind a flag. The gradient is ``(softmax - onehot) / (|T|*|C|)``
on mined rows and zero elsewhere.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError
from .validation import check_fraction


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def pixel_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """-log softmax(logits)[target] per row, computed stably."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return log_norm - shifted[np.arange(logits.shape[0]), targets]


def mined_pixel_count(n_pixels: int, top_fraction: float) -> int:
    return max(1, math.floor(top_fraction * n_pixels))


def hard_mining_ce(logits, targets, top_fraction: float = 0.2,
                   class_count: int | None = None,
                   normalize_by_classes: bool = True):
    """Loss and gradient of the mined cross-entropy.

    ``class_count`` is the ``|C|`` in the normalization; it defaults to
    the logits width (background included). Returns ``(loss, grad)``
    with ``grad`` shaped like ``logits``.
    """
    check_fraction(top_fraction, "top_fraction")
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ValidationError("logits must be [n_pixels, n_classes]")
    if not np.all(np.isfinite(logits)):
        raise ValidationError("logits contain non-finite values")
    n, width = logits.shape
    if targets.shape != (n,):
        raise ValidationError(f"targets must have shape ({n},), got {targets.shape}")
    targets = targets.astype(np.intp)
    if n == 0:
        raise ValidationError("need at least one pixel")
    if targets.min() < 0 or targets.max() >= width:
        raise ValidationError(f"targets must lie in [0, {width})")
    if class_count is None:
        class_count = width
    if class_count < 1:
        raise ValidationError(f"class_count must be >= 1, got {class_count}")

    ce = pixel_cross_entropy(logits, targets)
    n_mined = mined_pixel_count(n, top_fraction)
    # stable sort keeps lower pixel indices first among equal losses
    mined = np.sort(np.argsort(-ce, kind="stable")[:n_mined])

    denom = float(n_mined * class_count) if normalize_by_classes else float(n_mined)
    loss = float(ce[mined].sum() / denom)

    grad = np.zeros_like(logits)
    probs = softmax_rows(logits[mined])
    probs[np.arange(n_mined), targets[mined]] -= 1.0
    grad[mined] = probs / denom
    return loss, grad


def hardest_pixels(logits, targets, top_fraction: float = 0.2) -> np.ndarray:
    """Indices of the mined set, sorted ascending (exposed for inspection)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.intp)
    ce = pixel_cross_entropy(logits, targets)
    n_mined = mined_pixel_count(logits.shape[0], top_fraction)
    return np.sort(np.argsort(-ce, kind="stable")[:n_mined])


def finite_difference_gradient(logits, targets, top_fraction: float = 0.2,
                               class_count: int | None = None,
                               normalize_by_classes: bool = True,
                               epsilon: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the loss, entry by entry."""
    logits = np.asarray(logits, dtype=np.float64)
    grad = np.zeros_like(logits)
    for i in range(logits.shape[0]):
        for c in range(logits.shape[1]):
            bumped = logits.copy()
            bumped[i, c] += epsilon
            up, _ = hard_mining_ce(bumped, targets, top_fraction, class_count,
                                   normalize_by_classes)
            bumped[i, c] -= 2.0 * epsilon
            down, _ = hard_mining_ce(bumped, targets, top_fraction, class_count,
                                     normalize_by_classes)
            grad[i, c] = (up - down) / (2.0 * epsilon)
    return grad
