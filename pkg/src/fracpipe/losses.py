"""Value-only loss kernels for checking external training code.

None of these compute gradients.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .geometry import Box, ImageBounds, giou

DEFAULT_TEMPERATURE = 0.07
NORM_TOLERANCE = 1e-6


def supcon_loss(embeddings, labels: Sequence, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Supervised contrastive loss (positives averaged outside the log).

    For anchor ``i`` with positives ``P(i)`` (same label, excluding ``i``)::

        l_i = -1/|P(i)| * sum_p [ z_i.z_p / t - logsumexp_{a != i} z_i.z_a / t ]

    The result is the mean of ``l_i`` over anchors that have at least one
    positive.

    Args:
        embeddings: ``(n, dim)`` array of unit-norm vectors, ``n >= 2``.
        labels: ``n`` class identifiers.
        temperature: softmax temperature, ``> 0``.

    Raises:
        ValueError: bad shapes, non-normalised rows, or no anchor has a positive.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"embeddings must be (n >= 2, dim), got shape {z.shape}")
    n = z.shape[0]
    if len(labels) != n:
        raise ValueError("labels and embeddings differ in length")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    norms = np.linalg.norm(z, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        raise ValueError("embeddings must be L2-normalised")
    codes: dict = {}
    lab = np.array([codes.setdefault(label, len(codes)) for label in labels])
    same = lab[:, None] == lab[None, :]
    eye = np.eye(n, dtype=bool)
    positives = same & ~eye
    n_pos = positives.sum(axis=1)
    if not np.any(n_pos):
        raise ValueError("no anchor in the batch has a positive")

    logits = (z @ z.T) / temperature
    masked = np.where(eye, -np.inf, logits)
    row_max = masked.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(masked - row_max).sum(axis=1))
    log_prob = logits - lse[:, None]
    anchors = n_pos > 0
    per_anchor = -(np.where(positives, log_prob, 0.0).sum(axis=1)[anchors] / n_pos[anchors])
    return float(per_anchor.mean())


def giou_loss(pred: Box, gt: Box) -> float:
    return 1.0 - giou(pred, gt)


def l1_bbox_loss(pred: Box, gt: Box, norm: ImageBounds) -> float:
    """Sum of absolute differences of ``(cx/W, cy/H, w/W, h/H)``."""
    W, H = float(norm.width), float(norm.height)

    def center_form(b: Box):
        return ((b.x + b.w / 2) / W, (b.y + b.h / 2) / H, b.w / W, b.h / H)

    return math.fsum(abs(p - g) for p, g in zip(center_form(pred), center_form(gt)))


def cross_entropy(logits, true_class: int) -> float:
    """``-log softmax(logits)[true_class]`` with max subtraction."""
    x = np.asarray(logits, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("logits must be non-empty")
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")
    if not isinstance(true_class, (int, np.integer)) or not 0 <= true_class < x.size:
        raise IndexError(f"class index {true_class!r} out of range for {x.size} logits")
    m = x.max()
    shifted = x - m
    # log1p keeps precision when the true class dominates
    others = np.exp(np.delete(shifted, true_class)).sum()
    if shifted[true_class] == 0.0:
        return float(math.log1p(others))
    return float(-shifted[true_class] + math.log(math.exp(shifted[true_class]) + others))
