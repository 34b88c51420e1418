"""Task losses: logistic log loss on +-1 labels and softmax log loss.

Both return (mean loss, gradient w.r.t. the scores of the mean loss) and are
numerically stable via logaddexp / logsumexp.
"""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError, ShapeError


def logistic_log_loss(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """log(1 + exp(-y * s)) averaged over all score entries; labels in {+1, -1}.

    For multi-output scores this is the independent one-vs-rest form: each
    column is its own binary problem and the mean runs over every entry.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    if not np.all(np.abs(y) == 1.0):
        raise ParameterError("logistic labels must be +1 or -1")
    loss = float(np.mean(np.logaddexp(0.0, -y * s)))
    grad = (-y / (1.0 + np.exp(y * s))) / s.size
    return loss, grad


def softmax_log_loss(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross entropy of softmax(scores) against integer labels, batch-averaged.

    Accepts a single (C,) score vector with a scalar label, or (B, C) with (B,).
    """
    s = np.asarray(scores, dtype=np.float64)
    single = s.ndim == 1
    if single:
        s = s[None, :]
        labels = np.asarray([labels])
    y = np.asarray(labels, dtype=np.int64)
    if s.ndim != 2 or y.shape != (s.shape[0],):
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    if np.any(y < 0) or np.any(y >= s.shape[1]):
        raise ParameterError("label outside the score range")
    m = s.max(axis=1, keepdims=True)
    log_z = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
    picked = s[np.arange(s.shape[0]), y]
    loss = float(np.mean(log_z - picked))
    soft = np.exp(s - log_z[:, None])
    grad = soft.copy()
    grad[np.arange(s.shape[0]), y] -= 1.0
    grad /= s.shape[0]
    if single:
        grad = grad[0]
    return loss, grad
