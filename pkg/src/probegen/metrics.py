"""Evaluation metrics."""

import numpy as np


def kendall_tau(pred, truth):
    """Kendall's tau-b by exact pair enumeration.

    tau_b = (C - D) / sqrt((n0 - T_pred) * (n0 - T_truth)), where n0 counts
    all pairs and T_* the pairs tied on that side.
    """
    x = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(truth, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} predictions vs {y.size} targets")
    if x.size < 2:
        raise ValueError("Kendall's tau needs at least two observations")
    iu = np.triu_indices(x.size, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    untied_x = np.count_nonzero(sx)
    untied_y = np.count_nonzero(sy)
    if untied_x == 0 or untied_y == 0:
        raise ValueError("Kendall's tau is undefined when one side is entirely tied")
    return float(np.dot(sx, sy) / np.sqrt(float(untied_x) * float(untied_y)))


def accuracy(pred, truth):
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError("accuracy needs two non-empty sequences of equal length")
    return float(np.mean(pred == truth))


def generalization_gap(train, test):
    """``train - test``; accepts numbers or (value, kind) pairs.

    Negative gaps (test better than train) are returned unchanged.
    """
    if isinstance(train, tuple) or isinstance(test, tuple):
        (a, kind_a), (b, kind_b) = train, test
        if kind_a != kind_b:
            raise ValueError(f"cannot compare a {kind_a!r} metric with a {kind_b!r} metric")
        return float(a) - float(b)
    return float(train) - float(test)
