import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kendalltau

from probegen.metrics import accuracy, generalization_gap, kendall_tau


def tau_b_pairs(x, y):
    """Brute-force tau-b over all pairs."""
    c = d = tx = ty = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        sx, sy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
        if sx == 0 and sy == 0:
            continue
        if sx == 0:
            tx += 1
        elif sy == 0:
            ty += 1
        elif sx == sy:
            c += 1
        else:
            d += 1
    return (c - d) / np.sqrt((c + d + tx) * (c + d + ty))


def test_identical_and_reversed():
    assert kendall_tau([1, 2, 3], [1, 2, 3]) == 1.0
    assert kendall_tau([3, 2, 1], [1, 2, 3]) == -1.0


def test_one_swap():
    assert kendall_tau([1, 3, 2, 4], [1, 2, 3, 4]) == pytest.approx(4 / 6)


def test_undefined_when_all_tied():
    with pytest.raises(ValueError):
        kendall_tau([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        kendall_tau([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        kendall_tau([1], [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=30))
def test_tau_b_matches_oracles(pairs):
    x, y = np.array(pairs, dtype=float).T
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    ours = kendall_tau(x, y)
    assert ours == pytest.approx(tau_b_pairs(x, y), abs=1e-12)
    assert ours == pytest.approx(kendalltau(x, y).statistic, abs=1e-12)


def test_accuracy():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75


def test_generalization_gap():
    assert generalization_gap(0.95, 0.90) == pytest.approx(0.05)
    assert generalization_gap(0.8, 0.8) == 0.0
    assert generalization_gap(0.7, 0.75) == pytest.approx(-0.05)
    assert generalization_gap((0.9, "accuracy"), (0.85, "accuracy")) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        generalization_gap((0.9, "accuracy"), (0.5, "kendall_tau"))
