import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sbirr.errors import InvalidParameterError
from sbirr.metrics import emd, mmd_sq

from oracles import brute_force_emd


def _rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# --------------------------------------------------------------------- emd


def test_emd_identical_clouds():
    x = np.random.default_rng(0).normal(size=(20, 3))
    assert emd(x, x) == pytest.approx(0.0, abs=1e-12)


def test_emd_singletons():
    assert emd([[0.0]], [[3.0]]) == pytest.approx(3.0, abs=1e-12)


def test_emd_two_point_example():
    assert emd([[0.0], [1.0]], [[0.0], [3.0]]) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("n", range(1, 7))
def test_emd_matches_brute_force(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        assert abs(emd(a, b) - brute_force_emd(a, b)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(
    arrays(float, (5, 2), elements=finite),
    arrays(float, (6, 2), elements=finite),
    arrays(float, (4, 2), elements=finite),
)
def test_emd_triangle_inequality(a, b, c):
    assert emd(a, c) <= emd(a, b) + emd(b, c) + 1e-9


@settings(max_examples=40, deadline=None)
@given(arrays(float, (6, 2), elements=finite), arrays(float, (3, 2), elements=finite))
def test_emd_symmetric_and_nonnegative(a, b):
    assert emd(a, b) >= 0
    assert emd(a, b) == pytest.approx(emd(b, a), abs=1e-9)


def test_emd_unequal_sizes():
    # half the mass of {0, 0} must travel to 2, the other half stays
    assert emd([[0.0], [0.0]], [[0.0], [2.0]]) == pytest.approx(1.0)
    assert emd([[0.0]], [[1.0], [3.0]]) == pytest.approx(2.0)


def test_emd_sinkhorn_fallback_is_close(monkeypatch):
    import sbirr.metrics as m

    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(300, 2)), rng.normal(loc=1.0, size=(300, 2))
    exact = emd(a, b)
    monkeypatch.setattr(m, "EXACT_MAX_POINTS", 100)
    approx = m.emd(a, b)
    assert approx == pytest.approx(exact, rel=0.05)


# --------------------------------------------------------------------- mmd


def test_mmd_identical_and_singletons():
    x = np.random.default_rng(0).normal(size=(10, 2))
    assert mmd_sq(x, x) == pytest.approx(0.0, abs=1e-12)
    assert mmd_sq([[0.0]], [[2.0]]) == pytest.approx(2 - 2 * math.exp(-2), abs=1e-12)
    assert mmd_sq([[0.0]], [[2.0]]) == pytest.approx(1.72933, abs=1e-5)


def test_mmd_permutation_invariant():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(15, 3)), rng.normal(size=(12, 3))
    assert abs(mmd_sq(a, b) - mmd_sq(a[rng.permutation(15)], b[rng.permutation(12)])) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(float, (5, 2), elements=finite), arrays(float, (7, 2), elements=finite), st.floats(0.1, 5))
def test_mmd_nonnegative(a, b, ls):
    assert mmd_sq(a, b, ls) >= 0


@pytest.mark.parametrize("metric", [emd, mmd_sq])
def test_rotation_invariance(metric):
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    r = _rotation(0.7)
    assert abs(metric(a @ r.T, b @ r.T) - metric(a, b)) <= 1e-9


def test_metric_errors():
    with pytest.raises(InvalidParameterError):
        emd(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(InvalidParameterError):
        mmd_sq(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(InvalidParameterError):
        mmd_sq(np.zeros((3, 2)), np.zeros((3, 2)), 0.0)
    with pytest.raises(InvalidParameterError):
        emd(np.zeros((0, 2)), np.zeros((3, 2)))
