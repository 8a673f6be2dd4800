import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfglab.errors import DomainError, UnsupportedError
from mfglab.metrics import energy_distance, median_bandwidth, metric_report, mmd_squared, support_overlap
from mfglab.targets import checkerboard, gaussian, sample


def naive_mmd2(X, Y, bw):
    k = lambda A, B: np.exp(-((A[:, None] - B[None]) ** 2).sum(-1) / (2 * bw * bw))
    n, m = len(X), len(Y)
    kxx, kyy = k(X, X), k(Y, Y)
    return ((kxx.sum() - np.trace(kxx)) / (n * (n - 1)) + (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
            - 2 * k(X, Y).mean())


def test_mmd_matches_a_direct_evaluation(rng):
    X, Y = rng.normal(size=(300, 2)), rng.normal(0.5, 1.0, size=(250, 2))
    assert mmd_squared(X, Y, 0.8) == pytest.approx(naive_mmd2(X, Y, 0.8), rel=1e-10)
    # blocked sums cross the block boundary
    X2 = rng.normal(size=(2500, 2))
    assert mmd_squared(X2, Y, 0.8) == pytest.approx(naive_mmd2(X2, Y, 0.8), rel=1e-9)


@given(st.integers(0, 10_000))
def test_mmd_is_symmetric_and_zero_mean_under_the_null(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(60, 2)), rng.normal(size=(80, 2))
    assert mmd_squared(X, Y) == pytest.approx(mmd_squared(Y, X), rel=1e-9, abs=1e-12)
    assert mmd_squared(X, Y) < 0.1


def test_mmd_separates_shifted_samples(rng):
    X = rng.normal(size=(500, 2))
    assert mmd_squared(X, rng.normal(size=(500, 2))) < 0.01 < mmd_squared(X, rng.normal(1.0, size=(500, 2)))


def test_energy_distance_of_a_shift(rng):
    same = energy_distance(rng.normal(size=(800, 1)), rng.normal(size=(800, 1)))
    shifted = energy_distance(rng.normal(size=(800, 1)), rng.normal(2.0, size=(800, 1)))
    assert abs(same) < 0.05 and shifted > 1.0


def test_median_bandwidth_is_deterministic(rng):
    X, Y = rng.normal(size=(3000, 2)), rng.normal(size=(3000, 2))
    assert median_bandwidth(X, Y) == median_bandwidth(X, Y)
    assert median_bandwidth(X, Y) == pytest.approx(2.0 * np.sqrt(np.log(2)), rel=0.05)


def test_support_overlap_and_report():
    cb = checkerboard()
    x = sample(cb, 1000, 0).states
    assert support_overlap(x, cb) == 1.0
    assert support_overlap(x + np.array([1.0, 0.0]), cb) == 0.0
    rep = metric_report(x, sample(cb, 1000, 1).states, cb)
    doc = json.loads(rep.to_json())
    assert doc["support_overlap"] == 1.0 and doc["n"] == doc["m"] == 1000
    with pytest.raises(UnsupportedError):
        support_overlap(x, gaussian([0.0, 0.0], 1.0))
    with pytest.raises(DomainError):
        mmd_squared(np.array([[np.nan, 0.0], [0.0, 0.0]]), x)
