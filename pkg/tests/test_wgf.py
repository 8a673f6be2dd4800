import numpy as np
import pytest

from mfglab.errors import ConfigError, UnsupportedError
from mfglab.targets import checkerboard, gaussian
from mfglab.wgf import (WGFRun, free_energy_trace, gaussian_kl, kde_kl, langevin_flow, ou_variance_recursion,
                        silverman_bandwidth, smooth, write_trace_csv)


def test_langevin_variance_follows_the_scheme_recursion():
    run = WGFRun(gaussian([0.0, 0.0], 1.0), n=4000, dt=0.05, steps=40, stride=10, seed=2, init_var=4.0)
    snaps = langevin_flow(run)
    assert [s.time_label for s in snaps] == pytest.approx([0.0, 0.5, 1.0, 1.5, 2.0])
    rec = ou_variance_recursion(4.0, 0.05, 40)[::10]
    for s, v in zip(snaps, rec):
        se = v * np.sqrt(2.0 / (s.n - 1)) / np.sqrt(2)  # two coordinates pooled
        assert abs(s.states.var(axis=0, ddof=1).mean() - v) < 4 * se


def test_kde_kl_is_near_the_closed_form_for_gaussian_samples():
    t = gaussian([0.0, 0.0], 1.0)
    x = np.random.default_rng(0).normal(scale=1.5, size=(4000, 2))
    est, bw = kde_kl(x, t)
    assert bw == pytest.approx(silverman_bandwidth(x))
    assert est == pytest.approx(gaussian_kl(np.zeros(2), 2.25 * np.eye(2), t), abs=0.05)


def test_free_energy_trace_decreases_during_relaxation():
    t = gaussian([0.0, 0.0], 0.25)
    snaps = langevin_flow(WGFRun(t, n=1500, dt=0.002, steps=200, stride=40, seed=0, init_var=2.0))
    vals, bws = free_energy_trace(snaps, t)
    assert vals.shape == bws.shape == (6,)
    assert np.all(np.diff(vals[:4]) < 0)


def test_smooth_keeps_constants_and_averages_neighbours():
    np.testing.assert_allclose(smooth(np.full(7, 2.0), 5), 2.0)
    np.testing.assert_allclose(smooth([0.0, 3.0, 0.0], 3), [1.5, 1.0, 1.5])


def test_run_validation(tmp_path):
    with pytest.raises(UnsupportedError):
        WGFRun(checkerboard())
    with pytest.raises(ConfigError):
        WGFRun(gaussian([0.0], 1.0), dt=0.0)
    path = write_trace_csv(tmp_path / "t.csv", [0, 10], [1.0, 0.5])
    assert path.read_text().splitlines() == ["step,kl_estimate", "0,1", "10,0.5"]
