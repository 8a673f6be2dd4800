import numpy as np
import pytest
from scipy.stats import norm

from mfglab.dynamics import SDESpec
from mfglab.errors import ConfigError, DomainError, GridResolutionError
from mfglab.mfg_verify import (GridField1D, VerifyConfig, cell_grid, duality_check_1d, fp_solve_1d, gaussian_eta_1d,
                               gaussian_eta_field, hjb_residual_1d, run_verification, variational_derivative_check)

SPEC = SDESpec(0.5, 0.0, 1.0, 3.0, 1)


def test_fp_solver_conserves_mass_and_tracks_the_analytic_law():
    x, h = cell_grid(401)
    sol = fp_solve_1d(SPEC, gaussian_eta_1d(SPEC, 0.5, 0.5, x, 0.0), 401, 751)
    assert np.max(np.abs(sol.masses() - 1.0)) < 1e-10
    exact = gaussian_eta_1d(SPEC, 0.5, 0.5, x, SPEC.T)
    assert h * np.abs(sol.values[-1] - exact).sum() < 1e-3


def test_fp_solver_flags_negative_densities_on_a_coarse_grid():
    sharp = SDESpec(5.0, 0.0, 0.05, 1.0, 1)
    x, h = cell_grid(21)
    init = np.zeros(21)
    init[3] = 1.0 / h
    with pytest.raises(GridResolutionError):
        fp_solve_1d(sharp, init, 21, 3)


def test_fp_solver_input_validation():
    with pytest.raises(DomainError):
        fp_solve_1d(SPEC, np.ones(51), 51, 11)
    with pytest.raises(ConfigError):
        fp_solve_1d(SDESpec.ou(d=2), np.ones(51), 51, 11)


def test_hjb_residual_of_the_exact_density_shrinks_quadratically():
    r = [hjb_residual_1d(gaussian_eta_field(SPEC, 0.5, 0.5, nx, nt), SPEC)[1]
         for nx, nt in ((201, 376), (401, 751))]
    assert 3.0 < r[0] / r[1] < 5.0


def test_duality_gap_vanishes_under_refinement():
    dev = [duality_check_1d(gaussian_eta_field(SPEC, 0.5, 0.5, nx, nt), SPEC) for nx, nt in ((101, 151), (201, 301))]
    assert dev[1] < dev[0] < 0.05


@pytest.mark.parametrize("tag,tol", [("kl", 1e-4), ("cross_entropy", 1e-9), ("fisher", 1e-3)])
def test_first_variations(tag, tol):
    x, h = cell_grid(1000)
    rho = norm.pdf(x, 0.2, 0.9)
    rho /= h * rho.sum()
    psi = np.cos(x)
    chi = rho * (psi - h * np.sum(rho * psi))
    _, _, err = variational_derivative_check(tag, x, rho, chi, log_pi=norm.logpdf(x))
    assert err <= tol


def test_variational_check_input_validation():
    x, h = cell_grid(100)
    rho = norm.pdf(x)
    with pytest.raises(DomainError):
        variational_derivative_check("kl", x, rho, np.ones_like(x))
    with pytest.raises(ConfigError):
        variational_derivative_check("cross_entropy", x, rho, np.zeros_like(x))
    with pytest.raises(ConfigError):
        GridField1D(x, [0.0], np.ones((1, 100)) * 5, is_density=True)


def test_suite_passes_on_the_default_grid():
    report = run_verification(VerifyConfig())
    failed = [c["name"] for c in report if not c["passed"]]
    assert not failed
