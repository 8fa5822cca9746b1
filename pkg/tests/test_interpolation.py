import math

import numpy as np
import pytest

from kinbridge.exceptions import ConfigurationError, DomainError, PropagationAccuracyError
from kinbridge.interpolation import (compute_flow,
                                     cost_identity_residual, flow_diagnostics,
                                     gaussian_wasserstein, marginal_entropy_gap,
                                     simulate_controlled_sde)
from kinbridge.kernel import ExactPropagator, gaussian_kernel, reduce_kernel
from kinbridge.model import (gaussian_spatial_density, marginalize_velocity,
                             quadratic_potential, stationary_spatial_density)
from kinbridge.solver import entropic_cost, sinkhorn
from kinbridge.twisted import build_twisted_norms

from gaussian_oracle import BridgeOracle


@pytest.fixture(scope="module")
def tn11():
    return build_twisted_norms(quadratic_potential(1.0, 1.0), optimize=True)


@pytest.fixture(scope="module")
def bridge41(pot11, grid41, m41):
    """T=2 Gaussian bridge on the coarse grid: solve, 33-point flow."""
    T = 2.0
    k = gaussian_kernel(1.0, 1.0, T, grid41, m41)
    r = reduce_kernel(k, m41)
    mu = gaussian_spatial_density(grid41, m41, -1.0, 0.25)
    nu = gaussian_spatial_density(grid41, m41, 1.0, 0.25)
    pots, report = sinkhorn(r, mu, nu, tol=1e-12)
    primal, _ = entropic_cost(pots, r, mu, nu)
    prop = ExactPropagator(1.0, 1.0, grid41, m41, n_gh=24)
    flow = compute_flow(pots, prop, np.linspace(0, T, 33), grid41, m41)
    return dict(T=T, kernel=r, mu=mu, nu=nu, pots=pots, report=report,
                primal=primal, prop=prop, flow=flow)


# ---------------------------------------------------------------------------
# flow construction
# ---------------------------------------------------------------------------

def test_stationary_flow_is_flat(grid41, m41, pot11, tn11):
    T = 2.0
    k = gaussian_kernel(1.0, 1.0, T, grid41, m41)
    r = reduce_kernel(k, m41)
    sta = stationary_spatial_density(grid41)
    pots, _ = sinkhorn(r, sta, sta, tol=1e-12)
    prop = ExactPropagator(1.0, 1.0, grid41, m41)
    flow = compute_flow(pots, prop, np.linspace(0, T, 9), grid41, m41)
    assert np.abs(flow.rho_t - 1.0).max() < 1e-5
    diag = flow_diagnostics(flow, tn11, quadratic_potential(1.0, 1.0), m41, grid41)
    for arr in (diag.H, diag.I, diag.phi, diag.psi, diag.gamma_f, diag.gamma_b):
        assert np.abs(arr).max() < 1e-8
    res = cost_identity_residual(flow, diag, 0.0)
    assert res.max() < 1e-8


def test_flow_masses_and_endpoints(bridge41, grid41, m41):
    # the quadrature-based route accumulates a small spline-resampling
    # ripple over the 32 recursion steps of this coarse grid
    flow = bridge41["flow"]
    assert np.abs(flow.masses - 1.0).max() < 2e-6
    mu_hat = marginalize_velocity(flow.phase_density(0, m41), m41)
    assert np.abs(mu_hat.values - bridge41["mu"].values).max() < 5e-5
    nu_hat = marginalize_velocity(flow.phase_density(32, m41), m41)
    assert np.abs(nu_hat.values - bridge41["nu"].values).max() < 5e-5


def test_flow_endpoints_exact_on_matrix_route(bridge41, grid41, m41):
    # one application of the same discrete kernel the solver used must
    # reproduce the marginals at the solver tolerance
    from kinbridge.kernel import MatrixPropagator
    mat = MatrixPropagator(lambda t: gaussian_kernel(1.0, 1.0, t, grid41, m41),
                           grid41, m41)
    flow = compute_flow(bridge41["pots"], mat, np.array([0.0, bridge41["T"]]),
                        grid41, m41)
    mu_hat = marginalize_velocity(flow.phase_density(0, m41), m41)
    nu_hat = marginalize_velocity(flow.phase_density(1, m41), m41)
    assert np.abs(mu_hat.values - bridge41["mu"].values).max() < 1e-10
    assert np.abs(nu_hat.values - bridge41["nu"].values).max() < 1e-10


def test_flow_positive_in_interior(bridge41):
    rho_mid = bridge41["flow"].rho_t[16]
    assert rho_mid[5:-5, 5:-5].min() > 0.0


def test_flow_moments_match_closed_form_bridge(bridge41, grid41, m41):
    from kinbridge.model import spatial_moments
    oracle = BridgeOracle(2.0, 1.0, 1.0, -1.0, 0.25, 1.0, 0.25)
    flow = bridge41["flow"]
    for k in (0, 8, 16, 24, 32):
        mean_o, cov_o = oracle.marginal(flow.times[k])
        mean_g, cov_g = spatial_moments(flow.phase_density(k, m41), m41, grid41)
        assert np.abs(mean_g - mean_o).max() < 5e-6
        assert np.abs(cov_g - cov_o).max() < 5e-6


def test_flow_cost_matches_closed_form(bridge41):
    oracle = BridgeOracle(2.0, 1.0, 1.0, -1.0, 0.25, 1.0, 0.25)
    assert bridge41["primal"] == pytest.approx(oracle.cost, abs=5e-6)


def test_flow_input_validation(bridge41, grid41, m41):
    pots, prop = bridge41["pots"], bridge41["prop"]
    with pytest.raises(ConfigurationError):
        compute_flow(pots, prop, np.array([0.0, 3.0]), grid41, m41)
    with pytest.raises(ConfigurationError):
        compute_flow(pots, prop, np.array([0.5, 0.25]), grid41, m41)


def test_flow_mass_drift_detected(bridge41, grid41, m41):
    from dataclasses import replace
    bad = replace(bridge41["pots"], log_f=bridge41["pots"].log_f + 0.05)
    with pytest.raises(PropagationAccuracyError):
        compute_flow(bad, bridge41["prop"], np.array([1.0]), grid41, m41)


# ---------------------------------------------------------------------------
# diagnostics and identities
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def diag41(bridge41, tn11, m41, grid41):
    return flow_diagnostics(bridge41["flow"], tn11, quadratic_potential(1.0, 1.0),
                            m41, grid41)


def test_entropy_split_identity(diag41):
    assert np.abs(diag41.H - diag41.hf - diag41.hb).max() < 1e-8


def test_entropy_derivative_matches_dirichlet_integrals(bridge41, tn11, m41, grid41):
    T = bridge41["T"]
    flow = compute_flow(bridge41["pots"], bridge41["prop"],
                        np.linspace(0, T, 64), grid41, m41)
    diag = flow_diagnostics(flow, tn11, quadratic_potential(1.0, 1.0), m41, grid41)
    dt = np.diff(flow.times)
    dhf = np.diff(diag.hf) / dt
    dhb = np.diff(diag.hb) / dt
    gf_mid = 0.5 * (diag.gamma_f[1:] + diag.gamma_f[:-1])
    gb_mid = 0.5 * (diag.gamma_b[1:] + diag.gamma_b[:-1])
    assert np.abs(dhf + gf_mid).max() <= 0.02 * max(np.abs(diag.gamma_f).max(), 1e-12)
    assert np.abs(dhb - gb_mid).max() <= 0.02 * max(np.abs(diag.gamma_b).max(), 1e-12)


def test_cost_identity_residual_small_and_second_order(bridge41, tn11, m41, grid41):
    primal = bridge41["primal"]
    flow33 = bridge41["flow"]
    diag33 = flow_diagnostics(flow33, tn11, quadratic_potential(1.0, 1.0),
                              m41, grid41, with_w2=False)
    res33 = cost_identity_residual(flow33, diag33, primal)
    assert res33.max() < 0.01 * primal
    flow65 = compute_flow(bridge41["pots"], bridge41["prop"],
                          np.linspace(0, 2.0, 65), grid41, m41)
    diag65 = flow_diagnostics(flow65, tn11, quadratic_potential(1.0, 1.0),
                              m41, grid41, with_w2=False)
    res65 = cost_identity_residual(flow65, diag65, primal)
    order = math.log2(res33.max() / res65.max())
    assert order >= 1.9


def test_corrector_contraction(bridge41, diag41, tn11):
    kappa = tn11.kappa
    t = bridge41["flow"].times
    phi, psi = diag41.phi, diag41.psi
    nt = t.size
    for i in range(nt):
        if t[i] < 0.25:
            continue
        for j in range(i + 1, nt):
            decay = math.exp(-2.0 * kappa * (t[j] - t[i]))
            assert phi[j] <= phi[i] * decay * 1.05
            # psi contracts backward: psi(T - s) <= psi(T - t) e^{-2k(s-t)}
            assert psi[nt - 1 - j] <= psi[nt - 1 - i] * decay * 1.05


def test_fisher_dominated_by_correctors(diag41):
    c = diag41.fisher_constant
    assert np.all(diag41.I <= c * (diag41.phi + diag41.psi) + 1e-10)


def test_entropy_profile_unimodal(bridge41, tn11, m41, grid41, pot11):
    # turnpike shape on a longer horizon: interior entropy dips below both
    # near-endpoint values
    T = 4.0
    k = gaussian_kernel(1.0, 1.0, T, grid41, m41)
    r = reduce_kernel(k, m41)
    mu = gaussian_spatial_density(grid41, m41, -1.0, 0.25)
    nu = gaussian_spatial_density(grid41, m41, 1.0, 0.25)
    pots, _ = sinkhorn(r, mu, nu, tol=1e-12)
    prop = ExactPropagator(1.0, 1.0, grid41, m41)
    times = np.array([0.1 * T, 0.25 * T, 0.5 * T, 0.75 * T, 0.9 * T])
    flow = compute_flow(pots, prop, times, grid41, m41)
    diag = flow_diagnostics(flow, tn11, pot11, m41, grid41, with_w2=False)
    assert min(diag.H[1:4]) < min(diag.H[0], diag.H[4])


def test_interior_entropy_below_cost(bridge41, diag41):
    # weak consequence of the regularizing bound: the interior entropy never
    # exceeds the optimal cost
    t = bridge41["flow"].times
    inner = (t >= 0.25) & (t <= bridge41["T"] - 0.25)
    assert np.all(bridge41["primal"] - diag41.H[inner] >= 0.0)


def test_marginal_entropy_gaps(bridge41, tn11, m41, grid41):
    gap0, gapT = marginal_entropy_gap(bridge41["flow"], bridge41["mu"],
                                      bridge41["nu"], m41, grid41)
    assert gap0 >= -1e-8 and gapT >= -1e-8
    # proof-level bound: gap0 <= psi(0) / (2 lambda_min(Q))
    diag = flow_diagnostics(bridge41["flow"], tn11, quadratic_potential(1.0, 1.0),
                            m41, grid41, with_w2=False)
    c = tn11.velocity_gradient_constant() / 2.0
    assert gap0 <= c * diag.psi[0] + 1e-10
    assert gapT <= c * diag.phi[-1] + 1e-10


# ---------------------------------------------------------------------------
# Gaussian Wasserstein closed form
# ---------------------------------------------------------------------------

def test_w2_identical_is_zero():
    assert gaussian_wasserstein([1, 2], np.eye(2), [1, 2], np.eye(2)) == 0.0


def test_w2_mean_shift():
    assert gaussian_wasserstein([0, 0], np.eye(2), [1, 0], np.eye(2)) \
        == pytest.approx(1.0, abs=1e-14)


def test_w2_commuting_covariances():
    got = gaussian_wasserstein([0, 0], np.eye(2), [0, 0], 4 * np.eye(2))
    assert got == pytest.approx(math.sqrt(2.0), abs=1e-12)


def test_w2_twisted_metric_matches_transformed():
    M = np.array([[2.0, 0.3], [0.3, 1.0]])
    m1, c1 = np.array([0.5, -0.2]), np.array([[0.8, 0.1], [0.1, 1.2]])
    m2, c2 = np.array([-0.3, 0.4]), np.array([[1.1, -0.2], [-0.2, 0.6]])
    from scipy.linalg import sqrtm
    L = np.real(sqrtm(M))
    direct = gaussian_wasserstein(m1, c1, m2, c2, metric=M)
    mapped = gaussian_wasserstein(L @ m1, L @ c1 @ L.T, L @ m2, L @ c2 @ L.T)
    assert direct == pytest.approx(mapped, abs=1e-12)


def test_w2_rejects_non_psd():
    with pytest.raises(DomainError):
        gaussian_wasserstein([0, 0], np.array([[1.0, 2.0], [2.0, 1.0]]),
                             [0, 0], np.eye(2))


def test_w2_1d_inputs():
    assert gaussian_wasserstein(0.0, 1.0, 1.0, 1.0) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# controlled SDE
# ---------------------------------------------------------------------------

def test_controlled_sde_stationary_sanity(grid41, m41, pot11):
    T = 2.0
    k = gaussian_kernel(1.0, 1.0, T, grid41, m41)
    r = reduce_kernel(k, m41)
    sta = stationary_spatial_density(grid41)
    pots, _ = sinkhorn(r, sta, sta, tol=1e-12)
    prop = ExactPropagator(1.0, 1.0, grid41, m41)
    flow = compute_flow(pots, prop, np.linspace(0, T, 17), grid41, m41)
    n = 4000
    snaps = simulate_controlled_sde(flow, pot11, grid41, m41, n_paths=n,
                                    dt=T / 16 / 8, seed=11,
                                    sample_times=[T / 2])
    se_mean = 3.0 / math.sqrt(n)
    assert np.abs(snaps.means[0]).max() < se_mean * 1.2
    cov = snaps.covs[0]
    se_cov = 3.0 * math.sqrt(2.0 / n)
    assert np.abs(cov - np.diag([1.0, 1.0])).max() < se_cov * 1.5


def test_controlled_sde_matches_flow_moments(bridge41, grid41, m41, pot11):
    from kinbridge.model import spatial_moments
    flow = bridge41["flow"]
    n = 4000
    snaps = simulate_controlled_sde(flow, pot11, grid41, m41, n_paths=n,
                                    dt=flow.times[1] / 8, seed=5,
                                    sample_times=[1.0])
    k_mid = int(np.argmin(np.abs(flow.times - 1.0)))
    mean_g, cov_g = spatial_moments(flow.phase_density(k_mid, m41), m41, grid41)
    se_mean = np.sqrt(np.diag(cov_g) / n)
    assert np.all(np.abs(snaps.means[0] - mean_g) <= 3.0 * se_mean + 0.02)
    se_cov = np.sqrt((np.outer(np.diag(cov_g), np.diag(cov_g)) + cov_g ** 2) / n)
    assert np.all(np.abs(snaps.covs[0] - cov_g) <= 3.0 * se_cov + 0.02)


def test_controlled_sde_deterministic(bridge41, grid41, m41, pot11):
    flow = bridge41["flow"]
    a = simulate_controlled_sde(flow, pot11, grid41, m41, n_paths=500,
                                dt=flow.times[1] / 4, seed=9, sample_times=[2.0])
    b = simulate_controlled_sde(flow, pot11, grid41, m41, n_paths=500,
                                dt=flow.times[1] / 4, seed=9, sample_times=[2.0])
    assert np.array_equal(a.samples, b.samples)


def test_controlled_sde_rejects_coarse_dt(bridge41, grid41, m41, pot11):
    with pytest.raises(ConfigurationError):
        simulate_controlled_sde(bridge41["flow"], pot11, grid41, m41,
                                n_paths=100, dt=0.1, seed=0)
