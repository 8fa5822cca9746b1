"""Closed-form Gaussian references used as independent test oracles.

For a quadratic potential the reference dynamics is a linear SDE, so the
bridge between Gaussian position marginals stays Gaussian: the optimal
position coupling is a bivariate Gaussian found by a one-parameter KL
minimization, and the time-t marginal is the OU bridge conditional mixed
over that coupling.  None of this shares code with the grid solver.
"""

import math

import numpy as np
from scipy.linalg import sqrtm
from scipy.optimize import minimize_scalar

from kinbridge.kernel import ou_params


def gaussian_entropy(mean, cov, ref_mean, ref_cov) -> float:
    """KL divergence between Gaussians."""
    mean = np.atleast_1d(np.asarray(mean, float))
    ref_mean = np.atleast_1d(np.asarray(ref_mean, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    ref_cov = np.atleast_2d(np.asarray(ref_cov, float))
    d = mean.size
    Si = np.linalg.inv(ref_cov)
    dm = mean - ref_mean
    return 0.5 * (np.trace(Si @ cov) - d - np.linalg.slogdet(cov)[1]
                  + np.linalg.slogdet(ref_cov)[1] + dm @ Si @ dm)


def gaussian_fisher(mean, cov, ref_mean, ref_cov) -> float:
    """Fisher information of N(mean, cov) relative to N(ref_mean, ref_cov)."""
    mean = np.atleast_1d(np.asarray(mean, float))
    ref_mean = np.atleast_1d(np.asarray(ref_mean, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    ref_cov = np.atleast_2d(np.asarray(ref_cov, float))
    Ci = np.linalg.inv(cov)
    Si = np.linalg.inv(ref_cov)
    # grad log rho(z) = -Ci (z - mean) + Si (z - ref_mean) = A z + c
    A = Si - Ci
    c = Ci @ mean - Si @ ref_mean
    shift = A @ mean + c
    return float(np.trace(A @ cov @ A.T) + shift @ shift)


def gaussian_w2(m1, c1, m2, c2) -> float:
    m1, m2 = np.atleast_1d(m1).astype(float), np.atleast_1d(m2).astype(float)
    c1, c2 = np.atleast_2d(c1).astype(float), np.atleast_2d(c2).astype(float)
    r = np.real(sqrtm(c2))
    cross = np.real(sqrtm(r @ c1 @ r))
    val = float(np.sum((m1 - m2) ** 2) + np.trace(c1 + c2 - 2 * cross))
    return math.sqrt(max(val, 0.0))


class BridgeOracle:
    """Closed-form bridge between Gaussian position marginals.

    mu = N(m_mu, v_mu), nu = N(m_nu, v_nu) as position laws; the reference
    is the stationary linear kinetic dynamics with the given alpha, gamma.
    """

    def __init__(self, T, alpha, gamma, m_mu, v_mu, m_nu, v_nu):
        self.T, self.alpha, self.gamma = float(T), float(alpha), float(gamma)
        self.m_mu, self.v_mu, self.m_nu, self.v_nu = m_mu, v_mu, m_nu, v_nu
        self.S0 = np.diag([1.0 / alpha, 1.0])
        pT = ou_params(alpha, gamma, T)
        self.E_T, self.S_T = pT.mean_map, pT.cov
        cross = (self.S0 @ self.E_T.T)[0, 0]
        self.SX = np.array(
            [[self.S0[0, 0], cross],
             [cross, (self.S_T + self.E_T @ self.S0 @ self.E_T.T)[0, 0]]])
        self._solve_coupling()

    def _solve_coupling(self):
        SXi = np.linalg.inv(self.SX)
        mean = np.array([self.m_mu, self.m_nu])
        logdet_SX = np.linalg.slogdet(self.SX)[1]

        def kl_of_c(c):
            Sig = np.array([[self.v_mu, c], [c, self.v_nu]])
            sign, logdet = np.linalg.slogdet(Sig)
            if sign <= 0:
                return 1e12
            return 0.5 * (np.trace(SXi @ Sig) - 2.0 - logdet + logdet_SX
                          + mean @ SXi @ mean)

        lim = math.sqrt(self.v_mu * self.v_nu) * (1.0 - 1e-9)
        res = minimize_scalar(kl_of_c, bounds=(-lim, lim), method="bounded",
                              options={"xatol": 1e-14})
        self.coupling_cov = np.array([[self.v_mu, res.x], [res.x, self.v_nu]])
        self.coupling_mean = mean
        self.cost = float(res.fun)

    def marginal(self, t):
        """(mean, cov) of the bridge phase marginal at time t."""
        T, alpha, gamma = self.T, self.alpha, self.gamma
        if t <= 0:
            E_t, S_t = np.eye(2), np.zeros((2, 2))
        else:
            p = ou_params(alpha, gamma, t)
            E_t, S_t = p.mean_map, p.cov
        if T - t <= 0:
            E_s = np.eye(2)
        else:
            E_s = ou_params(alpha, gamma, T - t).mean_map
        C_Zt = E_t @ self.S0 @ E_t.T + S_t
        cov_zt_x0 = (E_t @ self.S0)[:, [0]]
        cov_zt_xT = (C_Zt @ E_s.T)[:, [0]]
        Sab = np.hstack([cov_zt_x0, cov_zt_xT])
        A = Sab @ np.linalg.inv(self.SX)
        C_cond = C_Zt - A @ Sab.T
        mean_t = A @ self.coupling_mean
        cov_t = C_cond + A @ self.coupling_cov @ A.T
        return mean_t, 0.5 * (cov_t + cov_t.T)

    def entropy_at(self, t) -> float:
        mean, cov = self.marginal(t)
        return gaussian_entropy(mean, cov, np.zeros(2), self.S0)

    def fisher_at(self, t) -> float:
        mean, cov = self.marginal(t)
        return gaussian_fisher(mean, cov, np.zeros(2), self.S0)


def brute_force_entropic_coupling(reference: np.ndarray, mu_mass: np.ndarray,
                                  nu_mass: np.ndarray):
    """Small-instance entropy minimizer over the coupling polytope via cvxpy.

    reference is the joint reference probability matrix; returns (optimal
    coupling matrix, optimal KL value).
    """
    import cvxpy as cp

    n, m = reference.shape
    pi = cp.Variable((n, m), nonneg=True)
    objective = cp.Minimize(cp.sum(cp.rel_entr(pi, reference)))
    constraints = [cp.sum(pi, axis=1) == mu_mass, cp.sum(pi, axis=0) == nu_mass]
    prob = cp.Problem(objective, constraints)
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"oracle solve failed: {prob.status}")
    return np.asarray(pi.value), float(prob.value)
