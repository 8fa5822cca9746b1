"""Log-domain Sinkhorn for the static bridge problems on the grid.

The discrete problem: given a kernel K (density of the reference joint law
relative to m (x) m on the grid) and marginal densities p, q relative to the
invariant marginal, find potentials f, g >= 0 with

    f_i (K (g a))_i = p_i       and      g_j (K^T (f a))_j = q_j,

where a are the m-quadrature weights.  The coupling density relative to the
reference is then rho_ij = f_i g_j, and the optimal value is

    C = sum_i mu_i log f_i + sum_j nu_j log g_j,

with mu_i = p_i a_i the marginal masses.  All updates run in log space with
log-sum-exp stabilization because kernel entries at long horizons span many
orders of magnitude.  Nodes with zero marginal density are masked out and
their potentials pinned to -inf (compactly supported marginals).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .exceptions import DomainError, InconsistencyError, InfeasibilityError
from .kernel import ReducedKernel, TransitionKernel
from .model import PhaseDensity, SpatialDensity

NEG_INF = -np.inf


@dataclass(frozen=True)
class SchrodingerPotentials:
    """Log potentials of the product decomposition of the optimal coupling."""

    domain: str             # "spatial" | "phase"
    log_f: np.ndarray       # flat, -inf off the source support
    log_g: np.ndarray       # flat, -inf off the target support
    T: float
    kernel_ref: str = ""


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    marginal_residual_l1: float
    primal_cost: float
    dual_value: float
    gap: float
    converged: bool
    residual_history: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class StaticCoupling:
    """Coupling density relative to the reference joint law, rho = f (x) g."""

    values: np.ndarray      # (n_source, n_target)
    domain: str


def _unpack_problem(kernel, mu, nu):
    """Common views: kernel matrix, weights, marginal densities, domain tag."""
    if isinstance(kernel, ReducedKernel):
        domain = "spatial"
        a = kernel.m.spatial_weights
        if not (isinstance(mu, SpatialDensity) and isinstance(nu, SpatialDensity)):
            raise DomainError("reduced kernel needs spatial marginals")
    elif isinstance(kernel, TransitionKernel):
        domain = "phase"
        a = kernel.m.phase_weights.ravel()
        if not (isinstance(mu, PhaseDensity) and isinstance(nu, PhaseDensity)):
            raise DomainError("phase kernel needs phase-space marginals")
    else:
        raise DomainError(f"unsupported kernel type {type(kernel).__name__}")
    p = np.asarray(mu.values, dtype=float).ravel()
    q = np.asarray(nu.values, dtype=float).ravel()
    return domain, kernel.values, a, p, q


def _tv(x: np.ndarray, y: np.ndarray) -> float:
    return 0.5 * float(np.abs(x - y).sum())


def sinkhorn(kernel, mu, nu, tol: float = 1e-10, max_iter: int = 5000):
    """Alternating log-domain updates until both marginals match within tol.

    Convergence is measured as the larger of the two total-variation
    constraint violations.  Exceeding max_iter returns a non-converged
    report instead of raising.  Returns (SchrodingerPotentials, SolveReport).
    """
    domain, K, a, p, q = _unpack_problem(kernel, mu, nu)
    src = p > 0.0
    tgt = q > 0.0
    with np.errstate(divide="ignore"):
        logK = np.log(K)
        log_p = np.where(src, np.log(np.where(src, p, 1.0)), NEG_INF)
        log_q = np.where(tgt, np.log(np.where(tgt, q, 1.0)), NEG_INF)
        log_a = np.log(a)

    if np.any(np.all(np.isneginf(logK[np.ix_(src, tgt)]), axis=1)):
        raise InfeasibilityError(
            "kernel vanishes on the support of the marginals: problem infeasible")

    mu_mass = p * a
    nu_mass = q * a
    # row/column operands including quadrature weights
    logK_row = logK + log_a[None, :]     # used with psi broadcast over columns
    logK_col = logK + log_a[:, None]     # used with phi broadcast over rows

    log_f = np.full(p.size, NEG_INF)
    log_g = np.where(tgt, 0.0, NEG_INF)

    history = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        log_f = np.where(src, log_p - logsumexp(logK_row + log_g[None, :], axis=1),
                         NEG_INF)
        log_g = np.where(tgt, log_q - logsumexp(logK_col + log_f[:, None], axis=0),
                         NEG_INF)
        # nu-constraint is exact right after the g-update; check the mu side
        mu_hat = np.exp(log_f + logsumexp(logK_row + log_g[None, :], axis=1)) * a
        residual = max(_tv(mu_hat, mu_mass), 0.0)
        history.append(residual)
        if residual <= tol:
            converged = True
            break

    # canonical gauge: equal f- and g- contributions to the cost
    phi_term = float(np.sum(mu_mass[src] * log_f[src]))
    psi_term = float(np.sum(nu_mass[tgt] * log_g[tgt]))
    shift = 0.5 * (psi_term - phi_term)
    log_f = np.where(src, log_f + shift, NEG_INF)
    log_g = np.where(tgt, log_g - shift, NEG_INF)

    pots = SchrodingerPotentials(domain=domain, log_f=log_f, log_g=log_g,
                                 T=kernel.t, kernel_ref=f"{domain}@t={kernel.t:g}")
    report = _make_report(pots, kernel, mu, nu, iterations, history, converged)
    return pots, report


def _log_coupling_mass(log_f, log_g, logK, log_a):
    both = logK + log_a[:, None] + log_a[None, :] \
        + log_f[:, None] + log_g[None, :]
    return logsumexp(both)


def _make_report(pots, kernel, mu, nu, iterations, history, converged) -> SolveReport:
    domain, K, a, p, q = _unpack_problem(kernel, mu, nu)
    with np.errstate(divide="ignore"):
        logK = np.log(K)
        log_a = np.log(a)
    src, tgt = p > 0, q > 0
    mu_mass, nu_mass = p * a, q * a

    # coupling pi_ij = exp(phi + psi) K a a; its entropy relative to the
    # reference is the primal value of the current iterate
    log_pi = logK + log_a[:, None] + log_a[None, :] \
        + pots.log_f[:, None] + pots.log_g[None, :]
    pi = np.exp(log_pi)
    log_rho = pots.log_f[:, None] + pots.log_g[None, :]
    mask = pi > 0.0
    primal = float(np.sum(pi[mask] * log_rho[mask]))

    phi_term = float(np.sum(mu_mass[src] * pots.log_f[src]))
    psi_term = float(np.sum(nu_mass[tgt] * pots.log_g[tgt]))
    dual = phi_term + psi_term - float(_log_coupling_mass(pots.log_f, pots.log_g,
                                                          logK, log_a))
    residual = history[-1] if history else math.inf
    return SolveReport(iterations=iterations,
                       marginal_residual_l1=float(residual),
                       primal_cost=primal, dual_value=dual, gap=primal - dual,
                       converged=converged,
                       residual_history=np.asarray(history))


def entropic_cost(pots: SchrodingerPotentials, kernel, mu, nu):
    """(primal, dual) at the given potentials.

    primal is the marginal quadrature of the log potentials (the product
    decomposition of the cost); dual evaluates the unconstrained dual
    objective at the same potentials, a certified lower bound.
    """
    domain, K, a, p, q = _unpack_problem(kernel, mu, nu)
    src, tgt = p > 0, q > 0
    if np.any(src & np.isneginf(pots.log_f)) or np.any(tgt & np.isneginf(pots.log_g)):
        raise InconsistencyError(
            "marginal carries mass where the potentials are -inf")
    mu_mass, nu_mass = p * a, q * a
    primal = float(np.sum(mu_mass[src] * pots.log_f[src])
                   + np.sum(nu_mass[tgt] * pots.log_g[tgt]))
    with np.errstate(divide="ignore"):
        logK = np.log(K)
        log_a = np.log(a)
    dual = primal - float(_log_coupling_mass(pots.log_f, pots.log_g, logK, log_a))
    return primal, dual


def static_coupling(pots: SchrodingerPotentials, kernel) -> StaticCoupling:
    """Coupling density rho = f (x) g relative to the reference joint law."""
    rho = np.exp(pots.log_f[:, None] + pots.log_g[None, :])
    return StaticCoupling(values=rho, domain=pots.domain)


def coupling_marginals(coupling: StaticCoupling, kernel):
    """Masses (mu_hat, nu_hat) of the coupling measure on the grid."""
    if coupling.domain == "spatial":
        a = kernel.m.spatial_weights
    else:
        a = kernel.m.phase_weights.ravel()
    pi = coupling.values * kernel.values * np.outer(a, a)
    return pi.sum(axis=1), pi.sum(axis=0)
