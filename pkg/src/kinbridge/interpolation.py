"""Bridge flows, their diagnostics, and the controlled-SDE cross check.

The optimal bridge marginal at time t factorizes over the invariant measure
as rho_t = f_t g_t with f_t the adjoint-semigroup evolution of the source
potential and g_t the backward evolution of the target potential.  Flows are
realized by applying the semigroup at each requested time to the endpoint
potentials (no PDE time stepping), so Chapman-Kolmogorov remains an
independent check.

Diagnostics per time: relative entropy H, Fisher information I, the split
H = hf + hb, the twisted-norm Dirichlet energies (correctors) of log f and
log g, and the velocity Dirichlet integrands driving the cost identities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.ndimage import map_coordinates

from .exceptions import (ConfigurationError, DomainError,
                         PropagationAccuracyError)
from .model import (InvariantMeasure, LOG_FLOOR, PhaseDensity, PhaseGrid,
                    Potential, log_gradients, normalize_phase, spatial_moments)
from .solver import SchrodingerPotentials
from .twisted import TwistedNorms

CORRECTOR_MASK_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Flow construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BridgeFlow:
    """Entropic interpolation rho_t = f_t g_t on the grid at selected times."""

    T: float
    times: np.ndarray                  # (nt,)
    log_f_t: np.ndarray                # (nt, nx, nv)
    log_g_t: np.ndarray                # (nt, nx, nv)
    rho_t: np.ndarray                  # (nt, nx, nv)
    masses: np.ndarray                 # (nt,)

    def phase_density(self, k: int, m: InvariantMeasure) -> PhaseDensity:
        return normalize_phase(self.rho_t[k], m)


def _lift_spatial(vec: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    return np.repeat(vec.reshape(grid.nx, 1), grid.nv, axis=1)


def _march(start_log: np.ndarray, hops, apply_step, max_step: float):
    """Evolve a log field through consecutive time hops, splitting long ones.

    hops is a sequence of step lengths; each hop is subdivided so that no
    single application exceeds the propagator's advertised max_step.  Yields
    the field after each hop.
    """
    current = start_log
    for hop in hops:
        remaining = float(hop)
        if remaining > 0.0:
            n_sub = max(1, int(math.ceil(remaining / max_step - 1e-12)))
            sub = remaining / n_sub
            for _ in range(n_sub):
                current = apply_step(current, sub)
        yield current


def compute_flow(pots: SchrodingerPotentials, propagator, times, grid: PhaseGrid,
                 m: InvariantMeasure, mass_tol: float = 2e-6) -> BridgeFlow:
    """Evolve the endpoint potentials to every requested time.

    The source potential marches forward through the sorted times with the
    adjoint semigroup and the target potential marches backward with the
    semigroup, each segment subdivided per the propagator's max_step.  For
    spatial problems the endpoint potentials are lifted to phase space as
    functions of position only.  The quadrature mass of each rho_t must
    stay within mass_tol of 1.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.ndim != 1 or times.size < 1:
        raise ConfigurationError("need a nonempty 1-d vector of times")
    if np.any(times < -1e-12) or np.any(times > pots.T + 1e-12):
        raise ConfigurationError("flow times must lie in [0, T]")
    if np.any(np.diff(times) <= 0):
        raise ConfigurationError("flow times must be strictly increasing")
    T = pots.T
    if pots.domain == "spatial":
        lf0 = _lift_spatial(pots.log_f, grid)
        lgT = _lift_spatial(pots.log_g, grid)
    else:
        lf0 = pots.log_f.reshape(grid.nx, grid.nv)
        lgT = pots.log_g.reshape(grid.nx, grid.nv)

    max_step = float(getattr(propagator, "max_step", math.inf))
    nt = times.size
    log_f_t = np.empty((nt, grid.nx, grid.nv))
    log_g_t = np.empty((nt, grid.nx, grid.nv))

    fwd_hops = np.concatenate([[times[0]], np.diff(times)])
    for k, lf in enumerate(_march(lf0, fwd_hops, propagator.forward_log, max_step)):
        log_f_t[k] = lf
    bwd_hops = np.concatenate([[T - times[-1]], np.diff(times)[::-1]])
    for j, lg in enumerate(_march(lgT, bwd_hops, propagator.backward_log, max_step)):
        log_g_t[nt - 1 - j] = lg

    rho_t = np.exp(np.maximum(log_f_t + log_g_t, -745.0))
    masses = np.einsum("kxv,xv->k", rho_t, m.phase_weights)
    bad = np.abs(masses - 1.0) > mass_tol
    if np.any(bad):
        worst = int(np.abs(masses - 1.0).argmax())
        raise PropagationAccuracyError(
            f"flow mass at t={times[worst]:g} drifted to {masses[worst]:.8f}; "
            "refine the grid or the propagation quadrature")
    return BridgeFlow(T=T, times=times, log_f_t=log_f_t, log_g_t=log_g_t,
                      rho_t=rho_t, masses=masses)


# ---------------------------------------------------------------------------
# Diagnostics along the flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowDiagnostics:
    """Per-time scalars along a bridge flow (arrays indexed like flow.times)."""

    times: np.ndarray
    H: np.ndarray          # relative entropy of rho_t
    I: np.ndarray          # Fisher information of rho_t
    hf: np.ndarray         # integral of log f_t against rho_t dm
    hb: np.ndarray         # integral of log g_t against rho_t dm
    phi: np.ndarray        # twisted Dirichlet energy of log f_t
    psi: np.ndarray        # twisted Dirichlet energy of log g_t
    gamma_f: np.ndarray    # velocity Dirichlet integral of log f_t
    gamma_b: np.ndarray    # velocity Dirichlet integral of log g_t
    w2_to_m: np.ndarray    # Gaussian-moment W2 distance to the invariant law
    fisher_constant: float   # c with I <= c (phi + psi)
    velocity_constant: float  # c with gamma integrals <= gamma c * corrector


def flow_diagnostics(flow: BridgeFlow, tn: TwistedNorms, pot: Potential,
                     m: InvariantMeasure, grid: PhaseGrid,
                     with_w2: bool = True) -> FlowDiagnostics:
    """Entropy, Fisher, correctors and carre-du-champ integrals per time.

    Gradients are second-order finite differences on the grid; corrector
    integrands are masked where rho_t < 1e-12 (they are weighted by rho_t,
    so the masked region is negligible).  w2_to_m is the closed-form
    Gaussian W2 between the moment-matched flow and the invariant law,
    meaningful for quadratic potentials.
    """
    b, c = tn.b, tn.c
    gamma = pot.gamma
    nt = flow.times.size
    out = {k: np.zeros(nt) for k in
           ("H", "I", "hf", "hb", "phi", "psi", "gamma_f", "gamma_b", "w2")}
    w = m.phase_weights
    s_inf = np.diag([1.0 / pot.alpha, 1.0])
    for k in range(nt):
        lf, lg, rho = flow.log_f_t[k], flow.log_g_t[k], flow.rho_t[k]
        valid = rho > CORRECTOR_MASK_FLOOR
        rw = rho * w
        sel = rho > LOG_FLOOR
        log_rho = lf + lg
        out["H"][k] = np.sum(log_rho[sel] * rw[sel])
        out["hf"][k] = np.sum(lf[sel] * rw[sel])
        out["hb"][k] = np.sum(lg[sel] * rw[sel])

        lf_safe = np.where(valid, lf, 0.0)
        lg_safe = np.where(valid, lg, 0.0)
        gfx, gfv = log_gradients(lf_safe, grid)
        ggx, ggv = log_gradients(lg_safe, grid)
        rwv = np.where(valid, rw, 0.0)
        # |grad log f|^2 in the N^{-1} = F Q F form (cross term +2b)
        out["phi"][k] = np.sum((gfx ** 2 + 2 * b * gfx * gfv + c * gfv ** 2) * rwv)
        # |grad log g|^2 in the M^{-1} = Q form (cross term -2b)
        out["psi"][k] = np.sum((ggx ** 2 - 2 * b * ggx * ggv + c * ggv ** 2) * rwv)
        out["gamma_f"][k] = gamma * np.sum(gfv ** 2 * rwv)
        out["gamma_b"][k] = gamma * np.sum(ggv ** 2 * rwv)
        out["I"][k] = np.sum(((gfx + ggx) ** 2 + (gfv + ggv) ** 2) * rwv)

        if with_w2:
            mean, cov = spatial_moments(PhaseDensity(np.maximum(rho, 0.0), False),
                                        m, grid)
            out["w2"][k] = gaussian_wasserstein(mean, cov, np.zeros(2), s_inf)
    return FlowDiagnostics(
        times=flow.times, H=out["H"], I=out["I"], hf=out["hf"], hb=out["hb"],
        phi=out["phi"], psi=out["psi"], gamma_f=out["gamma_f"],
        gamma_b=out["gamma_b"], w2_to_m=out["w2"],
        fisher_constant=tn.fisher_equivalence_constant(),
        velocity_constant=tn.velocity_gradient_constant())


def cost_identity_residual(flow: BridgeFlow, diag: FlowDiagnostics,
                           primal_cost: float) -> np.ndarray:
    """Defect of the two-sided cost representation at each flow time.

    The continuum identity expresses the cost as the endpoint entropies plus
    the backward velocity-Dirichlet integral over [0, t], the forward one
    over [t, T], minus the entropy at t; on a discrete time grid the
    integrals are trapezoid sums and the residual is their quadrature error.
    """
    t = diag.times
    int_gb = cumulative_trapezoid(diag.gamma_b, t, initial=0.0)
    int_gf_rev = cumulative_trapezoid(diag.gamma_f[::-1], t, initial=0.0)[::-1]
    residual = (primal_cost - diag.H[0] - diag.H[-1]
                - int_gb - int_gf_rev + diag.H)
    return np.abs(residual)


def marginal_entropy_gap(flow: BridgeFlow, mu, nu, m: InvariantMeasure,
                         grid: PhaseGrid):
    """Entropy excess of the endpoint phase marginals over the prescribed ones.

    gap0 = H(rho_0 | m) - H(mu | m_X) and symmetrically at T; both are
    nonnegative up to quadrature tolerance (velocity averaging only removes
    entropy).
    """
    from .model import relative_entropy
    h_mu = relative_entropy(mu, m, grid)
    h_nu = relative_entropy(nu, m, grid)
    h0 = relative_entropy(flow.phase_density(0, m), m, grid)
    hT = relative_entropy(flow.phase_density(flow.times.size - 1, m), m, grid)
    return h0 - h_mu, hT - h_nu


# ---------------------------------------------------------------------------
# Gaussian Wasserstein closed form
# ---------------------------------------------------------------------------

def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -1e-10 * max(1.0, abs(vals.max())):
        raise DomainError(f"matrix is not positive semidefinite: eigs {vals}")
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def gaussian_wasserstein(mean1, cov1, mean2, cov2, metric=None) -> float:
    """Quadratic Wasserstein distance between Gaussians, optionally twisted.

    With a positive definite metric matrix M the distance is the Euclidean
    Gaussian W2 after mapping everything through M^{1/2}.
    """
    m1 = np.atleast_1d(np.asarray(mean1, dtype=float))
    m2 = np.atleast_1d(np.asarray(mean2, dtype=float))
    c1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    c2 = np.atleast_2d(np.asarray(cov2, dtype=float))
    if metric is not None:
        L = _sqrtm_psd(np.asarray(metric, dtype=float))
        m1, m2 = L @ m1, L @ m2
        c1, c2 = L @ c1 @ L.T, L @ c2 @ L.T
    r2 = _sqrtm_psd(c2)
    cross = _sqrtm_psd(r2 @ c1 @ r2)
    bures2 = float(np.trace(c1) + np.trace(c2) - 2.0 * np.trace(cross))
    d2 = float(np.sum((m1 - m2) ** 2)) + max(bures2, 0.0)
    return math.sqrt(max(d2, 0.0))


# ---------------------------------------------------------------------------
# Controlled SDE cross-check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SdeSnapshots:
    """Empirical marginals of the controlled dynamics at requested times."""

    times: np.ndarray
    means: np.ndarray          # (nt, 2)
    covs: np.ndarray           # (nt, 2, 2)
    samples: np.ndarray = field(repr=False, default=None)  # (nt, n_paths, 2)
    clamped_fraction: float = 0.0


def _sample_phase_density(rho: np.ndarray, grid: PhaseGrid, m: InvariantMeasure,
                          n: int, rng) -> np.ndarray:
    probs = (rho * m.phase_weights).ravel()
    probs = np.maximum(probs, 0.0)
    probs = probs / probs.sum()
    idx = rng.choice(probs.size, size=n, p=probs)
    pts = grid.phase_points()[idx]
    jitter = rng.uniform(-0.5, 0.5, size=(n, 2)) * np.array([grid.hx, grid.hv])
    pts = pts + jitter
    x_min, x_max, v_min, v_max = grid.bounds
    pts[:, 0] = np.clip(pts[:, 0], x_min, x_max)
    pts[:, 1] = np.clip(pts[:, 1], v_min, v_max)
    return pts


def simulate_controlled_sde(flow: BridgeFlow, pot: Potential, grid: PhaseGrid,
                            m: InvariantMeasure, n_paths: int, dt: float,
                            seed: int, sample_times=None,
                            clamp_tol: float = 0.01) -> SdeSnapshots:
    """Euler-Maruyama for the optimally controlled dynamics.

    The feedback drift adds 2 gamma grad_v log g_t to the velocity equation;
    the gradient field is tabulated on the grid per flow time, interpolated
    bilinearly in space and linearly in time.  Paths start from samples of
    rho_0.  The initial draw uses the stream (seed, 0) and path noise the
    streams (seed, 1, path), so results are independent of batching.
    """
    spacing = float(np.min(np.diff(flow.times))) if flow.times.size > 1 else flow.T
    if dt > spacing / 4.0 + 1e-15:
        raise ConfigurationError(
            f"dt={dt} too coarse for the flow time grid (need <= spacing/4 = "
            f"{spacing / 4.0:g})")
    if sample_times is None:
        sample_times = np.array([flow.T])
    sample_times = np.sort(np.atleast_1d(np.asarray(sample_times, dtype=float)))
    t_final = float(sample_times[-1])

    # control field per flow time: d/dv log g_t
    dgv = np.gradient(flow.log_g_t, grid.hv, axis=2, edge_order=2)

    rng_init = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    pts = _sample_phase_density(flow.rho_t[0], grid, m, n_paths, rng_init)

    n_steps = int(round(t_final / dt))
    noise = np.empty((n_paths, n_steps))
    for p in range(n_paths):
        rng_p = np.random.default_rng(np.random.SeedSequence([int(seed), 1, p]))
        noise[p] = rng_p.standard_normal(n_steps)
    sample_steps = {int(round(ts / dt)): i for i, ts in enumerate(sample_times)}
    x_min, x_max, v_min, v_max = grid.bounds
    sig = math.sqrt(2.0 * pot.gamma * dt)
    ever_clamped = np.zeros(n_paths, dtype=bool)
    means = np.empty((sample_times.size, 2))
    covs = np.empty((sample_times.size, 2, 2))
    samples = np.empty((sample_times.size, n_paths, 2))

    def record(i):
        means[i] = pts.mean(axis=0)
        covs[i] = np.cov(pts.T, bias=False)
        samples[i] = pts

    if 0 in sample_steps:
        record(sample_steps[0])
    for step in range(n_steps):
        s = step * dt
        # time bracket on the flow grid
        pos = np.searchsorted(flow.times, s, side="right") - 1
        pos = min(max(pos, 0), flow.times.size - 2) if flow.times.size > 1 else 0
        if flow.times.size > 1:
            th = (s - flow.times[pos]) / (flow.times[pos + 1] - flow.times[pos])
            th = min(max(th, 0.0), 1.0)
        else:
            th = 0.0
        coords = np.empty((2, n_paths))
        coords[0] = (pts[:, 0] - x_min) / grid.hx
        coords[1] = (pts[:, 1] - v_min) / grid.hv
        c0 = map_coordinates(dgv[pos], coords, order=1, mode="nearest")
        if flow.times.size > 1:
            c1 = map_coordinates(dgv[pos + 1], coords, order=1, mode="nearest")
            ctrl = (1.0 - th) * c0 + th * c1
        else:
            ctrl = c0
        xi = noise[:, step]
        drift_v = -pot.gradU(pts[:, 0]) - pot.gamma * pts[:, 1] \
            + 2.0 * pot.gamma * ctrl
        new_x = pts[:, 0] + pts[:, 1] * dt
        new_v = pts[:, 1] + drift_v * dt + sig * xi
        clamped = ((new_x < x_min) | (new_x > x_max)
                   | (new_v < v_min) | (new_v > v_max))
        ever_clamped |= clamped
        pts[:, 0] = np.clip(new_x, x_min, x_max)
        pts[:, 1] = np.clip(new_v, v_min, v_max)
        if (step + 1) in sample_steps:
            record(sample_steps[step + 1])

    frac = float(ever_clamped.mean())
    if frac > clamp_tol:
        raise PropagationAccuracyError(
            f"{frac:.2%} of controlled paths left the box; enlarge it")
    return SdeSnapshots(times=sample_times, means=means, covs=covs,
                        samples=samples, clamped_fraction=frac)
