"""Potentials, invariant measure, phase-space grids, entropy and Fisher functionals.

Everything downstream works with densities *relative to the invariant measure*

    m(dx, dv) = (1/Z) exp(-U(x) - |v|^2/2) dx dv = m_X (x) m_V(v) dx dv,

on a uniform tensor grid with trapezoid quadrature.  Storing densities
relative to m keeps the ergodic limit equal to the constant 1 and lets the
entropy / Fisher / bridge formulas read off the grid without re-weighting.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from .exceptions import ConfigurationError, DomainError, TruncationError

LOG_FLOOR = 1e-300  # densities below this are treated as exact zeros


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Potential:
    """Confining potential U with certified Hessian bounds.

    alpha, beta bound the Hessian spectrum, alpha Id <= U'' <= beta Id,
    and gamma is the friction coefficient of the kinetic dynamics.  The
    quasilinearity condition sqrt(beta) - sqrt(alpha) <= gamma gates every
    twisted-norm construction downstream.
    """

    kind: str                      # "quadratic" | "custom"
    alpha: float                   # lower Hessian bound, > 0
    beta: float                    # upper Hessian bound, >= alpha
    gamma: float                   # friction, > 0
    U: Callable[[np.ndarray], np.ndarray] = None
    gradU: Callable[[np.ndarray], np.ndarray] = None
    hessU: Callable[[np.ndarray], np.ndarray] = None
    label: str = "custom"

    def __post_init__(self):
        if not (0.0 < self.alpha <= self.beta):
            raise ConfigurationError(
                f"need 0 < alpha <= beta, got alpha={self.alpha}, beta={self.beta}")
        if self.gamma <= 0.0:
            raise ConfigurationError(f"friction gamma must be positive, got {self.gamma}")
        if self.kind not in ("quadratic", "custom"):
            raise ConfigurationError(f"unknown potential kind {self.kind!r}")

    @property
    def h2_deficit(self) -> float:
        """gamma^2 - (sqrt(beta) - sqrt(alpha))^2; nonnegative iff quasilinear."""
        return self.gamma ** 2 - (math.sqrt(self.beta) - math.sqrt(self.alpha)) ** 2

    @property
    def satisfies_h2(self) -> bool:
        return math.sqrt(self.beta) - math.sqrt(self.alpha) <= self.gamma

    def check_hessian_bounds(self, xs: np.ndarray, rtol: float = 1e-9) -> None:
        """Verify U'' at sample points stays inside [alpha, beta] (with slack rtol)."""
        h = np.asarray(self.hessU(np.asarray(xs, dtype=float)), dtype=float)
        lo, hi = self.alpha * (1.0 - rtol), self.beta * (1.0 + rtol)
        if h.min() < lo or h.max() > hi:
            raise DomainError(
                "sampled Hessian leaves the certified band: "
                f"range [{h.min():.6g}, {h.max():.6g}] vs [{self.alpha}, {self.beta}]")


def quadratic_potential(alpha: float, gamma: float) -> Potential:
    """U(x) = alpha x^2 / 2; the Hessian band collapses to a point."""
    a = float(alpha)
    return Potential(
        kind="quadratic", alpha=a, beta=a, gamma=float(gamma),
        U=lambda x: 0.5 * a * np.square(x),
        gradU=lambda x: a * np.asarray(x, dtype=float),
        hessU=lambda x: np.full_like(np.asarray(x, dtype=float), a),
        label=f"quadratic(alpha={a})",
    )


def quartic_regularized_potential(epsilon: float, gamma: float) -> Potential:
    """U(x) = x^2/2 + eps log cosh x, with U'' = 1 + eps sech^2 x in [1, 1+eps]."""
    eps = float(epsilon)
    if eps < 0:
        raise ConfigurationError("epsilon must be nonnegative")

    def U(x):
        x = np.asarray(x, dtype=float)
        # log cosh x = |x| + log1p(exp(-2|x|)) - log 2, stable for large |x|
        ax = np.abs(x)
        return 0.5 * x ** 2 + eps * (ax + np.log1p(np.exp(-2.0 * ax)) - math.log(2.0))

    def gradU(x):
        x = np.asarray(x, dtype=float)
        return x + eps * np.tanh(x)

    def hessU(x):
        x = np.asarray(x, dtype=float)
        return 1.0 + eps / np.cosh(x) ** 2

    return Potential(kind="custom", alpha=1.0, beta=1.0 + eps, gamma=float(gamma),
                     U=U, gradU=gradU, hessU=hessU,
                     label=f"quartic_regularized(eps={eps})")


_FAMILIES = {
    "quadratic": lambda p: quadratic_potential(p.get("alpha", 1.0), p.get("gamma", 1.0)),
    "quartic_regularized": lambda p: quartic_regularized_potential(
        p.get("epsilon", 0.1), p.get("gamma", 1.0)),
}


def potential_from_family(name: str, params: dict) -> Potential:
    """Instantiate a built-in potential family from numeric parameters."""
    try:
        factory = _FAMILIES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown potential family {name!r}; choose from {sorted(_FAMILIES)}")
    return factory(dict(params))


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseGrid:
    """Uniform tensor grid over position x velocity with trapezoid weights."""

    x_nodes: np.ndarray
    v_nodes: np.ndarray
    x_weights: np.ndarray
    v_weights: np.ndarray
    hx: float
    hv: float
    bounds: tuple  # (x_min, x_max, v_min, v_max)

    @property
    def nx(self) -> int:
        return self.x_nodes.size

    @property
    def nv(self) -> int:
        return self.v_nodes.size

    @property
    def n_phase(self) -> int:
        return self.nx * self.nv

    def phase_points(self) -> np.ndarray:
        """All (x, v) nodes as an (nx*nv, 2) array, x-major order."""
        X, V = np.meshgrid(self.x_nodes, self.v_nodes, indexing="ij")
        return np.column_stack([X.ravel(), V.ravel()])

    def is_v_symmetric(self, tol: float = 1e-12) -> bool:
        return bool(np.allclose(self.v_nodes, -self.v_nodes[::-1], atol=tol))

    def content_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(self.x_nodes.tobytes())
        h.update(self.v_nodes.tobytes())
        return h.hexdigest()[:16]


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def build_grid(x_range, v_range, nx: int, nv: int) -> PhaseGrid:
    """Uniform grid with trapezoid quadrature weights.

    Requires nx, nv >= 8 and nondegenerate ranges.
    """
    x_min, x_max = map(float, x_range)
    v_min, v_max = map(float, v_range)
    if not (x_max > x_min and v_max > v_min):
        raise ConfigurationError(
            f"degenerate range: x=({x_min},{x_max}), v=({v_min},{v_max})")
    if nx < 8 or nv < 8:
        raise ConfigurationError(f"need at least 8 nodes per axis, got nx={nx}, nv={nv}")
    x_nodes = np.linspace(x_min, x_max, int(nx))
    v_nodes = np.linspace(v_min, v_max, int(nv))
    hx = (x_max - x_min) / (nx - 1)
    hv = (v_max - v_min) / (nv - 1)
    return PhaseGrid(
        x_nodes=x_nodes, v_nodes=v_nodes,
        x_weights=_trapezoid_weights(int(nx), hx),
        v_weights=_trapezoid_weights(int(nv), hv),
        hx=hx, hv=hv, bounds=(x_min, x_max, v_min, v_max),
    )


def default_grid(pot: Potential, nx: int = 81, nv: int = 81) -> PhaseGrid:
    """Desk-scale box [-6 sigma_x, 6 sigma_x] x [-6, 6] with sigma_x = 1/sqrt(alpha)."""
    sx = 6.0 / math.sqrt(pot.alpha)
    return build_grid((-sx, sx), (-6.0, 6.0), nx, nv)


# ---------------------------------------------------------------------------
# Invariant measure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InvariantMeasure:
    """Gibbs measure exp(-U(x) - v^2/2)/Z tabulated on a grid.

    log_density is the log Lebesgue density at the phase nodes; the tensor
    split m = m_X (x) m_V is exact by construction.  phase_weights are the
    m-quadrature weights (density times trapezoid weights) used by every
    integral in the package.
    """

    logZ: float
    log_density: np.ndarray            # (nx, nv)
    spatial_log_density: np.ndarray    # (nx,)
    velocity_log_density: np.ndarray   # (nv,)
    grid_mass: float
    phase_weights: np.ndarray = field(repr=False, default=None)    # (nx, nv)
    spatial_weights: np.ndarray = field(repr=False, default=None)  # (nx,)
    velocity_weights: np.ndarray = field(repr=False, default=None) # (nv,)


def invariant_measure(pot: Potential, grid: PhaseGrid,
                      mass_tol: float = 1e-4) -> InvariantMeasure:
    """Tabulate m on the grid; Z by adaptive quadrature of exp(-U).

    Warns when the box covers fewer than 6 standard deviations per
    coordinate, and raises TruncationError when the grid quadrature mass
    deviates from 1 by more than mass_tol.
    """
    sigma_x = 1.0 / math.sqrt(pot.alpha)
    x_min, x_max, v_min, v_max = grid.bounds
    if min(-x_min, x_max) < 6.0 * sigma_x - 1e-12 or min(-v_min, v_max) < 6.0 - 1e-12:
        warnings.warn(
            "grid box covers fewer than 6 standard deviations of the invariant "
            "measure; quadrature tails may be inaccurate", stacklevel=2)

    # Spatial normalisation by adaptive quadrature, independent of the grid.
    L = max(12.0 * sigma_x, abs(x_min), abs(x_max)) + 4.0 * sigma_x
    Zx, _ = integrate.quad(lambda x: math.exp(-float(pot.U(x))), -L, L, limit=400)
    logZ = math.log(Zx) + 0.5 * math.log(2.0 * math.pi)

    spatial_log = -np.asarray(pot.U(grid.x_nodes), dtype=float) - math.log(Zx)
    velocity_log = -0.5 * grid.v_nodes ** 2 - 0.5 * math.log(2.0 * math.pi)
    log_density = spatial_log[:, None] + velocity_log[None, :]

    phase_w = np.exp(log_density) * np.outer(grid.x_weights, grid.v_weights)
    spatial_w = np.exp(spatial_log) * grid.x_weights
    velocity_w = np.exp(velocity_log) * grid.v_weights

    mass = float(phase_w.sum())
    if abs(mass - 1.0) > mass_tol:
        raise TruncationError(
            f"grid mass of the invariant measure is {mass:.8g}; "
            "enlarge the box or refine the grid")
    return InvariantMeasure(
        logZ=logZ, log_density=log_density, spatial_log_density=spatial_log,
        velocity_log_density=velocity_log, grid_mass=mass,
        phase_weights=phase_w, spatial_weights=spatial_w, velocity_weights=velocity_w,
    )


# ---------------------------------------------------------------------------
# Densities relative to the invariant measure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseDensity:
    """Density on the phase grid relative to m (rho = dq/dm), nonnegative."""

    values: np.ndarray   # (nx, nv)
    normalized: bool = True

    def __post_init__(self):
        if np.any(self.values < 0):
            raise DomainError("phase density has negative entries")


@dataclass(frozen=True)
class SpatialDensity:
    """Density on the x-grid relative to m_X, nonnegative."""

    values: np.ndarray   # (nx,)
    normalized: bool = True

    def __post_init__(self):
        if np.any(self.values < 0):
            raise DomainError("spatial density has negative entries")


def phase_mass(values: np.ndarray, m: InvariantMeasure) -> float:
    return float(np.sum(values * m.phase_weights))


def spatial_mass(values: np.ndarray, m: InvariantMeasure) -> float:
    return float(np.sum(values * m.spatial_weights))


def normalize_phase(values: np.ndarray, m: InvariantMeasure) -> PhaseDensity:
    mass = phase_mass(values, m)
    if mass <= 0:
        raise DomainError("cannot normalize a density with nonpositive mass")
    return PhaseDensity(values=values / mass, normalized=True)


def normalize_spatial(values: np.ndarray, m: InvariantMeasure) -> SpatialDensity:
    mass = spatial_mass(values, m)
    if mass <= 0:
        raise DomainError("cannot normalize a density with nonpositive mass")
    return SpatialDensity(values=values / mass, normalized=True)


def gaussian_phase_density(grid: PhaseGrid, m: InvariantMeasure,
                           mean, cov) -> PhaseDensity:
    """N(mean, cov) on phase space as a normalized density relative to m."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    pts = grid.phase_points() - mean
    prec = np.linalg.inv(cov)
    quad = np.einsum("ni,ij,nj->n", pts, prec, pts)
    _, logdet = np.linalg.slogdet(cov)
    log_lebesgue = -0.5 * quad - 0.5 * logdet - math.log(2.0 * math.pi)
    log_rho = log_lebesgue.reshape(grid.nx, grid.nv) - m.log_density
    return normalize_phase(np.exp(log_rho), m)


def gaussian_spatial_density(grid: PhaseGrid, m: InvariantMeasure,
                             mean: float, var: float) -> SpatialDensity:
    """N(mean, var) on the x-grid as a normalized density relative to m_X."""
    if var <= 0:
        raise DomainError("variance must be positive")
    log_lebesgue = (-0.5 * (grid.x_nodes - mean) ** 2 / var
                    - 0.5 * math.log(2.0 * math.pi * var))
    log_rho = log_lebesgue - m.spatial_log_density
    return normalize_spatial(np.exp(log_rho), m)


def stationary_phase_density(grid: PhaseGrid) -> PhaseDensity:
    return PhaseDensity(values=np.ones((grid.nx, grid.nv)), normalized=True)


def stationary_spatial_density(grid: PhaseGrid) -> SpatialDensity:
    return SpatialDensity(values=np.ones(grid.nx), normalized=True)


# ---------------------------------------------------------------------------
# Entropy, Fisher information, marginalization
# ---------------------------------------------------------------------------

def _check_normalized(values: np.ndarray, weights: np.ndarray, tol: float = 1e-6):
    mass = float(np.sum(values * weights))
    if abs(mass - 1.0) > tol:
        raise DomainError(f"density is not normalized: mass = {mass:.10g}")


def relative_entropy(q, m: InvariantMeasure, grid: PhaseGrid) -> float:
    """H(q | m) = integral of rho log rho dm, with 0 log 0 = 0.

    Accepts a PhaseDensity (entropy against m) or a SpatialDensity
    (entropy against m_X).
    """
    if isinstance(q, SpatialDensity):
        rho, weights = q.values, m.spatial_weights
    else:
        rho, weights = q.values, m.phase_weights
    if np.any(rho < 0):
        raise DomainError("density has negative entries")
    _check_normalized(rho, weights)
    mask = rho > LOG_FLOOR
    out = float(np.sum(rho[mask] * np.log(rho[mask]) * weights[mask]))
    return out


def log_gradients(log_rho: np.ndarray, grid: PhaseGrid):
    """(d/dx, d/dv) of a grid function by second-order differences.

    Central in the interior, one-sided second-order at the boundary, so the
    stencil is exact for quadratics everywhere.
    """
    gx = np.gradient(log_rho, grid.hx, axis=0, edge_order=2)
    gv = np.gradient(log_rho, grid.hv, axis=1, edge_order=2)
    return gx, gv


def fisher_information(q: PhaseDensity, m: InvariantMeasure, grid: PhaseGrid) -> float:
    """I(q) = integral of |grad log rho|^2 dq over the support of q."""
    rho = q.values
    if np.any(rho < 0):
        raise DomainError("density has negative entries")
    _check_normalized(rho, m.phase_weights)
    mask = rho > LOG_FLOOR
    log_rho = np.where(mask, np.log(np.maximum(rho, LOG_FLOOR)), 0.0)
    gx, gv = log_gradients(log_rho, grid)
    integrand = (gx ** 2 + gv ** 2) * rho * m.phase_weights
    return float(np.sum(integrand[mask]))


def marginalize_velocity(q: PhaseDensity, m: InvariantMeasure) -> SpatialDensity:
    """Velocity quadrature of rho against m_V; output renormalized."""
    vals = q.values @ m.velocity_weights
    return normalize_spatial(vals, m)


def spatial_moments(q, m: InvariantMeasure, grid: PhaseGrid):
    """(mean, covariance) of the probability measure q dm on the grid."""
    if isinstance(q, SpatialDensity):
        w = q.values * m.spatial_weights
        w = w / w.sum()
        mean = float(np.sum(grid.x_nodes * w))
        var = float(np.sum((grid.x_nodes - mean) ** 2 * w))
        return mean, var
    pts = grid.phase_points()
    w = (q.values * m.phase_weights).ravel()
    w = w / w.sum()
    mean = pts.T @ w
    centered = pts - mean
    cov = (centered * w[:, None]).T @ centered
    return mean, cov
