"""Quadratic Lyapunov norms for the kinetic drift and the certified rate kappa.

The drift Jacobian of the kinetic dynamics,

    J(x) = [[0, Id], [-U''(x), -gamma Id]],

is not dissipative in the Euclidean norm, but it is in a twisted norm
|xi|_M = sqrt(xi . M xi) for a well-chosen positive definite M.  Working with
Q = M^{-1} of the block form

    Q = [[a Id, -b Id], [-b Id, c Id]],      a = 1,  c > b^2,

dissipativity  xi . (J Q) xi <= -kappa |xi|_Q^2  for every Hessian value in
[alpha, beta] reduces, per Hessian eigenvalue ell, to a symmetric 2x2 pencil
whose smallest generalized eigenvalue is the certified rate at ell.

The closed-form parameter choice

    c = b^2 + (sqrt(beta) + sqrt(alpha))^2 / 4,
    b^2 - gamma b + (sqrt(beta) - sqrt(alpha))^2 / 4 = 0,

is feasible exactly under the quasilinearity condition
sqrt(beta) - sqrt(alpha) <= gamma, but sits on the boundary of the
dissipativity region (kappa = 0 when the certified interval endpoints are
attained), so the builder also maximizes kappa over b numerically.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CertificateError, DomainError, InfeasibilityError
from .model import Potential

#: default number of Hessian-eigenvalue samples in certificate sweeps
SWEEP_SAMPLES = 1001


# ---------------------------------------------------------------------------
# Closed-form parameters and the 2x2 pencil
# ---------------------------------------------------------------------------

def closed_form_parameters(alpha: float, beta: float, gamma: float):
    """Both positive roots (b, c) of the closed-form parameter system.

    Returns a list of (b, c) pairs with b > 0, larger b first.  Raises
    InfeasibilityError carrying the deficit gamma^2 - (sqrt(beta)-sqrt(alpha))^2
    when the quasilinearity condition fails.
    """
    deficit = gamma ** 2 - (math.sqrt(beta) - math.sqrt(alpha)) ** 2
    if deficit < 0:
        raise InfeasibilityError(
            f"quasilinearity fails: (sqrt(beta)-sqrt(alpha))^2 = "
            f"{(math.sqrt(beta)-math.sqrt(alpha))**2:.6g} exceeds gamma^2 = "
            f"{gamma**2:.6g}", deficit=deficit)
    root = math.sqrt(deficit)
    plus = 0.25 * (math.sqrt(beta) + math.sqrt(alpha)) ** 2
    out = []
    for b in ((gamma + root) / 2.0, (gamma - root) / 2.0):
        if b > 0.0:
            out.append((b, b * b + plus))
    return out


def _pencil_kappa(b: float, c: float, gamma: float, ells: np.ndarray) -> np.ndarray:
    """Smallest generalized eigenvalue of (-sym(J(ell) Q), Q) per ell, a 2x2 solve.

    With A := c - b^2 > 0 the characteristic polynomial is
    A lam^2 - gamma A lam + C(ell), so the two eigenvalues sum to gamma and
    the smallest is (gamma - sqrt(gamma^2 - 4 C / A)) / 2.
    """
    A = c - b * b
    C = b * (gamma * c - ells * b) - 0.25 * (c - ells + gamma * b) ** 2
    disc = gamma * gamma - 4.0 * C / A
    # symmetric-definite pencil: eigenvalues are real, clamp rounding noise
    disc = np.maximum(disc, 0.0)
    return 0.5 * (gamma - np.sqrt(disc))


def _hessian_sweep(alpha: float, beta: float, n: int) -> np.ndarray:
    return np.linspace(alpha, beta, max(int(n), 2))


def contraction_rate(b: float, c: float, alpha: float, beta: float, gamma: float,
                     d: int = 1, n_sweep: int = SWEEP_SAMPLES) -> float:
    """Certified dissipation rate for given (b, c), clamped below at 0.

    Sweeps the Hessian band [alpha, beta] densely (endpoints included); the
    block structure of Q makes each evaluation a 2x2 pencil regardless of d.
    """
    if b <= 0.0:
        raise DomainError(f"need b > 0, got b={b}")
    if c <= b * b:
        raise DomainError(f"Q is not positive definite: c={c} <= b^2={b*b}")
    ells = _hessian_sweep(alpha, beta, n_sweep)
    kappas = _pencil_kappa(b, c, gamma, ells)
    return max(0.0, float(kappas.min()))


# ---------------------------------------------------------------------------
# The norms object
# ---------------------------------------------------------------------------

def _block_matrix(a: float, b: float, c: float, d: int) -> np.ndarray:
    eye = np.eye(d)
    return np.block([[a * eye, -b * eye], [-b * eye, c * eye]])


@dataclass(frozen=True)
class TwistedNorms:
    """Certified norms Q, M = Q^{-1}, N (velocity-flip conjugate) and rate kappa."""

    d: int
    a: float
    b: float
    c: float
    Q: np.ndarray
    M: np.ndarray
    N: np.ndarray
    kappa: float
    sweep_ells: np.ndarray = field(repr=False, default=None)
    sweep_kappas: np.ndarray = field(repr=False, default=None)

    @property
    def q_eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.Q)

    @property
    def m_eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.M)

    def fisher_equivalence_constant(self) -> float:
        """c with |grad log rho|^2 <= c (|grad log f|^2_{N^-1} + |grad log g|^2_{M^-1}).

        Pointwise |u+v|^2 <= 2|u|^2 + 2|v|^2 and |u|^2 <= lam_max(M) |u|^2_{M^-1}
        (M and N share eigenvalues), hence c = 2 lam_max(M).
        """
        return 2.0 * float(self.m_eigenvalues.max())

    def velocity_gradient_constant(self) -> float:
        """c with |grad_v h|^2 <= c |grad h|^2_{M^-1} = c (grad h . Q grad h)."""
        return 1.0 / float(np.linalg.eigvalsh(self.Q).min())


def _assemble(b: float, c: float, kappa: float, d: int,
              sweep_ells: np.ndarray, sweep_kappas: np.ndarray) -> TwistedNorms:
    a = 1.0
    det = a * c - b * b
    Q = _block_matrix(a, b, c, d)
    # closed-form inverse of the block structure keeps M Q = Id at roundoff
    M = _block_matrix(c / det, -b / det, a / det, d)
    F = np.diag(np.concatenate([np.ones(d), -np.ones(d)]))
    N = F @ M @ F
    return TwistedNorms(d=d, a=a, b=b, c=c, Q=Q, M=M, N=N, kappa=kappa,
                        sweep_ells=sweep_ells, sweep_kappas=sweep_kappas)


def build_twisted_norms(pot: Potential, d: int = 1, optimize: bool = True,
                        n_sweep: int = SWEEP_SAMPLES) -> TwistedNorms:
    """Construct (Q, M, N, kappa) for a potential satisfying quasilinearity.

    optimize=False uses the closed-form roots (both evaluated, larger kappa
    kept); optimize=True maximizes kappa over b in (0, gamma) holding
    c(b) = b^2 + (sqrt(beta)+sqrt(alpha))^2/4, by a coarse scan refined with
    golden-section search.  A zero rate is reported with a degeneracy warning,
    not an error.
    """
    alpha, beta, gamma = pot.alpha, pot.beta, pot.gamma
    if not pot.satisfies_h2:
        raise InfeasibilityError(
            "potential violates the quasilinearity condition",
            deficit=pot.h2_deficit)

    plus = 0.25 * (math.sqrt(beta) + math.sqrt(alpha)) ** 2
    ells = _hessian_sweep(alpha, beta, n_sweep)

    def kappa_of_b(b: float) -> float:
        return max(0.0, float(_pencil_kappa(b, b * b + plus, gamma, ells).min()))

    if optimize:
        bs = np.linspace(gamma * 1e-4, gamma * (1 - 1e-4), 256)
        coarse = np.array([kappa_of_b(b) for b in bs])
        i = int(coarse.argmax())
        lo = bs[max(i - 1, 0)]
        hi = bs[min(i + 1, bs.size - 1)]
        b_star = _golden_max(kappa_of_b, lo, hi)
        if kappa_of_b(b_star) < coarse[i]:
            b_star = float(bs[i])
        b, c = b_star, b_star ** 2 + plus
    else:
        candidates = closed_form_parameters(alpha, beta, gamma)
        scored = [(contraction_rate(bb, cc, alpha, beta, gamma, d, n_sweep), bb, cc)
                  for bb, cc in candidates]
        _, b, c = max(scored)

    kappas = _pencil_kappa(b, c, gamma, ells)
    kappa = max(0.0, float(kappas.min()))
    if kappa == 0.0:
        warnings.warn(
            "certified contraction rate is zero; exponential-rate diagnostics "
            "are unverifiable with this norm", stacklevel=2)
    return _assemble(b, c, kappa, d, ells, np.maximum(kappas, 0.0))


def _golden_max(f, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    """Golden-section maximizer on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = f(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = f(x1)
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Drift certificate at true Hessian samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftMarginReport:
    """Worst-case dissipativity margins kappa(U''(x)) - kappa per position."""

    positions: np.ndarray
    margins: np.ndarray
    worst_position: float
    worst_margin: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.worst_margin >= -self.tolerance)


def check_drift_condition(tn: TwistedNorms, pot: Potential,
                          sample_positions, tol: float = 1e-10) -> DriftMarginReport:
    """Verify sym(J(x) Q) + kappa Q <= 0 at the sampled positions.

    The margin at x is the smallest generalized eigenvalue of
    (-sym(J(x) Q), Q) minus the certified kappa; all margins must exceed
    -tol.  Raises CertificateError listing the worst position otherwise.
    """
    xs = np.atleast_1d(np.asarray(sample_positions, dtype=float))
    ells = np.asarray(pot.hessU(xs), dtype=float)
    margins = _pencil_kappa(tn.b, tn.c, pot.gamma, ells) - tn.kappa
    i = int(margins.argmin())
    report = DriftMarginReport(
        positions=xs, margins=margins,
        worst_position=float(xs[i]), worst_margin=float(margins[i]), tolerance=tol)
    if not report.passed:
        raise CertificateError(
            f"drift certificate fails at x = {report.worst_position:.6g}: "
            f"margin {report.worst_margin:.3e} < -{tol:g}")
    return report
