"""Relative Yamabe invariants, relative first eigenvalues and sign classification.

The relative invariant is the infimum of ``E(phi) = phi^T A phi`` over the
constraint set ``||phi||_q^q + b ||gamma phi||_r^r = 1`` of fields supported
on the active degrees of freedom of a region.  It is computed by a
preconditioned projected-gradient method; the sign classifier uses the
generalized eigenproblem ``A x = lambda (M + S) x`` instead, which carries the
same sign and is linear.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import optimize, sparse
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh, splu

from .assembly import EnergyMatrices, Quadrature
from .errors import (
    ConvergenceError,
    EmptyConstraintSetError,
    InvalidExponentsError,
    NoPositiveRootError,
)
from .region import RegionPair, active_dofs

__all__ = [
    "ConstraintSpec",
    "YamabeResult",
    "EigenResult",
    "Sign",
    "constraint_root",
    "constraint_functional",
    "energy_gradient",
    "scale_to_constraint",
    "relative_eigenvalue",
    "yamabe_invariant",
    "yamabe_sign",
    "zero_band",
]

log = logging.getLogger(__name__)

ZERO_BAND = 1e-7
_DENSE_LIMIT = 500


class Sign(str, Enum):
    NEGATIVE = "Negative"
    ZERO = "Zero"
    POSITIVE = "Positive"


@dataclass(frozen=True)
class ConstraintSpec:
    """Exponents ``(q, r)`` and boundary weight ``b`` of the constraint set.

    Ranges are validated against the dimension by :meth:`validate`.
    """

    q: float
    r: float
    b: float = 0.0

    def validate(self, n: int = 3, allow_equal: bool = False) -> ConstraintSpec:
        qbar = n / (n - 2)
        if not all(math.isfinite(v) for v in (self.q, self.r, self.b)):
            raise InvalidExponentsError("q, r and b must be finite")
        if not 2 <= self.q <= 2 * qbar:
            raise InvalidExponentsError(f"q={self.q} outside [2, {2 * qbar}]")
        if not 2 <= self.r <= qbar + 1:
            raise InvalidExponentsError(f"r={self.r} outside [2, {qbar + 1}]")
        if self.q < self.r or (self.q == self.r and not allow_equal):
            raise InvalidExponentsError(f"need q > r, got q={self.q}, r={self.r}")
        return self

    def is_subcritical(self, n: int = 3) -> bool:
        qbar = n / (n - 2)
        return self.q < 2 * qbar and self.r < qbar + 1 and self.q > self.r


@dataclass(frozen=True)
class EigenResult:
    """Smallest eigenpair of ``A x = lambda (M + S) x`` on the active DOFs."""

    eigenvalue: float
    eigenfield: np.ndarray
    residual: float
    iterations: int
    status: str = "converged"
    n_dofs: int = 0


@dataclass(frozen=True)
class YamabeResult:
    """Outcome of the constrained minimization.

    ``value`` is ``energy(minimizer)``, and ``multiplier`` is the lambda of
    the Euler-Lagrange system obtained by projecting the gradient of E onto
    the gradient of the constraint.
    """

    value: float
    minimizer: np.ndarray
    multiplier: float
    iterations: int
    residual: float
    status: str
    spec: ConstraintSpec
    lq_norm: float = 0.0
    lr_norm: float = 0.0

    @property
    def identity_gap(self) -> float:
        """``|E - lambda (q a + r b s)|`` of the integrated Euler-Lagrange identity."""
        s = self.spec
        return abs(self.value - self.multiplier * (s.q * self.lq_norm + s.r * s.b * self.lr_norm))


# -- constraint root --------------------------------------------------------


def constraint_root(a: float, b: float, q: float, r: float) -> float:
    """Unique positive root of ``a x^q + b x^r = 1``.

    Parameters
    ----------
    a : float
        Positive leading coefficient.
    b : float
        Any real coefficient.
    q, r : float
        Exponents with ``q > r > 1``, or ``q == r`` when ``a + b > 0``.

    Raises
    ------
    InvalidExponentsError
        If ``q < r`` or ``r <= 1``.
    NoPositiveRootError
        If ``q == r`` and ``a + b <= 0``.
    OverflowError
        If the root lies beyond the floating-point range (``b < 0`` with
        ``q - r`` tiny).
    """
    if not (math.isfinite(q) and math.isfinite(r)) or r <= 1 or q < r:
        raise InvalidExponentsError(f"need q >= r > 1, got q={q}, r={r}")
    if not (math.isfinite(a) and a > 0 and math.isfinite(b)):
        raise ValueError(f"need finite a > 0 and finite b, got a={a}, b={b}")
    if q == r:
        if a + b <= 0:
            raise NoPositiveRootError(f"a + b = {a + b} <= 0 with q = r = {q}")
        return (a + b) ** (-1.0 / q)

    def f(x):
        return a * x**q + b * x**r - 1.0

    if b == 0:
        return a ** (-1.0 / q)
    if b > 0:
        lo, hi = 0.0, a ** (-1.0 / q) * (1.0 + 1e-9)
    else:
        # f < 0 on (0, x0]; the root lies beyond
        try:
            lo = (-b / a) ** (1.0 / (q - r))
            f(2.0 * lo + a ** (-1.0 / q))
        except OverflowError:
            raise OverflowError(f"root of {a!r} x^{q!r} + {b!r} x^{r!r} = 1 exceeds the float range") from None
        hi = 2.0 * lo + a ** (-1.0 / q)
        step = 1e-12
        while f(lo) >= 0 and step < 1:  # cancellation when a x0^(q-r) ~ -b is huge
            lo *= 1.0 - step
            step *= 4.0
        while f(hi) <= 0:
            lo, hi = hi, 2.0 * hi
    if f(hi) == 0:
        return hi
    x = optimize.brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    for _ in range(3):
        fx = f(x)
        dfx = q * a * x ** (q - 1) + r * b * x ** (r - 1)
        if fx == 0 or dfx <= 0:
            break
        nx = x - fx / dfx
        if nx <= 0 or abs(f(nx)) >= abs(fx):
            break
        x = nx
    return x


# -- functionals on active DOFs ---------------------------------------------


def energy_gradient(matrices: EnergyMatrices, phi) -> np.ndarray:
    """Gradient ``2 A phi`` of the energy."""
    return 2.0 * (matrices.A @ np.asarray(phi, dtype=float))


def _region_quadratures(matrices: EnergyMatrices, region: RegionPair, dofs=None):
    vq = matrices.volume_quadrature.restrict(cells=region.omega, dofs=dofs)
    bq = matrices.boundary_quadrature.restrict(cells=region.sigma, dofs=dofs)
    return vq, bq


class _Constraint:
    """``G(x) = ||x||_q^q + b ||gamma x||_r^r`` on a column subset."""

    def __init__(self, vq: Quadrature, bq: Quadrature, spec: ConstraintSpec):
        self.vq, self.bq, self.spec = vq, bq, spec

    def parts(self, x):
        a, ga = self.vq.power_integral(x, self.spec.q)
        if self.spec.b == 0:
            return a, 0.0, ga, np.zeros_like(ga)
        s, gs = self.bq.power_integral(x, self.spec.r)
        return a, s, ga, gs

    def hessian(self, x):
        h = self.vq.power_hessian(x, self.spec.q)
        if self.spec.b != 0:
            h = h + self.spec.b * self.bq.power_hessian(x, self.spec.r)
        return h

    def value_grad(self, x):
        a, s, ga, gs = self.parts(x)
        return a + self.spec.b * s, ga + self.spec.b * gs

    def scale(self, x):
        a, s, _, _ = self.parts(x)
        if a <= 0:
            raise EmptyConstraintSetError("field has zero interior norm and cannot be scaled onto the constraint set")
        k = constraint_root(a, self.spec.b * s, self.spec.q, self.spec.r)
        return k * x


def _tangent_newton(H, g, res):
    """Solve the bordered system ``[H g; g^T 0] [d; nu] = [res; 0]``.

    ``H = A - lam Hess G`` is half the Lagrangian Hessian; the returned step
    lies in the tangent space of the constraint.  None if singular or not a
    descent direction.
    """
    g = g[:, None]
    kkt = sparse.bmat([[H.tocsc(), sparse.csc_matrix(g)], [sparse.csc_matrix(g.T), None]], format="csc")
    try:
        sol = splu(kkt).solve(np.append(res, 0.0))
    except RuntimeError:
        return None
    d = sol[:-1]
    if not np.all(np.isfinite(d)) or float(res @ d) <= 0:
        return None
    return d


def constraint_functional(matrices: EnergyMatrices, region: RegionPair, phi, spec: ConstraintSpec):
    """Value and gradient of ``||phi||^q_{L^q(Omega)} + b ||gamma phi||^r_{L^r(Sigma)}``."""
    vq, bq = _region_quadratures(matrices, region)
    return _Constraint(vq, bq, spec).value_grad(np.asarray(phi, dtype=float))


def scale_to_constraint(phi, spec: ConstraintSpec, region: RegionPair, matrices: EnergyMatrices) -> np.ndarray:
    """Return ``k phi`` with ``k > 0`` placing it on the constraint set.

    Raises
    ------
    EmptyConstraintSetError
        If ``phi`` has zero interior norm.
    NoPositiveRootError
        If no positive scaling exists (only possible when ``q == r``).
    """
    vq, bq = _region_quadratures(matrices, region)
    return _Constraint(vq, bq, spec).scale(np.asarray(phi, dtype=float))


# -- eigenvalue --------------------------------------------------------------


def zero_band(matrices: EnergyMatrices) -> float:
    """Absolute Zero-classification threshold ``1e-7 ||A||_inf``."""
    return ZERO_BAND * matrices.norm_inf()


def _spectral_lower_bound(matrices: EnergyMatrices) -> float:
    """A number not exceeding the smallest relative eigenvalue."""
    ex = matrices.mesh.exponents
    base = matrices.base
    H = base.background.H_boundary
    m = min(0.0, ex.c_n * float(base.background.R.min()), ex.h_n * float(H.min()) if H.size else 0.0)
    u = matrices.factor
    if u is not None and m < 0:
        # ||u phi||^2 <= ||phi||~^2 / min(u)^(nat-2) on each measure
        umin = float(u.min())
        m *= max(umin ** -(ex.q_critical - 2), umin ** -(ex.r_critical - 2), 1.0)
    return m


def _empty_eigen(N):
    return EigenResult(math.inf, np.zeros(N), 0.0, 0, "empty-constraint-set", 0)


def relative_eigenvalue(matrices: EnergyMatrices, region: RegionPair) -> EigenResult:
    """Smallest eigenpair of ``A x = lambda (M + S) x`` on the active DOFs.

    The eigenfield is returned on all vertices (zero off the active set),
    normalized to unit ``M + S`` norm with nonnegative sum.  An empty active
    set gives ``lambda = +inf`` and status ``empty-constraint-set``.
    """
    mesh = matrices.mesh
    N = mesh.n_vertices
    dofs = active_dofs(mesh, region)
    if dofs.size == 0:
        return _empty_eigen(N)
    A = matrices.A[dofs][:, dofs].tocsc()
    B = (matrices.M + matrices.S)[dofs][:, dofs].tocsc()
    iterations = 1
    if dofs.size <= _DENSE_LIMIT:
        w, V = eigh(A.toarray(), B.toarray(), subset_by_index=[0, 0])
        lam, x = float(w[0]), V[:, 0]
    else:
        sigma = _spectral_lower_bound(matrices) - 1.0
        w, V = eigsh(A, k=1, M=B, sigma=sigma, which="LM", v0=np.ones(dofs.size), tol=1e-12)
        lam, x = float(w[0]), V[:, 0]
    bnorm = math.sqrt(float(x @ (B @ x)))
    x = x / bnorm
    if x.sum() < 0:
        x = -x
    res = float(np.linalg.norm(A @ x - lam * (B @ x)))
    if res > 1e-8 * max(1.0, abs(lam)):
        log.warning("eigen residual %.3e above contract", res)
    lam = float(x @ (A @ x))  # Rayleigh quotient of the normalized field
    full = np.zeros(N)
    full[dofs] = x
    return EigenResult(lam, full, res, iterations, "converged", int(dofs.size))


def yamabe_sign(matrices: EnergyMatrices, region: RegionPair, tol: float | None = None) -> tuple[Sign, EigenResult]:
    """Classify ``(Omega, Sigma)`` by the sign of its relative eigenvalue.

    ``tol`` is relative to ``||A||_inf``; default ``1e-7``.  An empty active
    set is Positive (the invariant is ``+inf``).
    """
    eig = relative_eigenvalue(matrices, region)
    band = (ZERO_BAND if tol is None else tol) * matrices.norm_inf()
    if eig.status == "empty-constraint-set" or eig.eigenvalue > band:
        return Sign.POSITIVE, eig
    if eig.eigenvalue < -band:
        return Sign.NEGATIVE, eig
    return Sign.ZERO, eig


# -- constrained minimization ---------------------------------------------


def yamabe_invariant(
    matrices: EnergyMatrices,
    region: RegionPair,
    spec: ConstraintSpec,
    *,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    initial=None,
) -> YamabeResult:
    """Minimize E over the constraint set ``B^{q,r}_b(Omega, Sigma)``.

    Each iteration takes a step along the projected gradient, maps nodal
    values to their absolute values and rescales onto the constraint set.
    The step is preconditioned by the Lagrangian Hessian restricted to the
    tangent space when that gives a descent direction, and by ``K + M + S``
    of the root background otherwise.  Armijo backtracking controls the
    decrease of E.

    Discrete minimizers may touch the bound ``phi >= 0``.  Nodes at zero
    whose gradient points outward are held there, and the stopping test is
    the preconditioned norm of the Euler-Lagrange residual
    ``A phi - lambda grad G(phi)`` on the remaining nodes.

    On a conformal background the preconditioner and the default start are
    pulled back by the factor, so the iterates are those of the root problem
    divided by ``u``.  The problem is not convex and the result is a local
    minimizer; at the critical pair on Yamabe-positive backgrounds distinct
    starts can concentrate at different corners.

    Parameters
    ----------
    initial : array, optional
        Starting field; defaults to the relative eigenfield of the root
        background divided by the conformal factor.

    Raises
    ------
    InvalidExponentsError
        For ``q <= r`` or exponents outside their ranges.  The critical
        ``q = 2 qbar`` is accepted.
    """
    spec.validate(matrices.n)
    mesh = matrices.mesh
    N = mesh.n_vertices
    dofs = active_dofs(mesh, region)
    if dofs.size == 0:
        return YamabeResult(math.inf, np.zeros(N), math.inf, 0, math.inf, "empty-constraint-set", spec)

    A = matrices.A[dofs][:, dofs].tocsr()
    # root values of the field are w * x; the preconditioner is pulled back
    # with the energy so that the iteration is conformally covariant
    root = matrices.base
    w = np.ones(dofs.size) if matrices.factor is None else matrices.factor[dofs]
    Dw = sparse.diags(w)
    P = (Dw @ (root.K + root.M + root.S)[dofs][:, dofs] @ Dw).tocsc()
    vq, bq = _region_quadratures(matrices, region, dofs)
    G = _Constraint(vq, bq, spec)
    factors = {}

    def solver(free):
        key = free.tobytes()
        if key not in factors:
            if len(factors) > 8:
                factors.clear()
            factors[key] = splu(P[free][:, free].tocsc())
        return factors[key]

    if initial is None:
        x = np.abs(relative_eigenvalue(root, region).eigenfield[dofs]) / w
        if not np.any(x > 0):
            x = 1.0 / w
    else:
        x = np.abs(np.asarray(initial, dtype=float)[dofs])
    x = G.scale(x)

    def multiplier(Ax, gG, free):
        lu = solver(free)
        pgG = lu.solve(gG[free])
        pgE = lu.solve(Ax[free])
        lam = float(gG[free] @ pgE) / float(gG[free] @ pgG)
        return lam, pgE - lam * pgG

    def state(x, eps):
        # nodes within eps of zero whose gradient points outward are held at
        # zero: the bound x >= 0 is active there
        Ax = A @ x
        _, gG = G.value_grad(x)
        low = w * x <= eps
        free = ~low if (~low).any() else np.ones_like(low)
        lam, _ = multiplier(Ax, gG, free)
        active = low & (Ax - lam * gG > 0)
        free = ~active
        if active.any():
            x = x.copy()
            x[active] = 0.0
            x = G.scale(x)
            Ax = A @ x
            _, gG = G.value_grad(x)
        lam, dF = multiplier(Ax, gG, free)
        res = Ax - lam * gG  # half the Lagrangian gradient
        res[active] = 0.0
        d = np.zeros_like(x)
        d[free] = dF
        rnorm = math.sqrt(max(float(res @ d), 0.0))
        return x, float(x @ Ax), lam, res, d, rnorm, free, gG

    def armijo(x, E, d, slope, t, min_t):
        while t >= min_t:
            y = G.scale(np.abs(x - t * d))
            Ey = float(y @ (A @ y))
            if np.isfinite(Ey) and Ey <= E - 2e-4 * t * slope + 1e-14 * abs(E):
                return y, t
            t *= 0.5
        return None, t

    def newton(x, lam, res, free, gG):
        H = (A - lam * G.hessian(x))[free][:, free]
        dF = _tangent_newton(H, gG[free], res[free])
        if dF is None:
            return None
        d = np.zeros_like(x)
        d[free] = dF
        return d

    x, E, lam, res, d, rnorm, free, gG = state(x, 1e-6 * float((w * x).max()))
    t = 0.5
    it = 0
    status = "max-iter"
    while it < max_iter:
        if rnorm <= tol:
            status = "converged"
            break
        it += 1
        y = None
        dn = newton(x, lam, res, free, gG)
        if dn is not None:
            y, _ = armijo(x, E, dn, float(res @ dn), 1.0, 1e-3)
        if y is None:
            y, t = armijo(x, E, d, rnorm**2, t, 1e-14)
            if y is None:
                status = "stagnated"
                break
            t = min(2.0 * t, 4.0)
        x, E, lam, res, d, rnorm, free, gG = state(y, min(1e-6, rnorm) * float((w * y).max()))

    a, s, _, _ = G.parts(x)
    full = np.zeros(N)
    full[dofs] = x
    value = float(full @ (matrices.A @ full))
    if status != "converged":
        log.info("yamabe minimization ended with status %s (residual %.3e)", status, rnorm)
    return YamabeResult(value, full, lam, it, rnorm, status, spec, a, s)


def require_converged(result) -> None:
    if result.status not in ("converged", "empty-constraint-set"):
        raise ConvergenceError(f"minimization {result.status}", iterations=result.iterations, residual=result.residual)
