"""Prescribed nonpositive scalar and boundary mean curvature.

Pipeline for a Yamabe-negative background ``g`` and targets ``R' <= 0``,
``H' <= 0``:

1. the solvability predicate classifies the zero sets ``(Z, Z_d)`` of the
   targets; the problem is solvable iff they form a Yamabe-positive pair;
2. ``g`` is normalized to ``g~ = phi0^(2qbar-2) g`` with negative scalar and
   boundary mean curvature, ``phi0`` a subcritical Yamabe minimizer;
3. ``F_{q,r}`` is minimized on ``g~`` along exponents increasing to the
   critical pair, warm-starting each stage;
4. the critical solution ``v`` on ``g~`` gives ``u = phi0 v`` on ``g``, and
   the curvatures of ``u^(2qbar-2) g`` are recovered and compared with the
   targets.

At the critical exponents ``F_g~(v) = F_g(phi0 v)`` holds exactly in the
discrete model, so step 4 involves no approximation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import splu

from .assembly import EnergyMatrices, Quadrature, _extend_to_boundary, assemble
from .errors import (
    ConvergenceError,
    NormalizationError,
    NotYamabeNegativeError,
    PositivityError,
    PreconditionError,
)
from .mesh import RiemannianBackground, SimplicialMesh
from .region import RegionPair, zero_set
from .variational import ConstraintSpec, Sign, yamabe_invariant, yamabe_sign

__all__ = [
    "TargetCurvatures",
    "LichnerowiczData",
    "StageRecord",
    "SolveResult",
    "Normalization",
    "PredicateResult",
    "PrescribeReport",
    "conformal_transform",
    "recover_curvatures",
    "prescribed_functional",
    "normalize_to_negative",
    "solve_subcritical",
    "default_schedule",
    "continuation_to_critical",
    "solvability_predicate",
    "solve_prescribed",
    "solve_lichnerowicz",
]

log = logging.getLogger(__name__)

BLOWUP = 1e6
COLLAPSE = 1e-6
NEWTON_MAX = 200


# -- data ------------------------------------------------------------------


def _boundary_values(mesh: SimplicialMesh, h, what: str) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.ndim == 0:
        return np.full(mesh.boundary_vertices.size, float(h))
    if h.shape == (mesh.n_vertices,):
        return h[mesh.boundary_vertices].copy()
    if h.shape != (mesh.boundary_vertices.size,):
        raise PreconditionError(f"{what} needs one value per boundary vertex ({mesh.boundary_vertices.size}), got {h.size}")
    return h


def _nodal_values(mesh: SimplicialMesh, f, what: str) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        return np.full(mesh.n_vertices, float(f))
    if f.shape != (mesh.n_vertices,):
        raise PreconditionError(f"{what} needs one value per vertex ({mesh.n_vertices}), got {f.size}")
    return f


def _check_sign(values, what, nodes, sign):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise PreconditionError(f"{what} is not finite at vertex {int(nodes[bad[0]])}")
    bad = np.flatnonzero(sign * values < 0)
    if bad.size:
        rel = "nonpositive" if sign < 0 else "nonnegative"
        raise PreconditionError(f"{what} must be {rel}; vertex {int(nodes[bad[0]])} has {values[bad[0]]!r}")


@dataclass(frozen=True, eq=False)
class TargetCurvatures:
    """Targets ``R'`` (per vertex) and ``H'`` (per boundary vertex), both ``<= 0``."""

    R: np.ndarray
    H: np.ndarray

    @classmethod
    def from_values(cls, mesh: SimplicialMesh, R, H) -> TargetCurvatures:
        Rv = _nodal_values(mesh, R, "R'")
        Hv = _boundary_values(mesh, H, "H'")
        _check_sign(Rv, "R'", np.arange(mesh.n_vertices), -1)
        _check_sign(Hv, "H'", mesh.boundary_vertices, -1)
        return cls(Rv, Hv)

    def H_nodal(self, mesh: SimplicialMesh) -> np.ndarray:
        out = np.zeros(mesh.n_vertices)
        out[mesh.boundary_vertices] = self.H
        return out


@dataclass(frozen=True, eq=False)
class LichnerowiczData:
    """Source weights ``a_w >= 0`` (per vertex) and ``b_w <= 0`` (per boundary vertex)."""

    a_w: np.ndarray
    b_w: np.ndarray

    @classmethod
    def from_values(cls, mesh: SimplicialMesh, a_w, b_w) -> LichnerowiczData:
        a = _nodal_values(mesh, a_w, "a_w")
        b = _boundary_values(mesh, b_w, "b_w")
        _check_sign(a, "a_w", np.arange(mesh.n_vertices), +1)
        _check_sign(b, "b_w", mesh.boundary_vertices, -1)
        return cls(a, b)


@dataclass(frozen=True)
class StageRecord:
    stage: int
    q: float
    r: float
    F: float
    residual: float
    min_u: float
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class SolveResult:
    u: np.ndarray
    value: float
    residual: float
    iterations: int


# -- conformal transformation ----------------------------------------------


def _recover(matrices: EnergyMatrices, w: np.ndarray):
    """Curvatures of ``w^(2qbar-2) g_root`` at all vertices and boundary vertices.

    Tested with hat functions, the transformation laws read
    ``(A w)_i = c_n int R~ w^(2qbar-1) psi_i + h_n int H~ w^qbar psi_i``.
    Interior rows give ``R~`` with the lumped mass; ``R~`` is extended to the
    boundary by interior-neighbour means and its volume part removed from the
    boundary rows, leaving ``H~`` over the lumped boundary mass.
    """
    base = matrices.base
    mesh = matrices.mesh
    ex = mesh.exponents
    root_bg = base.background
    bv = mesh.boundary_vertices
    if np.all(w == w[0]):
        return root_bg.R * w[0] ** (2 - ex.q_critical), root_bg.H_boundary * w[0] ** (1 - ex.qbar)
    Aw = base.A @ w
    interior = ~mesh.is_boundary_vertex
    wq = w ** (ex.q_critical - 1)
    R = np.full(mesh.n_vertices, np.nan)
    R[interior] = Aw[interior] / (ex.c_n * base.lumped_mass()[interior] * wq[interior])
    R = _extend_to_boundary(mesh, R)
    vol = base.M @ (R * wq)
    H = (Aw[bv] - ex.c_n * vol[bv]) / (ex.h_n * base.lumped_boundary_mass()[bv] * w[bv] ** ex.qbar)
    return R, H


def recover_curvatures(matrices: EnergyMatrices, u) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise ``(R~, H~)`` of ``u^(2qbar-2) g`` from the transformation laws.

    ``matrices`` may itself be conformal; the factor then composes with its
    own.  Boundary-vertex values of ``R~`` are interior-neighbour means and
    of lower accuracy.
    """
    u = np.asarray(u, dtype=float)
    total = u if matrices.factor is None else matrices.factor * u
    return _recover(matrices, total)


def _element_power(quad: Quadrature, plain_values, p):
    vals = (quad.plain @ plain_values) ** p * quad.weights
    return np.bincount(quad.cell, weights=vals, minlength=quad.cell.max() + 1)


def conformal_transform(
    background: RiemannianBackground, matrices: EnergyMatrices, u
) -> tuple[RiemannianBackground, EnergyMatrices]:
    """Background and matrices of ``g~ = u^(2qbar-2) g``.

    Energy and norms use the pullback (``A~ = D A D``); the stored weights,
    gradient metrics and curvature fields are diagnostics: weights are the
    element quadratures of ``u^(2qbar)`` and ``u^(qbar+1)`` against the root
    measures, and ``R~``, ``H~`` come from :func:`recover_curvatures`.  In
    the interior this is ``u^(1-2qbar)(-4(n-1)/(n-2) Lap u + R u)`` with the
    lumped weak Laplacian and ``R u`` averaged against hat functions.

    Raises
    ------
    PreconditionError
        If ``u`` has the wrong length, a non-finite or a nonpositive value.
    """
    mesh = matrices.mesh
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise PreconditionError(f"factor needs {mesh.n_vertices} values, got {u.size}")
    bad = np.flatnonzero(~(np.isfinite(u) & (u > 0)))
    if bad.size:
        raise PreconditionError(f"conformal factor must be positive; vertex {int(bad[0])} has {u[bad[0]]!r}")
    if np.all(u == 1.0):
        return background, matrices
    total = u if background.conformal_factor is None else background.conformal_factor * u
    root_bg = background.root
    base = matrices.base
    ex = mesh.exponents
    vq, bq = base.volume_quadrature, base.boundary_quadrature
    vol = _element_power(vq, total, ex.q_critical)
    area = _element_power(bq, total, ex.r_critical)
    # inverse metric scales like u^(-(2qbar-2)); element mean of u used
    mean_u = np.mean(total[mesh.tets], axis=1)
    metrics = root_bg.gradient_metrics * mean_u[:, None, None] ** (2 - ex.q_critical)
    R, H = _recover(base, total)
    new_bg = RiemannianBackground(
        volume_weights=vol,
        area_weights=area,
        gradient_metrics=metrics,
        R=R,
        H_boundary=H,
        conformal_factor=total,
        base=root_bg,
    )
    return new_bg, assemble(mesh, new_bg, root_matrices=base)


# -- nonlinear functionals ---------------------------------------------------


class _Functional:
    """``Phi(u) = u^T A u + sum_k c_k int d_k |u|^p_k``.

    ``value``/``gradient`` refer to Phi; the weak residual is ``grad Phi / 2``.
    """

    def __init__(self, matrices: EnergyMatrices, terms):
        self.A = matrices.A
        self.terms = [t for t in terms if t[3] != 0 and np.any(t[1] != 0)]

    def value_grad(self, u):
        Au = self.A @ u
        val = float(u @ Au)
        grad = 2.0 * Au
        for quad, data, p, c in self.terms:
            v, g = quad.power_integral(u, p, data)
            val += c * v
            grad += c * g
        return val, grad

    def value(self, u):
        val = float(u @ (self.A @ u))
        for quad, data, p, c in self.terms:
            val += c * quad.power_integral(u, p, data)[0]
        return val

    def hessian(self, u):
        H = 2.0 * self.A
        for quad, data, p, c in self.terms:
            H = H + c * quad.power_hessian(u, p, data)
        return H.tocsc()


def _f_terms(matrices: EnergyMatrices, targets: TargetCurvatures, q: float, r: float):
    ex = matrices.mesh.exponents
    return [
        (matrices.volume_quadrature, targets.R, q, -2.0 * ex.c_n / q),
        (matrices.boundary_quadrature, targets.H_nodal(matrices.mesh), r, -2.0 * ex.h_n / r),
    ]


def _lich_terms(matrices: EnergyMatrices, lich: LichnerowiczData):
    ex = matrices.mesh.exponents
    bw = np.zeros(matrices.mesh.n_vertices)
    bw[matrices.mesh.boundary_vertices] = lich.b_w
    return [
        (matrices.volume_quadrature, lich.a_w, -ex.q_critical, 1.0 / ex.qbar),
        (matrices.boundary_quadrature, bw, 1.0 - ex.qbar, 2.0 / (1.0 - ex.qbar)),
    ]


def prescribed_functional(matrices: EnergyMatrices, targets: TargetCurvatures, u, q: float, r: float):
    """Value and gradient of ``F_{q,r}(u)``.

    ``F = E(u) - int (n-2)/(2q(n-1)) R'|u|^q - int (n-2)/r H'|u|^r``; its
    half-gradient is the weak residual of the subcritical system.
    """
    return _Functional(matrices, _f_terms(matrices, targets, q, r)).value_grad(np.asarray(u, dtype=float))


def _dual_norm_solver(matrices: EnergyMatrices):
    P = (matrices.base.K + matrices.M + matrices.S).tocsc()
    return splu(P)


def _residual_norm(lu, res):
    return math.sqrt(max(float(res @ lu.solve(res)), 0.0))


def _newton(fun: _Functional, lu, u0, tol, max_iter=NEWTON_MAX, label=""):
    """Damped Newton on ``grad Phi = 0`` keeping every nodal value positive."""
    u = np.array(u0, dtype=float)
    if np.any(u <= 0):
        raise PositivityError(f"{label}initial guess must be positive")
    F, g = fun.value_grad(u)
    res = 0.5 * g
    rn = _residual_norm(lu, res)
    t_grad = 1.0
    for it in range(max_iter + 1):
        if rn <= tol:
            return SolveResult(u, F, rn, it)
        if it == max_iter:
            break
        d = None
        try:
            cand = splu(fun.hessian(u)).solve(g)
            if np.all(np.isfinite(cand)) and float(g @ cand) > 0:
                d = cand
        except RuntimeError:
            pass
        tries = [(d, 1.0)] if d is not None else []
        tries.append((lu.solve(g), None))
        accepted = False
        for direction, t0 in tries:
            t = t_grad if t0 is None else t0
            pos = direction > 0
            if np.any(pos):
                t = min(t, 0.9 * float(np.min(u[pos] / direction[pos])))
            slope = float(g @ direction)
            while t > 1e-16:
                un = u - t * direction
                Fn = fun.value(un)
                if np.isfinite(Fn) and Fn <= F - 1e-4 * t * slope + 1e-14 * abs(F):
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                if t0 is None:
                    t_grad = min(4.0 * t, 1e6)
                break
        if not accepted:
            raise ConvergenceError(f"{label}line search failed", iterations=it, residual=rn)
        u = un
        if np.max(u) < COLLAPSE:
            raise ConvergenceError(f"{label}iterates collapse to the trivial solution u = 0", iterations=it, residual=rn)
        if np.max(u) > BLOWUP:
            raise ConvergenceError(f"{label}iterates unbounded (max u > {BLOWUP:g}); functional unbounded below", iterations=it, residual=rn)
        if np.min(u) <= 0:
            raise PositivityError(f"{label}positivity lost", iterations=it, residual=rn)
        F, g = fun.value_grad(u)
        res = 0.5 * g
        rn = _residual_norm(lu, res)
    raise ConvergenceError(f"{label}no convergence in {max_iter} Newton steps", iterations=max_iter, residual=rn)


def solve_subcritical(
    matrices: EnergyMatrices,
    targets: TargetCurvatures,
    q: float,
    r: float,
    warm_start=None,
    *,
    tol: float = 1e-9,
    max_iter: int = NEWTON_MAX,
) -> SolveResult:
    """Minimize ``F_{q,r}`` by positivity-preserving damped Newton.

    The residual is the ``(K + M + S)^{-1}`` dual norm of the weak
    Euler-Lagrange residual ``grad F / 2``.  Newton steps that are not
    descent directions are replaced by preconditioned gradient steps.

    Raises
    ------
    ConvergenceError
        After ``max_iter`` steps, on a failed line search, or when the
        iterates grow without bound (``F`` unbounded below).
    """
    if not (r >= 2 and q > r):
        raise PreconditionError(f"need q > r >= 2, got q={q}, r={r}")
    u0 = np.ones(matrices.mesh.n_vertices) if warm_start is None else warm_start
    fun = _Functional(matrices, _f_terms(matrices, targets, q, r))
    return _newton(fun, _dual_norm_solver(matrices), u0, tol, max_iter, label=f"(q={q:g}, r={r:g}) ")


def default_schedule(n: int = 3, stages: int = 8, first: int = 2) -> list[tuple[float, float]]:
    """Geometric exponents plus the critical pair.

    ``q_k = 2qbar - 2^(1-k)(2qbar-4)``, ``r_k = qbar+1 - 2^(1-k)(qbar-1)`` for
    ``k = first .. first+stages-1``.  The default ``first = 2`` skips
    ``r_1 = 2``, where the boundary target term is quadratic and can make
    ``u = 0`` the minimizer.
    """
    qbar = n / (n - 2)
    out = []
    for k in range(first, first + stages):
        f = 2.0 ** (1 - k)
        out.append((2 * qbar - f * (2 * qbar - 4), qbar + 1 - f * (qbar - 1)))
    out.append((2 * qbar, qbar + 1))
    return out


@dataclass(frozen=True, eq=False)
class ContinuationResult:
    u: np.ndarray
    trace: list[StageRecord]
    residual: float


def continuation_to_critical(
    matrices: EnergyMatrices,
    targets: TargetCurvatures,
    schedule=None,
    warm_start=None,
    *,
    tol: float = 1e-9,
) -> ContinuationResult:
    """Solve along ``schedule`` (default :func:`default_schedule`), warm-starting each stage.

    Raises
    ------
    ConvergenceError
        Naming the failing ``(q_k, r_k)``.
    """
    sched = default_schedule(matrices.n) if schedule is None else list(schedule)
    u = np.ones(matrices.mesh.n_vertices) if warm_start is None else np.asarray(warm_start, dtype=float)
    trace = []
    res = math.inf
    for k, (q, r) in enumerate(sched, start=1):
        try:
            sol = solve_subcritical(matrices, targets, q, r, u, tol=tol)
        except ConvergenceError as exc:
            raise type(exc)(f"stage {k} (q={q!r}, r={r!r}) failed: {exc}", iterations=exc.iterations, residual=exc.residual) from exc
        u = sol.u
        res = sol.residual
        trace.append(StageRecord(k, q, r, sol.value, sol.residual, float(u.min()), sol.iterations))
        log.info("stage %d q=%.6g r=%.6g F=%.12g residual=%.3e", k, q, r, sol.value, sol.residual)
    return ContinuationResult(u, trace, res)


# -- predicate and normalization ------------------------------------------


@dataclass(frozen=True, eq=False)
class PredicateResult:
    value: bool
    sign: Sign
    eigenvalue: float
    zero_region: RegionPair
    explanation: str


def _require_negative(matrices: EnergyMatrices):
    sign, eig = yamabe_sign(matrices, RegionPair.full(matrices.mesh))
    if sign is not Sign.NEGATIVE:
        raise NotYamabeNegativeError(
            f"background is Yamabe-{sign.value.lower()} (relative eigenvalue {eig.eigenvalue!r}); "
            "the prescription theorem needs a Yamabe-negative manifold"
        )
    return eig


def solvability_predicate(
    matrices: EnergyMatrices, targets: TargetCurvatures, tol: float | None = None
) -> PredicateResult:
    """Whether ``(Z, Z_d)`` of the targets is Yamabe positive.

    Raises
    ------
    NotYamabeNegativeError
        If the background itself is not Yamabe negative.
    """
    _require_negative(matrices)
    mesh = matrices.mesh
    Z = zero_set(mesh, targets.R, targets.H, tol)
    if Z.omega.size == 0:
        return PredicateResult(True, Sign.POSITIVE, math.inf, Z, "Z has measure zero: solvable for any H' <= 0")
    note = ""
    closure = np.unique(mesh.tets[Z.omega])
    if Z.sigma.size and not np.isin(mesh.boundary_faces[Z.sigma], closure).any():
        Z_eval = RegionPair(Z.omega, [])
        note = "Z_d is disjoint from the closure of Z, so (Z, Z_d) reduces to (Z, empty); "
    else:
        Z_eval = Z
    sign, eig = yamabe_sign(matrices, Z_eval)
    value = sign is Sign.POSITIVE
    expl = (
        f"{note}zero set has {Z.omega.size} elements and {Z.sigma.size} boundary faces; "
        f"relative eigenvalue {eig.eigenvalue!r} -> {sign.value}; "
        + ("solvable" if value else "no solution exists")
    )
    return PredicateResult(value, sign, eig.eigenvalue, Z, expl)


@dataclass(frozen=True, eq=False)
class Normalization:
    factor: np.ndarray
    background: RiemannianBackground
    matrices: EnergyMatrices
    multiplier: float
    value: float
    R_max: float
    H_max: float
    condition: float


def normalize_to_negative(
    matrices: EnergyMatrices,
    spec: ConstraintSpec | None = None,
    *,
    band: float = 1e-8,
) -> Normalization:
    """Conformal change to negative scalar and boundary mean curvature.

    Minimizes the subcritical Yamabe functional on the full region (default
    ``(q, r, b) = (4, 3, 1)``) and transforms by the minimizer.  The curvature
    laws give ``R~ = 4 lambda q (n-1)/(n-2) phi^(q-2qbar)`` and
    ``H~ = 2 lambda b r/(n-2) phi^(r-qbar-1)``, so a negative multiplier
    with ``b > 0`` makes both negative.

    Raises
    ------
    NotYamabeNegativeError
        If the full region does not classify as Negative.
    NormalizationError
        If the minimization fails, the multiplier is not negative, or a
        recovered curvature exceeds ``band`` (names the offending vertex).
    """
    mesh = matrices.mesh
    _require_negative(matrices)
    spec = ConstraintSpec(4.0, 3.0, 1.0) if spec is None else spec
    if not spec.is_subcritical(matrices.n):
        raise PreconditionError("normalization needs subcritical exponents")
    res = yamabe_invariant(matrices, RegionPair.full(mesh), spec)
    if res.status != "converged":
        raise NormalizationError(f"Yamabe minimization {res.status} (residual {res.residual:.3e})")
    if not res.multiplier < 0:
        raise NormalizationError(f"multiplier {res.multiplier!r} is not negative")
    phi = res.minimizer
    if np.any(phi <= 0):
        raise NormalizationError(f"minimizer vanishes at vertex {int(np.argmin(phi))}")
    bg, mats = conformal_transform(matrices.background, matrices, phi)
    interior = np.flatnonzero(~mesh.is_boundary_vertex)
    Ri = bg.R[interior]
    if Ri.size and np.max(Ri) > band:
        k = int(np.argmax(Ri))
        raise NormalizationError(f"recovered scalar curvature {Ri[k]!r} > 0 at vertex {int(interior[k])}")
    if np.max(bg.H_boundary) > band:
        k = int(np.argmax(bg.H_boundary))
        raise NormalizationError(
            f"recovered mean curvature {bg.H_boundary[k]!r} > 0 at vertex {int(mesh.boundary_vertices[k])}"
        )
    # c_n int R~ + h_n int H~ is E_g~(1) = phi^T A phi
    condition = float(np.ones(mesh.n_vertices) @ (mats.A @ np.ones(mesh.n_vertices)))
    if not condition < 0:
        raise NormalizationError(f"integrated curvature condition fails: {condition!r} >= 0")
    return Normalization(
        phi,
        bg,
        mats,
        res.multiplier,
        res.value,
        float(np.max(Ri)) if Ri.size else -math.inf,
        float(np.max(bg.H_boundary)),
        condition,
    )


# -- full pipeline ---------------------------------------------------------


def _feature_vertices(mesh: SimplicialMesh, angle_deg: float = 30.0) -> np.ndarray:
    """Boundary vertices where incident face normals differ by more than ``angle_deg``."""
    vf = mesh.vertex_face_incidence.tocsr()
    normals = mesh.face_normals
    cos_tol = math.cos(math.radians(angle_deg))
    out = np.zeros(mesh.n_vertices, dtype=bool)
    for v in mesh.boundary_vertices:
        fs = vf.indices[vf.indptr[v] : vf.indptr[v + 1]]
        nn = normals[fs]
        out[v] = np.min(nn @ nn.T) < cos_tol
    return out


def verification_masks(mesh: SimplicialMesh):
    """Interior vertices off the boundary one-ring, boundary vertices off creases."""
    adj = mesh.vertex_adjacency
    near = (adj @ mesh.is_boundary_vertex.astype(np.int64)) > 0
    interior_ok = ~mesh.is_boundary_vertex & ~near
    feature = _feature_vertices(mesh)
    boundary_ok = ~feature[mesh.boundary_vertices]
    return interior_ok, boundary_ok


def verify_solution(matrices: EnergyMatrices, targets: TargetCurvatures, u) -> dict:
    """Recovered curvature deviations and the critical residual of ``u`` on ``g``."""
    mesh = matrices.mesh
    ex = mesh.exponents
    u = np.asarray(u, dtype=float)
    R, H = recover_curvatures(matrices, u)
    interior_ok, boundary_ok = verification_masks(mesh)
    dR = np.abs(R - targets.R)[interior_ok]
    dH = np.abs(H - targets.H)[boundary_ok]
    fun = _Functional(matrices, _f_terms(matrices, targets, ex.q_critical, ex.r_critical))
    _, g = fun.value_grad(u)
    res = _residual_norm(_dual_norm_solver(matrices), 0.5 * g)
    return {
        "critical_residual": res,
        "min_u": float(u.min()),
        "R_deviation_max": float(dR.max()) if dR.size else 0.0,
        "H_deviation_max": float(dH.max()) if dH.size else 0.0,
        "interior_checked": int(interior_ok.sum()),
        "interior_excluded": int((~interior_ok).sum() - mesh.boundary_vertices.size),
        "boundary_checked": int(boundary_ok.sum()),
        "boundary_excluded": int((~boundary_ok).sum()),
        "R_recovered": R,
        "H_recovered": H,
    }


@dataclass(frozen=True, eq=False)
class PrescribeReport:
    """Outcome of :func:`solve_prescribed`.

    ``status`` is ``converged``, ``no-solution-per-theorem`` or
    ``residual-above-tolerance``.
    """

    status: str
    solution: np.ndarray | None
    trace: list[StageRecord] = field(default_factory=list)
    predicate: PredicateResult | None = None
    normalization: dict | None = None
    verification: dict | None = None
    residual: float = math.nan

    def to_dict(self, include_fields: bool = True) -> dict:
        d = {
            "status": self.status,
            "residual": self.residual,
            "trace": [s.__dict__ for s in self.trace],
        }
        if self.predicate is not None:
            d["predicate"] = {
                "value": self.predicate.value,
                "sign": self.predicate.sign.value,
                "eigenvalue": self.predicate.eigenvalue,
                "zero_set": self.predicate.zero_region.to_dict(),
                "explanation": self.predicate.explanation,
            }
        if self.normalization is not None:
            d["normalization"] = dict(self.normalization)
        if self.verification is not None:
            v = {k: val for k, val in self.verification.items() if not isinstance(val, np.ndarray)}
            if include_fields:
                v["R_recovered"] = self.verification["R_recovered"].tolist()
                v["H_recovered"] = self.verification["H_recovered"].tolist()
            d["verification"] = v
        if self.solution is not None:
            d["solution"] = self.solution.tolist()
        return d


def solve_prescribed(
    mesh: SimplicialMesh,
    background: RiemannianBackground,
    targets: TargetCurvatures,
    *,
    stages: int = 8,
    tol: float = 1e-7,
    matrices: EnergyMatrices | None = None,
    normalization_spec: ConstraintSpec | None = None,
) -> PrescribeReport:
    """Find ``u > 0`` with ``u^(2qbar-2) g`` having curvatures ``(R', H')``.

    Returns a report with status ``no-solution-per-theorem`` when the zero
    sets of the targets are not Yamabe positive.

    Raises
    ------
    PreconditionError
        Bad targets.
    NotYamabeNegativeError
        Background not Yamabe negative.
    NormalizationError, ConvergenceError
        Failures of the normalization or a continuation stage.
    """
    mats = assemble(mesh, background) if matrices is None else matrices
    pred = solvability_predicate(mats, targets)
    if not pred.value:
        return PrescribeReport("no-solution-per-theorem", None, predicate=pred)
    norm = normalize_to_negative(mats, normalization_spec)
    cont = continuation_to_critical(norm.matrices, targets, default_schedule(mesh.dimension, stages))
    u = norm.factor * cont.u
    ver = verify_solution(mats, targets, u)
    status = "converged" if ver["critical_residual"] <= tol and ver["min_u"] > 0 else "residual-above-tolerance"
    ninfo = {
        "multiplier": norm.multiplier,
        "value": norm.value,
        "R_max": norm.R_max,
        "H_max": norm.H_max,
        "curvature_condition": norm.condition,
        "factor_min": float(norm.factor.min()),
        "factor_max": float(norm.factor.max()),
    }
    return PrescribeReport(status, u, cont.trace, pred, ninfo, ver, ver["critical_residual"])


def solve_lichnerowicz(
    matrices: EnergyMatrices,
    targets: TargetCurvatures,
    lich: LichnerowiczData,
    warm_start=None,
    *,
    tol: float = 1e-9,
    max_iter: int = NEWTON_MAX,
) -> SolveResult:
    """Solve the critical system with the extra ``a_w u^(-2qbar-1)`` and ``b_w u^(-qbar)`` sources.

    Minimizes ``F_crit(u) + int a_w u^(-2qbar)/qbar + int 2 b_w u^(1-qbar)/(1-qbar)``,
    whose half-gradient is the weak residual; both added terms are convex for
    ``a_w >= 0`` and ``b_w <= 0``.

    Raises
    ------
    NotYamabeNegativeError
        Background not Yamabe negative.
    ConvergenceError, PositivityError
        Solver failure.
    """
    _require_negative(matrices)
    ex = matrices.mesh.exponents
    terms = _f_terms(matrices, targets, ex.q_critical, ex.r_critical) + _lich_terms(matrices, lich)
    fun = _Functional(matrices, terms)
    u0 = np.ones(matrices.mesh.n_vertices) if warm_start is None else warm_start
    return _newton(fun, _dual_norm_solver(matrices), u0, tol, max_iter, label="lichnerowicz ")


def lichnerowicz_functional(matrices: EnergyMatrices, targets: TargetCurvatures, lich: LichnerowiczData, u):
    """Value and gradient of the Lichnerowicz potential."""
    ex = matrices.mesh.exponents
    terms = _f_terms(matrices, targets, ex.q_critical, ex.r_critical) + _lich_terms(matrices, lich)
    return _Functional(matrices, terms).value_grad(np.asarray(u, dtype=float))
