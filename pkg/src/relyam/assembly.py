"""Sparse P1 matrices, quadrature, and recovery operators.

Everything the variational and prescription solvers evaluate goes through an
:class:`EnergyMatrices` instance, which bundles the quadratic form of the
energy ``E(phi) = phi^T A phi`` with point quadratures for the nonlinear
``L^q`` terms.

For a conformal background ``u^{4/(n-2)} g`` the matrices are pulled back
from the base: ``A~ = D A D`` with ``D = diag(u)``, and the quadrature
interpolates ``u phi`` instead of ``phi``.  The ``L^q`` density of the
transformed measure is ``u^{2qbar} = |u|^q u^{2qbar - q}``, so the extra
point density ``u(x)^{2qbar - q}`` is one exactly at the critical exponent.
This keeps ``E_g~(phi) = E_g(u phi)`` and the critical constraint identities
exact in the discrete model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .mesh import RiemannianBackground, SimplicialMesh

__all__ = [
    "Quadrature",
    "EnergyMatrices",
    "assemble",
    "energy",
    "lq_norm_on_region",
    "lr_norm_on_boundary",
    "discrete_laplacian",
    "discrete_normal_derivative",
    "dump_coo",
]

# degree-2 rules: 4 points per tetrahedron, 3 per triangle (barycentric)
_A, _B = 0.5854101966249685, 0.1381966011250105
TET_POINTS = np.array([[_A, _B, _B, _B], [_B, _A, _B, _B], [_B, _B, _A, _B], [_B, _B, _B, _A]])
TRI_POINTS = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])

# integrals of lambda_i lambda_j lambda_k over a simplex divided by its measure
_TET_TRIPLE = {3: 1 / 20, 2: 1 / 60, 1: 1 / 120}
_TRI_TRIPLE = {3: 1 / 10, 2: 1 / 30, 1: 1 / 60}


def _triple_table(nv, table):
    # keyed by multiplicity of the most repeated index: 3, 2 or 1
    T = np.empty((nv, nv, nv))
    for i in range(nv):
        for j in range(nv):
            for k in range(nv):
                T[i, j, k] = table[4 - len({i, j, k})]
    return T


_TET_T = _triple_table(4, _TET_TRIPLE)
_TRI_T = _triple_table(3, _TRI_TRIPLE)


@dataclass(frozen=True, eq=False)
class Quadrature:
    """Point quadrature for integrals ``sum_p w_p rho_p^(nat-q) f(P phi)_p``.

    Attributes
    ----------
    interp : csr_matrix, shape (P, N)
        Maps a nodal field to its values at the quadrature points (for a
        conformal background this is the interpolant of ``u * phi``).
    plain : csr_matrix, shape (P, N)
        Interpolation of data fields (targets, weights), never scaled.
    weights : (P,) array
        Base measure of each point.
    cell : (P,) array
        Owning tetrahedron or boundary face of each point.
    density : (P,) array or None
        Conformal factor at the points; ``None`` on a root background.
    natural_exponent : float
        ``2 qbar`` for the volume rule, ``qbar + 1`` for the boundary rule.
    """

    interp: sparse.csr_matrix
    plain: sparse.csr_matrix
    weights: np.ndarray
    cell: np.ndarray
    density: np.ndarray | None
    natural_exponent: float

    def point_weights(self, q: float) -> np.ndarray:
        if self.density is None:
            return self.weights
        e = self.natural_exponent - q
        if e == 0:
            return self.weights
        return self.weights * self.density**e

    def restrict(self, cells: np.ndarray | None = None, dofs: np.ndarray | None = None) -> Quadrature:
        """Sub-rule on the points of ``cells`` acting on fields living on ``dofs``."""
        rows = np.arange(len(self.weights)) if cells is None else np.flatnonzero(np.isin(self.cell, cells))
        interp = self.interp[rows]
        plain = self.plain[rows]
        if dofs is not None:
            interp = interp[:, dofs]
        return Quadrature(
            interp=interp.tocsr(),
            plain=plain.tocsr(),
            weights=self.weights[rows],
            cell=self.cell[rows],
            density=None if self.density is None else self.density[rows],
            natural_exponent=self.natural_exponent,
        )

    def power_integral(self, phi, q, data=None):
        """``int data |phi|^q`` together with its gradient in ``phi``."""
        v = self.interp @ phi
        w = self.point_weights(q)
        if data is not None:
            w = w * (self.plain @ data)
        av = np.abs(v)
        val = float(np.dot(w, av**q))
        grad = self.interp.T @ (w * q * av ** (q - 1) * np.sign(v))
        return val, grad

    def power_hessian(self, phi, q, data=None) -> sparse.csr_matrix:
        v = self.interp @ phi
        w = self.point_weights(q)
        if data is not None:
            w = w * (self.plain @ data)
        d = w * q * (q - 1) * np.abs(v) ** (q - 2)
        return (self.interp.T @ sparse.diags(d) @ self.interp).tocsr()


@dataclass(frozen=True, eq=False)
class EnergyMatrices:
    """Assembled forms of a (mesh, background) pair.

    ``K``, ``M_R``, ``S_H`` and ``A = K + c_n M_R + (n-2)/2 S_H`` reproduce
    the energy; ``M`` and ``S`` are the L2 Gram matrices of the volume and
    boundary measures.  On a conformal background every matrix is the pulled
    back one (``D K D`` and so on) and ``root`` holds the base matrices.
    """

    mesh: SimplicialMesh
    background: RiemannianBackground
    K: sparse.csr_matrix
    M: sparse.csr_matrix
    S: sparse.csr_matrix
    M_R: sparse.csr_matrix
    S_H: sparse.csr_matrix
    A: sparse.csr_matrix
    volume_quadrature: Quadrature
    boundary_quadrature: Quadrature
    root: EnergyMatrices | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.mesh.dimension

    @property
    def base(self) -> EnergyMatrices:
        return self.root if self.root is not None else self

    @property
    def factor(self) -> np.ndarray | None:
        return self.background.conformal_factor

    def lumped_mass(self) -> np.ndarray:
        return np.asarray(self.base.M.sum(axis=1)).ravel()

    def lumped_boundary_mass(self) -> np.ndarray:
        return np.asarray(self.base.S.sum(axis=1)).ravel()

    def norm_inf(self) -> float:
        """Maximum absolute row sum of ``A``."""
        return float(np.abs(self.A).sum(axis=1).max())


def _coo(rows, cols, vals, shape):
    m = sparse.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()
    m.sum_duplicates()
    return m


def _symmetrize(local):
    return 0.5 * (local + np.swapaxes(local, -1, -2))


def _quadrature(simplices, nverts, rule, measures, natural):
    npts = len(rule)
    ns, k = simplices.shape
    rows = np.repeat(np.arange(ns * npts), k)
    cols = np.repeat(simplices, npts, axis=0).ravel()
    vals = np.tile(rule, (ns, 1)).ravel()
    P = sparse.csr_matrix((vals, (rows, cols)), shape=(ns * npts, nverts))
    w = np.repeat(measures, npts) / npts
    cell = np.repeat(np.arange(ns), npts)
    return Quadrature(interp=P, plain=P, weights=w, cell=cell, density=None, natural_exponent=natural)


def _gram(quad, exponent_shift=2.0):
    w = quad.point_weights(exponent_shift)
    return (quad.interp.T @ sparse.diags(w) @ quad.interp).tocsr()


def _assemble_root(mesh: SimplicialMesh, bg: RiemannianBackground) -> EnergyMatrices:
    ex = mesh.exponents
    N = mesh.n_vertices
    tets, faces = mesh.tets, mesh.boundary_faces

    X = mesh.vertices[tets]
    J = np.swapaxes(X[:, 1:] - X[:, :1], 1, 2)  # columns are edge vectors
    Jinv = np.linalg.inv(J)
    grads = np.concatenate([-Jinv.sum(axis=1, keepdims=True), Jinv], axis=1)  # (T, 4, 3)
    Kloc = np.einsum("tia,tab,tjb->tij", grads, bg.gradient_metrics, grads) * bg.volume_weights[:, None, None]
    Kloc = _symmetrize(Kloc)

    Rloc = np.einsum("ijk,tk->tij", _TET_T, bg.R[tets]) * bg.volume_weights[:, None, None]
    H = bg.H_nodal(mesh)
    Hloc = np.einsum("ijk,fk->fij", _TRI_T, H[faces]) * bg.area_weights[:, None, None]

    ti = np.repeat(tets, 4, axis=1)
    tj = np.tile(tets, (1, 4))
    fi = np.repeat(faces, 3, axis=1)
    fj = np.tile(faces, (1, 3))
    K = _coo(ti, tj, Kloc, (N, N))
    M_R = _coo(ti, tj, Rloc, (N, N))
    S_H = _coo(fi, fj, Hloc, (N, N))

    vq = _quadrature(tets, N, TET_POINTS, bg.volume_weights, ex.q_critical)
    bq = _quadrature(faces, N, TRI_POINTS, bg.area_weights, ex.r_critical)
    M = _gram(vq)
    S = _gram(bq)
    A = (K + ex.c_n * M_R + ex.h_n * S_H).tocsr()
    return EnergyMatrices(mesh, bg, K, M, S, M_R, S_H, A, vq, bq)


def _pullback_quadrature(q: Quadrature, u: np.ndarray) -> Quadrature:
    return Quadrature(
        interp=(q.plain @ sparse.diags(u)).tocsr(),
        plain=q.plain,
        weights=q.weights,
        cell=q.cell,
        density=q.plain @ u,
        natural_exponent=q.natural_exponent,
    )


def assemble(
    mesh: SimplicialMesh, background: RiemannianBackground, root_matrices: EnergyMatrices | None = None
) -> EnergyMatrices:
    """Assemble stiffness, mass and energy matrices.

    Deterministic: identical inputs give bit-identical matrices.

    Parameters
    ----------
    root_matrices : EnergyMatrices, optional
        Already assembled matrices of ``background.base``; reused for a
        conformal background instead of assembling the base again.
    """
    if not background.is_conformal:
        return _assemble_root(mesh, background)
    if root_matrices is not None and root_matrices.background is background.base:
        root = root_matrices
    else:
        root = _assemble_root(mesh, background.base)
    u = background.conformal_factor
    D = sparse.diags(u)

    def conj(m):
        return (D @ m @ D).tocsr()

    vq = _pullback_quadrature(root.volume_quadrature, u)
    bq = _pullback_quadrature(root.boundary_quadrature, u)
    return EnergyMatrices(
        mesh=mesh,
        background=background,
        K=conj(root.K),
        M=_gram(vq),
        S=_gram(bq),
        M_R=conj(root.M_R),
        S_H=conj(root.S_H),
        A=conj(root.A),
        volume_quadrature=vq,
        boundary_quadrature=bq,
        root=root,
    )


def energy(matrices: EnergyMatrices, phi) -> float:
    """Quadratic form ``phi^T A phi``."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (matrices.mesh.n_vertices,):
        raise ValueError(f"field has {phi.size} values, mesh has {matrices.mesh.n_vertices} vertices")
    return float(phi @ (matrices.A @ phi))


def lq_norm_on_region(matrices: EnergyMatrices, region, phi, q: float) -> float:
    """``int_Omega |phi|^q dV`` by the 4-point rule on the elements of Omega."""
    if q < 1:
        raise ValueError("q must be >= 1")
    quad = matrices.volume_quadrature.restrict(cells=region.omega)
    return quad.power_integral(np.asarray(phi, dtype=float), q)[0]


def lr_norm_on_boundary(matrices: EnergyMatrices, region, phi, r: float) -> float:
    """``int_Sigma |phi|^r dsigma`` by the 3-point rule on the faces of Sigma."""
    if r < 1:
        raise ValueError("r must be >= 1")
    quad = matrices.boundary_quadrature.restrict(cells=region.sigma)
    return quad.power_integral(np.asarray(phi, dtype=float), r)[0]


def discrete_laplacian(matrices: EnergyMatrices, u) -> np.ndarray:
    """Lumped-mass weak Laplacian ``-K u / m`` of the root metric.

    Boundary entries are NaN; the normal-derivative recovery handles them.
    """
    base = matrices.base
    u = np.asarray(u, dtype=float)
    y = -(base.K @ u) / matrices.lumped_mass()
    y[matrices.mesh.boundary_vertices] = np.nan
    return y


def _extend_to_boundary(mesh, lap):
    """Fill boundary entries with the mean over interior neighbours (0 if none)."""
    out = lap.copy()
    interior = ~mesh.is_boundary_vertex
    adj = mesh.vertex_adjacency[mesh.boundary_vertices][:, interior]
    vals = np.nan_to_num(lap[interior])
    cnt = np.asarray(adj.sum(axis=1)).ravel()
    tot = adj @ vals
    out[mesh.boundary_vertices] = np.divide(tot, cnt, out=np.zeros_like(tot), where=cnt > 0)
    return out


def discrete_normal_derivative(matrices: EnergyMatrices, u) -> np.ndarray:
    """Variational flux ``d_nu u`` at the boundary vertices (root metric).

    Uses Green's identity tested with each hat function,
    ``int_dM d_nu u psi = int grad u . grad psi + int (Lap u) psi``, with the
    interior Laplacian extended to boundary vertices, and divides by the
    lumped boundary mass.  Returns values ordered as ``mesh.boundary_vertices``.
    """
    base = matrices.base
    mesh = matrices.mesh
    u = np.asarray(u, dtype=float)
    lap = _extend_to_boundary(mesh, discrete_laplacian(matrices, u))
    flux = base.K @ u + base.M @ lap
    b = mesh.boundary_vertices
    return flux[b] / matrices.lumped_boundary_mass()[b]


def dump_coo(matrix: sparse.spmatrix, path) -> None:
    """Write ``row col value`` lines (zero-based, full precision)."""
    m = sparse.coo_matrix(matrix)
    order = np.lexsort((m.col, m.row))
    with open(path, "w") as fh:
        for i, j, v in zip(m.row[order], m.col[order], m.data[order]):
            fh.write(f"{int(i)} {int(j)} {float(v)!r}\n")
