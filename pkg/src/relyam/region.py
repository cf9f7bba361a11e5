"""Pairs (Omega, Sigma) of interior elements and boundary faces.

Omega is a set of tetrahedron indices and Sigma a set of boundary-face
indices.  Fields in the relative space vanish outside Omega and have trace
vanishing outside Sigma; :func:`active_dofs` gives the vertices where such a
P1 field may be nonzero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mesh import SimplicialMesh

__all__ = ["RegionPair", "active_dofs", "zero_set", "is_nested", "parse_index_set"]


def _index_set(values, size, what):
    a = np.unique(np.asarray(values, dtype=np.int64).ravel())
    if a.size and (a[0] < 0 or (size is not None and a[-1] >= size)):
        bad = a[0] if a[0] < 0 else a[-1]
        raise ValueError(f"{what} index {bad} out of range [0, {size})")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RegionPair:
    """Sorted, deduplicated element and face index sets."""

    omega: np.ndarray
    sigma: np.ndarray

    def __init__(self, omega, sigma, mesh: SimplicialMesh | None = None):
        object.__setattr__(self, "omega", _index_set(omega, None if mesh is None else mesh.n_tets, "tetrahedron"))
        object.__setattr__(self, "sigma", _index_set(sigma, None if mesh is None else mesh.n_faces, "boundary face"))

    @classmethod
    def full(cls, mesh: SimplicialMesh) -> RegionPair:
        return cls(np.arange(mesh.n_tets), np.arange(mesh.n_faces))

    @classmethod
    def interior(cls, mesh: SimplicialMesh) -> RegionPair:
        """All elements, no boundary faces (the Dirichlet space)."""
        return cls(np.arange(mesh.n_tets), [])

    @classmethod
    def empty(cls) -> RegionPair:
        return cls([], [])

    def __eq__(self, other):
        if not isinstance(other, RegionPair):
            return NotImplemented
        return np.array_equal(self.omega, other.omega) and np.array_equal(self.sigma, other.sigma)

    def __hash__(self):
        return hash((self.omega.tobytes(), self.sigma.tobytes()))

    def to_dict(self) -> dict:
        return {"omega": self.omega.tolist(), "sigma": self.sigma.tolist()}


def active_dofs(mesh: SimplicialMesh, region: RegionPair) -> np.ndarray:
    """Vertices whose hat function lies in the relative space.

    A vertex is active iff every incident tetrahedron is in Omega and, for a
    boundary vertex, every incident boundary face is in Sigma.
    """
    in_omega = np.zeros(mesh.n_tets, dtype=bool)
    in_omega[region.omega] = True
    in_sigma = np.zeros(mesh.n_faces, dtype=bool)
    in_sigma[region.sigma] = True
    vt = mesh.vertex_tet_incidence
    vf = mesh.vertex_face_incidence
    tets_out = vt @ (~in_omega).astype(np.int64)
    faces_out = vf @ (~in_sigma).astype(np.int64)
    has_tet = np.asarray(vt.sum(axis=1)).ravel() > 0
    return np.flatnonzero((tets_out == 0) & (faces_out == 0) & has_tet)


def zero_set(mesh: SimplicialMesh, field, boundary_field, tol: float | None = None) -> RegionPair:
    """Closed discrete zero sets ``(Z, Z_d)`` of a pair of target fields.

    Parameters
    ----------
    field : (N,) array
        Interior target, one value per vertex.
    boundary_field : array
        Boundary target, per boundary vertex (ordered as
        ``mesh.boundary_vertices``) or per vertex.
    tol : float, optional
        Vanishing threshold; defaults to ``1e-9`` times the largest absolute
        value of the respective field.
    """
    f = np.asarray(field, dtype=float)
    h = np.asarray(boundary_field, dtype=float)
    if h.shape == (mesh.n_vertices,):
        h = h[mesh.boundary_vertices]
    if f.shape != (mesh.n_vertices,) or h.shape != (mesh.boundary_vertices.size,):
        raise ValueError("field sizes do not match the mesh")
    if tol is not None and tol < 0:
        raise ValueError("tol must be nonnegative")
    tf = 1e-9 * np.max(np.abs(f), initial=0.0) if tol is None else tol
    th = 1e-9 * np.max(np.abs(h), initial=0.0) if tol is None else tol
    zero_v = np.abs(f) <= tf
    hb = np.full(mesh.n_vertices, np.inf)
    hb[mesh.boundary_vertices] = h
    zero_b = np.abs(hb) <= th
    omega = np.flatnonzero(zero_v[mesh.tets].all(axis=1))
    sigma = np.flatnonzero(zero_b[mesh.boundary_faces].all(axis=1))
    return RegionPair(omega, sigma)


def is_nested(inner: RegionPair, outer: RegionPair) -> bool:
    """Componentwise set inclusion."""
    return bool(np.isin(inner.omega, outer.omega).all() and np.isin(inner.sigma, outer.sigma).all())


def parse_index_set(spec: str, size: int) -> np.ndarray:
    """``all``, ``none``, or the path of a JSON index array."""
    if spec == "all":
        return np.arange(size)
    if spec == "none":
        return np.array([], dtype=np.int64)
    with open(spec) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"{spec}: expected a JSON array of indices")
    return _index_set(data, size, "region")
