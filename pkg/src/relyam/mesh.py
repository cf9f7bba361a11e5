"""Discrete compact 3-manifolds with boundary and their metric data.

A manifold is a :class:`SimplicialMesh` (vertices, positively oriented
tetrahedra and the outward-oriented boundary triangulation).  The metric is a
:class:`RiemannianBackground`: the handful of derived quantities the energy
functional consumes (element volumes, face areas, per-element inverse metrics
and the curvature fields R and H).

A background may also describe a conformal metric ``u^{4/(n-2)} g`` of a base
background ``g``.  In that case the stored weights and curvature fields are
the transformed (diagnostic) ones, and every integral is evaluated by pulling
back to the base through the nodal factor ``u``; see :mod:`relyam.assembly`.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import MeshError, MeshParseError

__all__ = [
    "SimplicialMesh",
    "RiemannianBackground",
    "Exponents",
    "exponents",
    "flat_background",
    "load_mesh",
    "save_mesh",
    "mesh_to_dict",
    "mesh_from_dict",
    "unit_cube",
    "unit_ball",
    "generate",
]

# local face k of a tetrahedron is the face opposite local vertex k
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


@dataclass(frozen=True)
class Exponents:
    """Dimension-dependent constants of the conformal Laplacian."""

    n: int

    @property
    def qbar(self) -> float:
        return self.n / (self.n - 2)

    @property
    def q_critical(self) -> float:
        """Critical Sobolev exponent ``2 qbar``."""
        return 2 * self.qbar

    @property
    def r_critical(self) -> float:
        """Critical trace exponent ``qbar + 1``."""
        return self.qbar + 1

    @property
    def c_n(self) -> float:
        """Coefficient of R in the energy, ``(n-2)/(4(n-1))``."""
        return (self.n - 2) / (4 * (self.n - 1))

    @property
    def h_n(self) -> float:
        """Coefficient of H in the energy, ``(n-2)/2``."""
        return (self.n - 2) / 2


def exponents(n: int = 3) -> Exponents:
    if n < 3:
        raise ValueError(f"dimension must be >= 3, got {n}")
    return Exponents(int(n))


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Tetrahedral mesh of a compact 3-manifold with boundary.

    Parameters
    ----------
    vertices : array_like, shape (N, 3)
    tets : array_like, shape (T, 4)
        Vertex indices, positively oriented.
    boundary_faces : array_like, shape (F, 3)
        Boundary triangles, oriented with outward normals.
    dimension : int
        Manifold dimension used for every exponent constant (geometry is 3D).
    """

    vertices: np.ndarray
    tets: np.ndarray
    boundary_faces: np.ndarray
    dimension: int = 3

    def __post_init__(self):
        object.__setattr__(self, "vertices", _readonly(self.vertices, float).reshape(-1, 3))
        object.__setattr__(self, "tets", _readonly(self.tets, np.int64).reshape(-1, 4))
        object.__setattr__(self, "boundary_faces", _readonly(self.boundary_faces, np.int64).reshape(-1, 3))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def n_faces(self) -> int:
        return len(self.boundary_faces)

    @property
    def exponents(self) -> Exponents:
        return exponents(self.dimension)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        """Sorted indices of vertices lying on a boundary face."""
        return _readonly(np.unique(self.boundary_faces), np.int64)

    @cached_property
    def is_boundary_vertex(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_vertices] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        X = self.vertices[self.tets]
        return _readonly(np.linalg.det(X[:, 1:] - X[:, :1]) / 6.0, float)

    @cached_property
    def face_areas(self) -> np.ndarray:
        X = self.vertices[self.boundary_faces]
        cr = np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0])
        return _readonly(0.5 * np.linalg.norm(cr, axis=1), float)

    @cached_property
    def face_normals(self) -> np.ndarray:
        """Unit normals of the boundary faces from their orientation."""
        X = self.vertices[self.boundary_faces]
        cr = np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0])
        return _readonly(cr / np.linalg.norm(cr, axis=1)[:, None], float)

    @cached_property
    def face_tets(self) -> np.ndarray:
        """Index of the tetrahedron owning each boundary face."""
        keys = np.sort(self.tets[:, _TET_FACES].reshape(-1, 3), axis=1)
        owner = np.repeat(np.arange(self.n_tets), 4)
        lookup = {tuple(k): t for k, t in zip(keys.tolist(), owner.tolist())}
        out = np.array([lookup.get(tuple(sorted(f)), -1) for f in self.boundary_faces.tolist()], dtype=np.int64)
        return _readonly(out, np.int64)

    @cached_property
    def vertex_tet_incidence(self) -> sparse.csr_matrix:
        """Sparse (N, T) 0/1 incidence of vertices in tetrahedra."""
        rows = self.tets.ravel()
        cols = np.repeat(np.arange(self.n_tets), 4)
        return sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_vertices, self.n_tets))

    @cached_property
    def vertex_face_incidence(self) -> sparse.csr_matrix:
        """Sparse (N, F) 0/1 incidence of vertices in boundary faces."""
        rows = self.boundary_faces.ravel()
        cols = np.repeat(np.arange(self.n_faces), 3)
        return sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_vertices, self.n_faces))

    @cached_property
    def vertex_adjacency(self) -> sparse.csr_matrix:
        """Symmetric vertex adjacency through tetrahedron edges."""
        inc = self.vertex_tet_incidence
        adj = (inc @ inc.T).tocsr()
        adj.setdiag(0)
        adj.eliminate_zeros()
        adj.data[:] = 1.0
        return adj

    def validate(self) -> None:
        """Check every structural invariant; raise :class:`MeshError` on the first failure."""
        N = self.n_vertices
        if self.dimension != 3:
            raise MeshError(f"only dimension 3 geometry is supported, got {self.dimension}")
        if not np.all(np.isfinite(self.vertices)):
            bad = int(np.flatnonzero(~np.isfinite(self.vertices).all(axis=1))[0])
            raise MeshError("non-finite vertex coordinate", "vertex", bad)
        for name, arr in (("tet", self.tets), ("boundary_face", self.boundary_faces)):
            out = (arr < 0) | (arr >= N)
            if out.any():
                raise MeshError("vertex index out of range", name, int(np.flatnonzero(out.any(axis=1))[0]))
            srt = np.sort(arr, axis=1)
            rep = (np.diff(srt, axis=1) == 0).any(axis=1)
            if rep.any():
                raise MeshError("repeated vertex in simplex", name, int(np.flatnonzero(rep)[0]))
        if self.n_tets == 0:
            raise MeshError("mesh has no tetrahedra")

        vol = self.signed_volumes
        if (vol <= 0).any():
            raise MeshError("tetrahedron has non-positive oriented volume", "tet", int(np.flatnonzero(vol <= 0)[0]))

        # faces of the tetrahedra: boundary faces are exactly those seen once
        tet_faces = np.sort(self.tets[:, _TET_FACES].reshape(-1, 3), axis=1)
        uniq, counts = np.unique(tet_faces, axis=0, return_counts=True)
        if (counts > 2).any():
            raise MeshError("non-manifold interior face shared by more than two tetrahedra")
        face_keys = np.sort(self.boundary_faces, axis=1)
        fu, finv, fcount = np.unique(face_keys, axis=0, return_inverse=True, return_counts=True)
        if (fcount > 1).any():
            dup = int(np.flatnonzero(fcount[finv.ravel()] > 1)[0])
            raise MeshError("boundary face listed twice", "boundary_face", dup)
        count_of = {tuple(k): c for k, c in zip(uniq.tolist(), counts.tolist())}
        for i, k in enumerate(face_keys.tolist()):
            c = count_of.get(tuple(k), 0)
            if c != 1:
                why = "is not a face of any tetrahedron" if c == 0 else "is shared by two tetrahedra"
                raise MeshError(f"boundary face {why}", "boundary_face", i)
        free = uniq[counts == 1]
        if len(free) != len(fu):
            listed = {tuple(k) for k in fu.tolist()}
            missing = next(k for k in free.tolist() if tuple(k) not in listed)
            t = int(np.flatnonzero((tet_faces == np.array(missing)).all(axis=1))[0] // 4)
            raise MeshError("tetrahedron has an unlisted free face", "tet", t)

        edges = np.sort(self.boundary_faces[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
        eu, einv, ecount = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
        if (ecount != 2).any():
            bad = int(np.flatnonzero(ecount[einv.ravel()] != 2)[0] // 3)
            raise MeshError("boundary is not a closed surface", "boundary_face", bad)

        tc = self.vertices[self.tets].mean(axis=1)
        fc = self.vertices[self.boundary_faces].mean(axis=1)
        owner = self.face_tets
        dots = np.einsum("ij,ij->i", self.face_normals, fc - tc[owner])
        if (dots <= 0).any():
            raise MeshError("boundary face is not outward oriented", "boundary_face", int(np.flatnonzero(dots <= 0)[0]))

        ncomp, labels = csgraph.connected_components(self.vertex_adjacency, directed=False)
        if ncomp != 1:
            raise MeshError("mesh is not connected", "vertex", int(np.flatnonzero(labels != labels[0])[0]))


@dataclass(frozen=True, eq=False)
class RiemannianBackground:
    """Discrete metric data on a :class:`SimplicialMesh`.

    Parameters
    ----------
    volume_weights : (T,) array
        Metric volume of each tetrahedron.
    area_weights : (F,) array
        Metric area of each boundary face.
    gradient_metrics : (T, 3, 3) array
        Inverse metric on each element, so that ``|grad f|^2_g = grad f . G grad f``.
    R : (N,) array
        Nodal scalar curvature.
    H_boundary : (B,) array
        Mean curvature at ``mesh.boundary_vertices`` (same order).
    conformal_factor, base
        When set, the background represents ``conformal_factor^{4/(n-2)} base``
        and all integrals are evaluated through the base.
    """

    volume_weights: np.ndarray
    area_weights: np.ndarray
    gradient_metrics: np.ndarray
    R: np.ndarray
    H_boundary: np.ndarray
    conformal_factor: np.ndarray | None = None
    base: RiemannianBackground | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "volume_weights", _readonly(self.volume_weights, float).ravel())
        object.__setattr__(self, "area_weights", _readonly(self.area_weights, float).ravel())
        object.__setattr__(self, "gradient_metrics", _readonly(self.gradient_metrics, float).reshape(-1, 3, 3))
        object.__setattr__(self, "R", _readonly(self.R, float).ravel())
        object.__setattr__(self, "H_boundary", _readonly(self.H_boundary, float).ravel())
        if self.conformal_factor is not None:
            object.__setattr__(self, "conformal_factor", _readonly(self.conformal_factor, float).ravel())
        if (self.conformal_factor is None) != (self.base is None):
            raise ValueError("conformal_factor and base must be given together")
        if self.base is not None and self.base.base is not None:
            raise ValueError("base background must itself be a root background")

    @property
    def is_conformal(self) -> bool:
        return self.base is not None

    @property
    def root(self) -> RiemannianBackground:
        """The base background all integrals are evaluated on."""
        return self.base if self.base is not None else self

    @property
    def factor(self) -> np.ndarray | None:
        return self.conformal_factor

    def H_nodal(self, mesh: SimplicialMesh) -> np.ndarray:
        """H as a full nodal array, zero on interior vertices."""
        out = np.zeros(mesh.n_vertices)
        out[mesh.boundary_vertices] = self.H_boundary
        return out

    def validate(self, mesh: SimplicialMesh) -> None:
        if self.volume_weights.shape != (mesh.n_tets,):
            raise MeshError(f"expected {mesh.n_tets} volume weights, got {self.volume_weights.size}")
        if self.area_weights.shape != (mesh.n_faces,):
            raise MeshError(f"expected {mesh.n_faces} area weights, got {self.area_weights.size}")
        if self.gradient_metrics.shape != (mesh.n_tets, 3, 3):
            raise MeshError(f"expected {mesh.n_tets} gradient metrics, got {len(self.gradient_metrics)}")
        if self.R.shape != (mesh.n_vertices,):
            raise MeshError(f"R must have one value per vertex ({mesh.n_vertices}), got {self.R.size}")
        if self.H_boundary.shape != (len(mesh.boundary_vertices),):
            raise MeshError(
                f"H must be defined exactly on the {len(mesh.boundary_vertices)} boundary vertices, "
                f"got {self.H_boundary.size} values"
            )
        bad = np.flatnonzero(~(self.volume_weights > 0))
        if bad.size:
            raise MeshError("volume weight must be strictly positive", "tet", int(bad[0]))
        bad = np.flatnonzero(~(self.area_weights > 0))
        if bad.size:
            raise MeshError("area weight must be strictly positive", "boundary_face", int(bad[0]))
        G = self.gradient_metrics
        asym = np.abs(G - np.swapaxes(G, 1, 2)).max(axis=(1, 2)) > 1e-12 * np.abs(G).max(axis=(1, 2))
        if asym.any():
            raise MeshError("gradient metric is not symmetric", "tet", int(np.flatnonzero(asym)[0]))
        if not np.all(np.isfinite(G)):
            raise MeshError("non-finite gradient metric", "tet", int(np.flatnonzero(~np.isfinite(G).all(axis=(1, 2)))[0]))
        lam = np.linalg.eigvalsh(G)[:, 0]
        if (lam <= 0).any():
            raise MeshError("gradient metric is not positive definite", "tet", int(np.flatnonzero(lam <= 0)[0]))
        for name, arr in (("R", self.R), ("H", self.H_boundary)):
            if not np.all(np.isfinite(arr)):
                raise MeshError(f"non-finite {name} value", "vertex", int(np.flatnonzero(~np.isfinite(arr))[0]))
        if self.base is not None:
            self.base.validate(mesh)
            if self.conformal_factor.shape != (mesh.n_vertices,):
                raise MeshError("conformal factor must have one value per vertex")
            bad = np.flatnonzero(~(self.conformal_factor > 0))
            if bad.size:
                raise MeshError("conformal factor must be strictly positive", "vertex", int(bad[0]))


def flat_background(mesh: SimplicialMesh, R0=0.0, H0=0.0) -> RiemannianBackground:
    """Euclidean metric of the embedded mesh with prescribed curvature fields.

    ``R0`` and ``H0`` may be scalars or nodal arrays (``H0`` either per vertex
    or per boundary vertex).
    """
    R = np.broadcast_to(np.asarray(R0, dtype=float), (mesh.n_vertices,)).copy()
    H0 = np.asarray(H0, dtype=float)
    if H0.ndim == 0:
        H = np.full(len(mesh.boundary_vertices), float(H0))
    elif H0.shape == (mesh.n_vertices,):
        H = H0[mesh.boundary_vertices]
    else:
        H = np.broadcast_to(H0, (len(mesh.boundary_vertices),)).copy()
    G = np.broadcast_to(np.eye(3), (mesh.n_tets, 3, 3))
    return RiemannianBackground(
        volume_weights=mesh.signed_volumes,
        area_weights=mesh.face_areas,
        gradient_metrics=G,
        R=R,
        H_boundary=H,
    )


# ---------------------------------------------------------------- file format

_SYM = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def _background_to_dict(mesh, bg):
    G = bg.gradient_metrics
    d = {
        "volume_weights": bg.volume_weights.tolist(),
        "area_weights": bg.area_weights.tolist(),
        "gradient_metrics": np.stack([G[:, i, j] for i, j in _SYM], axis=1).tolist(),
        "R": bg.R.tolist(),
        "H_boundary": {str(int(v)): float(h) for v, h in zip(mesh.boundary_vertices, bg.H_boundary)},
    }
    if bg.base is not None:
        d["conformal"] = {"factor": bg.conformal_factor.tolist(), "base": _background_to_dict(mesh, bg.base)}
    return d


def mesh_to_dict(mesh: SimplicialMesh, background: RiemannianBackground) -> dict:
    d = {
        "dimension": int(mesh.dimension),
        "vertices": mesh.vertices.tolist(),
        "tets": mesh.tets.tolist(),
        "boundary_faces": mesh.boundary_faces.tolist(),
    }
    d.update(_background_to_dict(mesh, background))
    return d


def _require(d, key):
    try:
        return d[key]
    except KeyError:
        raise MeshParseError(f"missing key {key!r}") from None


def _array(d, key, dtype, width=None):
    try:
        a = np.array(_require(d, key), dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise MeshParseError(f"malformed {key!r}: {exc}") from None
    if width is not None:
        if a.size == 0:
            a = a.reshape(0, width)
        if a.ndim != 2 or a.shape[1] != width:
            raise MeshParseError(f"{key!r} must be an array of length-{width} arrays")
    return a


def _background_from_dict(d, mesh):
    gm = _array(d, "gradient_metrics", float, 6)
    G = np.empty((len(gm), 3, 3))
    for k, (i, j) in enumerate(_SYM):
        G[:, i, j] = gm[:, k]
        G[:, j, i] = gm[:, k]
    Hd = _require(d, "H_boundary")
    if not isinstance(Hd, dict):
        raise MeshParseError("'H_boundary' must be an object mapping boundary vertex index to value")
    try:
        Hmap = {int(k): float(v) for k, v in Hd.items()}
    except (TypeError, ValueError) as exc:
        raise MeshParseError(f"malformed 'H_boundary': {exc}") from None
    bverts = mesh.boundary_vertices.tolist()
    extra = sorted(set(Hmap) - set(bverts))
    if extra:
        raise MeshError("H given on a non-boundary vertex", "vertex", extra[0])
    missing = [v for v in bverts if v not in Hmap]
    if missing:
        raise MeshError("H missing on boundary vertex", "vertex", missing[0])
    base = factor = None
    if "conformal" in d:
        c = d["conformal"]
        factor = _array(c, "factor", float)
        base = _background_from_dict(_require(c, "base"), mesh)
    return RiemannianBackground(
        volume_weights=_array(d, "volume_weights", float),
        area_weights=_array(d, "area_weights", float),
        gradient_metrics=G,
        R=_array(d, "R", float),
        H_boundary=np.array([Hmap[v] for v in bverts]),
        conformal_factor=factor,
        base=base,
    )


def mesh_from_dict(d: dict) -> tuple[SimplicialMesh, RiemannianBackground]:
    if not isinstance(d, dict):
        raise MeshParseError("mesh document must be a JSON object")
    dim = _require(d, "dimension")
    if not isinstance(dim, int):
        raise MeshParseError("'dimension' must be an integer")
    mesh = SimplicialMesh(
        vertices=_array(d, "vertices", float, 3),
        tets=_array(d, "tets", np.int64, 4),
        boundary_faces=_array(d, "boundary_faces", np.int64, 3),
        dimension=dim,
    )
    mesh.validate()
    bg = _background_from_dict(d, mesh)
    bg.validate(mesh)
    return mesh, bg


def load_mesh(path) -> tuple[SimplicialMesh, RiemannianBackground]:
    """Read and validate a mesh file."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"{path}: {exc}") from None
    return mesh_from_dict(d)


def save_mesh(path, mesh: SimplicialMesh, background: RiemannianBackground) -> None:
    Path(path).write_text(json.dumps(mesh_to_dict(mesh, background)) + "\n")


# ----------------------------------------------------------------- generators

def _freudenthal_cells(k):
    """Lattice tetrahedra of the Freudenthal triangulation of [0, k]^3."""
    E = np.eye(3, dtype=np.int64)
    g = np.arange(k)
    base = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    out = []
    for p in itertools.permutations(range(3)):
        v1 = base + E[p[0]]
        v2 = v1 + E[p[1]]
        out.append(np.stack([base, v1, v2, v2 + E[p[2]]], axis=1))
    return np.concatenate(out)


def _dedupe(points):
    """Merge coincident lattice points; return (unique points, tet indices)."""
    keys, inv = np.unique(points.reshape(-1, 3), axis=0, return_inverse=True)
    tets = inv.reshape(-1, 4)
    return keys, tets


def _assemble_mesh(vertices, tets):
    X = vertices[tets]
    vol = np.linalg.det(X[:, 1:] - X[:, :1])
    flip = vol < 0
    tets = tets.copy()
    tets[flip, 2], tets[flip, 3] = tets[flip, 3], tets[flip, 2].copy()
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    bfaces = faces[counts[inv.ravel()] == 1]
    # the local face table yields outward orientation for positive tets
    order = np.lexsort(np.sort(bfaces, axis=1).T[::-1])
    return SimplicialMesh(vertices, tets, bfaces[order])


def unit_cube(n: int = 1) -> SimplicialMesh:
    """Structured mesh of [0, 1]^3 with ``n`` cells per side, 6 tets per cell."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cells = _freudenthal_cells(n)
    pts, tets = _dedupe(cells)
    mesh = _assemble_mesh(pts.astype(float) / n, tets)
    mesh.validate()
    return mesh


def unit_ball(k: int = 4) -> SimplicialMesh:
    """Mesh of the unit ball from a refined octahedron.

    The solid octahedron ``|x|_1 <= 1`` is cut into ``8 k^3`` lattice
    tetrahedra and every vertex is moved radially so the ``l1`` shell of
    radius ``rho`` lands on the Euclidean sphere of radius ``rho``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cells = _freudenthal_cells(k)
    c = cells.mean(axis=1)
    # s1 < s2 < s3 <= k is the image of the positive octant corner simplex
    cells = cells[(c[:, 0] < c[:, 1]) & (c[:, 1] < c[:, 2])]
    oct_ = np.stack([cells[..., 2] - cells[..., 1], cells[..., 1] - cells[..., 0], cells[..., 0]], axis=-1)
    allc = np.concatenate([oct_ * np.array(s) for s in itertools.product([1, -1], repeat=3)])
    pts, tets = _dedupe(allc)
    p = pts.astype(float)
    l1 = np.abs(p).sum(axis=1)
    l2 = np.linalg.norm(p, axis=1)
    scale = np.divide(l1, l2, out=np.zeros_like(l1), where=l2 > 0) / k
    mesh = _assemble_mesh(p * scale[:, None], tets)
    mesh.validate()
    return mesh


def generate(shape: str, level: int) -> SimplicialMesh:
    """Canonical domains: ``cube`` has ``2^level`` cells per side, ``ball`` ``2^(level+1)`` shells."""
    if level < 0:
        raise ValueError("level must be >= 0")
    if shape == "cube":
        return unit_cube(2**level)
    if shape == "ball":
        return unit_ball(2 ** (level + 1))
    raise ValueError(f"unknown shape {shape!r}; expected 'cube' or 'ball'")
