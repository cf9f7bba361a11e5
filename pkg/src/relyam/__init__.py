"""Relative Yamabe invariants and prescribed nonpositive curvature on 3-manifolds with boundary."""

__version__ = "0.1.0"

from .assembly import EnergyMatrices, assemble, energy, lq_norm_on_region, lr_norm_on_boundary  # noqa: E402
from .mesh import RiemannianBackground, SimplicialMesh, flat_background, load_mesh, save_mesh  # noqa: E402
from .region import RegionPair, active_dofs, is_nested, zero_set  # noqa: E402
from .variational import (  # noqa: E402
    ConstraintSpec,
    Sign,
    constraint_root,
    relative_eigenvalue,
    scale_to_constraint,
    yamabe_invariant,
    yamabe_sign,
)

__all__ = [
    "ConstraintSpec",
    "EnergyMatrices",
    "RegionPair",
    "RiemannianBackground",
    "Sign",
    "SimplicialMesh",
    "active_dofs",
    "assemble",
    "constraint_root",
    "energy",
    "flat_background",
    "is_nested",
    "load_mesh",
    "lq_norm_on_region",
    "lr_norm_on_boundary",
    "relative_eigenvalue",
    "save_mesh",
    "scale_to_constraint",
    "yamabe_invariant",
    "yamabe_sign",
    "zero_set",
]
