from __future__ import annotations

import sys

import numpy as np
import pytest

from relyam.assembly import assemble
from relyam.mesh import flat_background, unit_ball, unit_cube


@pytest.fixture(scope="session")
def cube4():
    return unit_cube(4)


@pytest.fixture(scope="session")
def cube1():
    return unit_cube(1)


@pytest.fixture(scope="session")
def ball8():
    return unit_ball(8)


def flat_matrices(mesh, R0=0.0, H0=0.0):
    return assemble(mesh, flat_background(mesh, R0, H0))


def random_background(mesh, rng, R_range=(-30.0, 20.0), H_range=(-3.0, 3.0), R_amp=5.0, H_amp=1.0):
    """Noisy flat background around random constant curvatures."""
    R0 = rng.uniform(*R_range)
    H0 = rng.uniform(*H_range)
    R = R0 + R_amp * rng.uniform(-1.0, 1.0, mesh.n_vertices)
    H = H0 + H_amp * rng.uniform(-1.0, 1.0, mesh.boundary_vertices.size)
    return flat_background(mesh, R, H)


def half_region(mesh, axis=0, cut=0.5):
    """Elements and boundary faces with centroid below ``cut`` along ``axis``."""
    from relyam.region import RegionPair

    ct = mesh.vertices[mesh.tets].mean(axis=1)[:, axis]
    cf = mesh.vertices[mesh.boundary_faces].mean(axis=1)[:, axis]
    return RegionPair(np.flatnonzero(ct < cut), np.flatnonzero(cf < cut))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
