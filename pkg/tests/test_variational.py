from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import optimize

from conftest import flat_matrices, half_region, random_background
from relyam.assembly import assemble, energy, lq_norm_on_region, lr_norm_on_boundary
from relyam.errors import EmptyConstraintSetError, InvalidExponentsError, NoPositiveRootError
from relyam.mesh import unit_ball, unit_cube
from relyam.region import RegionPair, active_dofs
from relyam.variational import (
    ConstraintSpec,
    Sign,
    constraint_functional,
    constraint_root,
    energy_gradient,
    relative_eigenvalue,
    require_converged,
    scale_to_constraint,
    yamabe_invariant,
    yamabe_sign,
    zero_band,
)


def _bisect(a, b, q, r):
    # f is negative at 0 and increasing past its last sign change
    f = lambda x: a * x**q + b * x**r - 1.0
    hi = 1.0
    while f(hi) < 0:
        hi *= 2.0
    return optimize.bisect(f, 0.0 if b >= 0 else (-b / a) ** (1 / (q - r)), hi, xtol=1e-15)


# -- constraint root ---------------------------------------------------------


@pytest.mark.parametrize(
    "a, b, q, r, expected",
    [(1.0, 0.0, 4, 2, 1.0), (16.0, 0.0, 4, 2, 0.5), (1.0, 1.0, 4, 2, math.sqrt((math.sqrt(5) - 1) / 2))],
)
def test_constraint_root_examples(a, b, q, r, expected):
    assert constraint_root(a, b, q, r) == pytest.approx(expected, abs=1e-14)


def test_constraint_root_matches_bisection():
    rng = np.random.default_rng(0)
    for _ in range(200):
        r = rng.uniform(2, 4)
        q = rng.uniform(r + 0.2, 6)
        a = 10 ** rng.uniform(-1, 1)
        b = rng.uniform(-3, 3)
        assert constraint_root(a, b, q, r) == pytest.approx(_bisect(a, b, q, r), rel=1e-12)


def test_constraint_root_at_float_floor():
    # huge roots: the residual cannot beat the rounding of a x^q + b x^r
    rng = np.random.default_rng(1)
    for _ in range(500):
        r = rng.uniform(2, 4)
        q = rng.uniform(r + 0.01, 6)
        a = 10 ** rng.uniform(-1, 1)
        b = rng.uniform(-10, 10)
        try:
            x = constraint_root(a, b, q, r)
        except OverflowError:
            assert math.log(-b / a) / (q - r) > math.log(1e300) / 6
            continue
        floor = np.finfo(float).eps * (q * a * x**q + r * abs(b) * x**r)
        assert abs(a * x**q + b * x**r - 1) <= max(1e-12, 4 * floor)


def test_constraint_root_overflow():
    with pytest.raises(OverflowError):
        constraint_root(1e-3, -5.0, 3.001, 3.0)


def test_constraint_root_continuous_in_b():
    x0 = constraint_root(2.0, 0.3, 5, 3)
    for db in (1e-4, 1e-6, 1e-8):
        assert abs(constraint_root(2.0, 0.3 + db, 5, 3) - x0) < 10 * db


def test_constraint_root_equal_exponents():
    assert constraint_root(2.0, 2.0, 3, 3) == pytest.approx(4 ** (-1 / 3))
    with pytest.raises(NoPositiveRootError):
        constraint_root(1.0, -1.0, 3, 3)


@pytest.mark.parametrize("args", [(0.0, 1.0, 4, 2), (-1.0, 0.0, 4, 2), (1.0, 0.0, 2, 4), (1.0, 0.0, 4, 0.5)])
def test_constraint_root_rejects(args):
    with pytest.raises((ValueError, InvalidExponentsError)):
        constraint_root(*args)


# -- constraint spec ---------------------------------------------------------


def test_spec_ranges():
    assert ConstraintSpec(4, 3, 0).is_subcritical(3)
    assert not ConstraintSpec(6, 3, 0).is_subcritical(3)
    assert not ConstraintSpec(5, 4, 0).is_subcritical(3)
    for bad in [(7, 3, 0), (4, 4.5, 0), (3, 3, 0), (3, 4, 0), (1.5, 1.2, 0)]:
        with pytest.raises(InvalidExponentsError):
            ConstraintSpec(*bad).validate(3)


# -- scaling ------------------------------------------------------------------


def test_scale_to_constraint(cube4):
    mats = flat_matrices(cube4, -2.0, 0.5)
    full = RegionPair.full(cube4)
    rng = np.random.default_rng(0)
    spec = ConstraintSpec(4, 3, -1)
    phi = scale_to_constraint(rng.uniform(0.1, 2, cube4.n_vertices), spec, full, mats)
    g, _ = constraint_functional(mats, full, phi, spec)
    assert g == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(scale_to_constraint(phi, spec, full, mats), phi, rtol=1e-12)


def test_scale_constant_b0(cube4):
    mats = flat_matrices(cube4)
    spec = ConstraintSpec(5, 2, 0)
    phi = scale_to_constraint(np.full(cube4.n_vertices, 3.0), spec, RegionPair.full(cube4), mats)
    np.testing.assert_allclose(phi, 1.0, rtol=1e-12)  # vol = 1


def test_scale_zero_field(cube4):
    with pytest.raises(EmptyConstraintSetError):
        scale_to_constraint(np.zeros(cube4.n_vertices), ConstraintSpec(4, 3, 0), RegionPair.full(cube4), flat_matrices(cube4))


def test_homogeneity(cube4):
    rng = np.random.default_rng(2)
    mats = assemble(cube4, random_background(cube4, rng))
    phi = rng.normal(size=cube4.n_vertices)
    for k in (0.1, 3.0, 17.0):
        assert energy(mats, k * phi) == pytest.approx(k**2 * energy(mats, phi), rel=1e-13)


# -- eigenvalue and sign --------------------------------------------------------


def test_flat_cube_eigenvalue_is_zero(cube4):
    mats = flat_matrices(cube4)
    eig = relative_eigenvalue(mats, RegionPair.full(cube4))
    assert abs(eig.eigenvalue) < zero_band(mats)
    f = eig.eigenfield
    np.testing.assert_allclose(f, f.mean(), rtol=1e-6)


def test_negative_cube(cube4):
    mats = flat_matrices(cube4, -10.0)
    sign, eig = yamabe_sign(mats, RegionPair.full(cube4))
    assert sign is Sign.NEGATIVE and eig.eigenvalue < 0


def test_ball_with_mean_curvature_is_positive(ball8):
    sign, _ = yamabe_sign(flat_matrices(ball8, 0.0, 1.0), RegionPair.full(ball8))
    assert sign is Sign.POSITIVE


def test_empty_region_is_positive(cube1):
    mats = flat_matrices(cube1, -10.0)
    sign, eig = yamabe_sign(mats, RegionPair([0], []))
    assert sign is Sign.POSITIVE
    assert eig.status == "empty-constraint-set" and eig.eigenvalue == math.inf


def test_eigenfield_contract(cube4):
    rng = np.random.default_rng(4)
    mats = assemble(cube4, random_background(cube4, rng))
    region = half_region(cube4)
    eig = relative_eigenvalue(mats, region)
    dofs = active_dofs(cube4, region)
    outside = np.setdiff1d(np.arange(cube4.n_vertices), dofs)
    assert np.all(eig.eigenfield[outside] == 0)
    f = eig.eigenfield
    B = mats.M + mats.S
    assert eig.eigenvalue == pytest.approx(energy(mats, f) / float(f @ (B @ f)), rel=1e-10)


def test_rayleigh_quotient_scale_invariant(cube4):
    rng = np.random.default_rng(5)
    mats = assemble(cube4, random_background(cube4, rng))
    f = rng.normal(size=cube4.n_vertices)
    B = mats.M + mats.S
    Q = lambda v: energy(mats, v) / float(v @ (B @ v))
    for k in (1e-3, 2.0, 1e4):
        assert Q(k * f) == pytest.approx(Q(f), rel=1e-13)


def test_large_problem_uses_sparse_path():
    m = unit_ball(16)
    eig = relative_eigenvalue(flat_matrices(m), RegionPair.interior(m))
    assert eig.n_dofs > 500
    assert abs(eig.eigenvalue - math.pi**2) / math.pi**2 < 0.05


# -- minimization -----------------------------------------------------------------


def test_flat_cube_minimizer_is_constant(cube4):
    mats = flat_matrices(cube4)
    res = yamabe_invariant(mats, RegionPair.full(cube4), ConstraintSpec(4, 3, 0))
    assert res.status == "converged"
    assert abs(res.value) < 1e-10
    np.testing.assert_allclose(res.minimizer, 1.0, atol=1e-7)  # vol^(-1/q) = 1


def test_negative_cube_value(cube4):
    res = yamabe_invariant(flat_matrices(cube4, -10.0), RegionPair.full(cube4), ConstraintSpec(4, 3, 0))
    assert res.status == "converged" and res.value < 0
    # the constant is the minimizer: E(1) = -10/8 at ||1||_4 = 1
    assert res.value == pytest.approx(-10 / 8, rel=1e-9)


def test_ball_value_positive(ball8):
    res = yamabe_invariant(flat_matrices(ball8, 0.0, 1.0), RegionPair.full(ball8), ConstraintSpec(4, 3, 0))
    assert res.status == "converged" and res.value > 0


@pytest.mark.parametrize("spec", [ConstraintSpec(4, 3, -1), ConstraintSpec(4, 3, 1), ConstraintSpec(5, 2, 0)])
def test_minimizer_contract(cube4, spec):
    rng = np.random.default_rng(7)
    mats = assemble(cube4, random_background(cube4, rng))
    region = half_region(cube4)
    res = yamabe_invariant(mats, region, spec)
    require_converged(res)
    phi = res.minimizer
    assert phi.min() >= 0
    g, _ = constraint_functional(mats, region, phi, spec)
    assert g == pytest.approx(1.0, abs=1e-10)
    assert res.value == energy(mats, phi)
    a = lq_norm_on_region(mats, region, phi, spec.q)
    s = lr_norm_on_boundary(mats, region, phi, spec.r)
    ident = res.multiplier * (spec.q * a + spec.r * spec.b * s)
    assert abs(res.value - ident) <= 1e-6 * abs(res.value) + 1e-10
    outside = np.setdiff1d(np.arange(cube4.n_vertices), active_dofs(cube4, region))
    assert np.all(phi[outside] == 0)


def test_minimizer_is_local_minimum_at_bound():
    # on this instance one nodal value sits on the bound phi >= 0
    m = unit_cube(4)
    rng = np.random.default_rng(10)
    mats = assemble(m, random_background(m, rng))
    region = half_region(m)
    spec = ConstraintSpec(4, 3, -1)
    res = yamabe_invariant(mats, region, spec)
    assert res.status == "converged" and res.iterations < 100
    dofs = active_dofs(m, region)
    assert np.any(res.minimizer[dofs] == 0)
    for _ in range(50):
        p = res.minimizer.copy()
        p[dofs] = np.abs(p[dofs] + 1e-4 * rng.standard_normal(dofs.size))
        p = scale_to_constraint(p, spec, region, mats)
        assert energy(mats, p) >= res.value - 1e-12


def test_empty_constraint_set(cube1):
    res = yamabe_invariant(flat_matrices(cube1), RegionPair([0], []), ConstraintSpec(4, 3, 0))
    assert res.status == "empty-constraint-set" and res.value == math.inf
    require_converged(res)


def test_invalid_spec(cube1):
    with pytest.raises(InvalidExponentsError):
        yamabe_invariant(flat_matrices(cube1), RegionPair.full(cube1), ConstraintSpec(3, 3, 0))


def test_continuity_from_above():
    m = unit_cube(4)
    rng = np.random.default_rng(21)
    mats = assemble(m, random_background(m, rng, R_range=(-40.0, -20.0)))
    ct = m.vertices[m.tets].mean(axis=1)[:, 0]
    cf = m.vertices[m.boundary_faces].mean(axis=1)[:, 0]
    spec = ConstraintSpec(4, 3, 0)
    limit = RegionPair(np.flatnonzero(ct < 0.5), np.flatnonzero(cf < 0.5))
    chain = [RegionPair(np.flatnonzero(ct < c), np.flatnonzero(cf < c)) for c in (1.01, 0.8, 0.6)]
    vals = [yamabe_invariant(mats, r, spec).value for r in chain]
    target = yamabe_invariant(mats, limit, spec).value
    assert vals[0] <= vals[1] + 1e-6 <= vals[2] + 2e-6
    assert vals[2] <= target + 1e-6


# -- gradients --------------------------------------------------------------------


def _fd_check(f, grad, x, h=1e-5):
    fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)])
    return np.linalg.norm(fd - grad) / np.linalg.norm(grad)


def test_energy_gradient_fd():
    m = unit_cube(2)
    rng = np.random.default_rng(0)
    mats = assemble(m, random_background(m, rng))
    x = rng.normal(size=m.n_vertices)
    assert _fd_check(lambda v: energy(mats, v), energy_gradient(mats, x), x) < 1e-6


@pytest.mark.parametrize("spec", [ConstraintSpec(4, 3, -1), ConstraintSpec(6, 4, 2), ConstraintSpec(2.5, 2.2, 0.5)])
def test_constraint_gradient_fd(spec):
    m = unit_cube(2)
    rng = np.random.default_rng(1)
    mats = assemble(m, random_background(m, rng))
    region = RegionPair.full(m)
    x = rng.uniform(0.5, 2.0, m.n_vertices)
    _, g = constraint_functional(mats, region, x, spec)
    assert _fd_check(lambda v: constraint_functional(mats, region, v, spec)[0], g, x) < 1e-6
