import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import dst_helmholtz, watson_green_origin

from perfhom.box import Box
from perfhom.errors import GridMismatchError
from perfhom.geometry import HoleSet
from perfhom.grid import HOLE, GridField, GridSpec, read_field, write_field
from perfhom.pde import (bump_forcing, constant_forcing, gradient_pairing, lattice_green_origin,
                         l2_norm, norms, solve_homogenized, solve_perforated, trapezoid_weights)

D = Box.cube(0.0, 1.0, 3)


def holes_at(centers, radii, eps=0.5, domain=D):
    c = np.asarray(centers, dtype=float).reshape(-1, domain.dim)
    r = np.broadcast_to(np.asarray(radii, dtype=float), (len(c),)).copy()
    return HoleSet(eps, domain, c, r, r, np.arange(len(c)))


def interior(a):
    return a[(slice(1, -1),) * a.ndim]


# ---------------------------------------------------------- homogenized


@pytest.mark.parametrize("c0", [0.0, 4 * math.pi, 250.0])
def test_homogenized_matches_sine_transform(c0):
    grid = GridSpec.covering(D, 1 / 24)
    f = np.random.default_rng(1).random(grid.shape)
    u, rep = solve_homogenized(c0, GridField(grid, f))
    exact = dst_helmholtz(interior(f), grid.h, c0)
    assert rep.final_relative_residual <= 1e-8
    assert np.max(np.abs(interior(u.values) - exact)) <= 1e-7 * np.max(np.abs(exact))
    assert np.all(u.values[0] == 0) and np.all(u.values[:, :, -1] == 0)


def test_homogenized_in_four_dimensions():
    grid = GridSpec.covering(Box.cube(0, 1, 4), 1 / 10)
    f = np.ones(grid.shape)
    u, _ = solve_homogenized(3.0, GridField(grid, f))
    assert np.max(np.abs(interior(u.values) - dst_helmholtz(interior(f), grid.h, 3.0))) <= 1e-8


def test_clean_poisson_converges_under_refinement():
    coarse, _ = solve_homogenized(0.0, constant_forcing(GridSpec.covering(D, 1 / 64)))
    fine, _ = solve_homogenized(0.0, constant_forcing(GridSpec.covering(D, 1 / 128)))
    assert coarse.values.max() == pytest.approx(fine.values.max(), rel=0.01)
    assert np.max(np.abs(coarse.values - fine.values[::2, ::2, ::2])) <= 0.01 * fine.values.max()


def test_large_reaction_limit():
    grid = GridSpec.covering(D, 1 / 32)
    u, _ = solve_homogenized(1e6, constant_forcing(grid))
    core = u.values[3:-3, 3:-3, 3:-3]
    assert np.all(np.abs(core - 1e-6) <= 0.05e-6)


def test_strange_term_lowers_the_solution():
    grid = GridSpec.covering(D, 1 / 32)
    u0, _ = solve_homogenized(0.0, constant_forcing(grid))
    u1, _ = solve_homogenized(4 * math.pi, constant_forcing(grid))
    assert np.all(interior(u1.values) < interior(u0.values))


def test_energy_identity():
    grid = GridSpec.covering(D, 1 / 32)
    f = bump_forcing(grid, D)
    c0, tol = 5.0, 1e-8
    u, _ = solve_homogenized(c0, f, tol=tol)
    n = norms(u, GridField(grid, np.zeros(grid.shape)))
    lhs = n.energy_u + c0 * math.fsum((trapezoid_weights(grid) * u.values**2).ravel())
    rhs = math.fsum((trapezoid_weights(grid) * f.values * u.values).ravel())
    assert abs(lhs - rhs) <= 10 * tol * abs(rhs)


def test_negative_c0_rejected():
    with pytest.raises(ValueError):
        solve_homogenized(-1.0, constant_forcing(GridSpec.covering(D, 1 / 8)))


# ----------------------------------------------------------- perforated


def test_forcing_grid_must_cover_domain():
    f = constant_forcing(GridSpec.covering(Box.cube(0, 2, 3), 1 / 8))
    with pytest.raises(GridMismatchError):
        solve_perforated(holes_at([[0.5, 0.5, 0.5]], 0.1), f)
    with pytest.raises(GridMismatchError):
        solve_perforated(holes_at([[0.5, 0.5, 0.5]], 0.1),
                         constant_forcing(GridSpec.covering(D, 1 / 8)), h=1 / 16)


def test_no_holes_equals_clean_solution():
    grid = GridSpec.covering(D, 1 / 32)
    u, _ = solve_perforated(holes_at(np.zeros((0, 3)), []), constant_forcing(grid))
    clean, _ = solve_homogenized(0.0, constant_forcing(grid))
    assert np.array_equal(u.values, clean.values)


def test_resolved_hole_is_exactly_zero():
    grid = GridSpec.covering(D, 1 / 32)
    u, rep = solve_perforated(holes_at([[0.5, 0.5, 0.5]], 0.2), constant_forcing(grid))
    x, y, z = np.meshgrid(*grid.axes(), indexing="ij")
    inside = (x - 0.5) ** 2 + (y - 0.5) ** 2 + (z - 0.5) ** 2 <= 0.04
    assert inside.sum() > 100
    assert np.all(u.values[inside] == 0.0) and np.all(u.mask[inside] == HOLE)
    assert rep.n_masked_holes == 1 and rep.final_relative_residual <= 1e-8


def test_penalty_mode_keeps_large_holes_masked():
    grid = GridSpec.covering(D, 1 / 32)
    holes = holes_at([[0.3, 0.3, 0.3], [0.7, 0.7, 0.7]], [0.2, 0.004])
    res, _ = solve_perforated(holes, constant_forcing(grid), mode="resolved")
    pen, rep = solve_perforated(holes, constant_forcing(grid), mode="capacity_penalty")
    assert rep.mode == "penalty" and rep.n_masked_holes == 1 and rep.n_penalized_holes == 1
    big = res.mask == HOLE
    assert np.all(pen.values[big] == 0.0)


def test_penalty_agrees_with_fine_resolved_solve():
    # one hole penalized at r = h/4 and resolved at r = 4.8 h, compared on the coarse nodes
    holes = holes_at([[0.5, 0.5, 0.5]], 0.03)
    gc, gf = GridSpec.covering(D, 1 / 8), GridSpec.covering(D, 1 / 160)
    pen, rep = solve_perforated(holes, constant_forcing(gc), mode="penalty")
    assert rep.n_penalized_holes == 1 and rep.n_saturated_holes == 0
    raw, _ = solve_perforated(holes, constant_forcing(gc), mode="penalty", lattice_correction=False)
    clean, _ = solve_homogenized(0.0, constant_forcing(gc))
    ref, _ = solve_perforated(holes, constant_forcing(gf), mode="resolved")
    sub = ref.values[::20, ::20, ::20]
    gap = {name: l2_norm(u.values - sub, gc) / l2_norm(sub, gc)
           for name, u in (("penalty", pen), ("raw", raw), ("clean", clean))}
    assert gap["penalty"] <= 0.05
    assert gap["penalty"] < gap["raw"] < gap["clean"]


def test_penalty_saturates_when_hole_is_wide_for_the_grid():
    grid = GridSpec.covering(D, 1 / 10)
    _, rep = solve_perforated(holes_at([[0.5, 0.5, 0.5]], 0.04), constant_forcing(grid),
                              mode="penalty")
    assert rep.n_saturated_holes == 1 and rep.n_masked_holes == 1


def test_lattice_green_function_value():
    assert lattice_green_origin(3) == pytest.approx(watson_green_origin(), rel=1e-12)


def test_symmetric_configuration_gives_symmetric_solution():
    grid = GridSpec.covering(D, 1 / 32)
    holes = holes_at([[0.25, 0.5, 0.5], [0.75, 0.5, 0.5], [0.5, 0.25, 0.5], [0.5, 0.75, 0.5]],
                     0.1)
    u, _ = solve_perforated(holes, constant_forcing(grid))
    v = u.values
    scale = np.max(np.abs(v))
    for w in (v[::-1], v[:, ::-1], np.swapaxes(v, 0, 1)):
        assert np.max(np.abs(v - w)) <= 1e-8 * scale * 10


def _random_holes(rng, n, rmin, rmax):
    c = rng.random((n, 3))
    r = rmin + (rmax - rmin) * rng.random(n)
    return c, r


def _error_bound(rep, f):
    # ||A^-1||_inf <= 1/8 on the unit cube (discrete slab barrier), ||r||_inf <= ||r||_2
    return rep.final_relative_residual * np.linalg.norm(f) / 8.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_maximum_principle_and_hole_monotonicity(seed):
    rng = np.random.default_rng(seed)
    grid = GridSpec.covering(D, 1 / 24)
    f = rng.random(grid.shape)
    c, r = _random_holes(rng, 12, 0.03, 0.12)
    few = holes_at(c[:6], r[:6])
    many = holes_at(c, r)
    u_few, rep_few = solve_perforated(few, GridField(grid, f))
    u_many, rep_many = solve_perforated(many, GridField(grid, f))
    b_few, b_many = _error_bound(rep_few, f), _error_bound(rep_many, f)
    assert u_few.values.min() >= -b_few and u_many.values.min() >= -b_many
    assert np.all(u_many.values <= u_few.values + b_few + b_many)


# ------------------------------------------------------------------ norms


def test_norms_of_identical_fields_vanish():
    grid = GridSpec.covering(D, 1 / 16)
    u = GridField(grid, np.random.default_rng(0).random(grid.shape))
    n = norms(u, u)
    assert n.l2_error == 0 and n.h1_seminorm_error == 0
    assert gradient_pairing(u, u, np.ones(grid.shape)) == 0


def test_unit_field_has_unit_l2_norm():
    grid = GridSpec.covering(D, 1 / 16)
    assert l2_norm(np.ones(grid.shape), grid) == pytest.approx(1.0, rel=1e-14)


def test_linear_ramp_seminorm():
    grid = GridSpec.covering(D, 1 / 16)
    x = np.broadcast_to(grid.axes()[0][:, None, None], grid.shape)
    n = norms(GridField(grid, x), GridField(grid, np.zeros(grid.shape)))
    # 16 unit-slope links in each of the 17 x 17 node columns, each weighted h^3
    assert n.h1_seminorm_error**2 == pytest.approx(17**2 * 16 / 16**3, rel=1e-12)


def test_norms_are_order_independent():
    grid = GridSpec.covering(D, 1 / 16)
    rng = np.random.default_rng(3)
    a, b = rng.random(grid.shape), rng.random(grid.shape)
    n1 = norms(GridField(grid, a), GridField(grid, b))
    n2 = norms(GridField(grid, a[::-1].copy()), GridField(grid, b[::-1].copy()))
    assert n1.l2_error == n2.l2_error


def test_norms_reject_mismatched_grids():
    a = GridField(GridSpec.covering(D, 1 / 8), np.zeros((9, 9, 9)))
    b = GridField(GridSpec.covering(D, 1 / 16), np.zeros((17, 17, 17)))
    with pytest.raises(GridMismatchError):
        norms(a, b)


# -------------------------------------------------------------------- I/O


def test_field_file_round_trip(tmp_path):
    grid = GridSpec((0.0, -1.0, 0.5), 0.125, (3, 4, 5))
    vals = np.random.default_rng(2).standard_normal(grid.shape)
    path = tmp_path / "u.field"
    write_field(GridField(grid, vals), path)
    back = read_field(path)
    assert back.grid == grid and np.array_equal(back.values, vals)
    assert path.read_text().splitlines()[0] == "3 0.125 3 4 5 0 -1 0.5"
