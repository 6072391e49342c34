"""Finite-difference solvers for the perforated and homogenized Dirichlet problems.

Both problems use the (2d+1)-point Laplacian on a node grid whose outermost
nodes sit on the faces of the box domain and carry the boundary value 0.
The perforated problem either masks every node inside a hole (``resolved``)
or, for holes below a few grid spacings, replaces the hole by a point
absorption at the nearest node with the hole's capacity (``penalty``).

A single node with absorption coefficient k removes, seen from far away, the
capacity k / (1 + k g0 h^(2-d)), where g0 is the value at the origin of the
lattice Green's function of the unit stencil.  By default the coefficient is
chosen so that this effective capacity equals the hole's capacity; the raw
coefficient is available with ``lattice_correction=False``.
"""

from __future__ import annotations

import functools
import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .box import Box
from .capacity import annulus_capacity
from .errors import GridMismatchError
from .geometry import HoleSet
from .grid import (BOUNDARY, HOLE, INTERIOR, GridField, GridSpec, boundary_mask,
                   forward_differences, link_energy, mark_balls, solve_stencil)

log = logging.getLogger(__name__)

MODES = ("resolved", "penalty")


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_relative_residual: float
    wall_time: float
    mode: str
    n_masked_holes: int = 0
    n_penalized_holes: int = 0
    n_saturated_holes: int = 0


@functools.lru_cache(maxsize=None)
def lattice_green_origin(d: int) -> float:
    """G(0) for the operator 2d - (sum of unit shifts) on Z^d."""
    val, _ = integrate.quad(lambda t: special.ive(0, 2.0 * t) ** d, 0.0, np.inf,
                            limit=500, epsabs=1e-14, epsrel=1e-12)
    return val


def grid_for_domain(domain: Box, h: float) -> GridSpec:
    return GridSpec.covering(domain, h)


def constant_forcing(grid: GridSpec, value: float = 1.0) -> GridField:
    return GridField(grid, np.full(grid.shape, float(value)))


def bump(grid: GridSpec, domain: Box) -> np.ndarray:
    """prod_k sin^2(pi t_k), t the relative position in the domain."""
    out = np.ones(grid.shape)
    for x, lo, L in zip(grid.coords(tuple(slice(0, n) for n in grid.shape)), domain.lo,
                        domain.lengths):
        out = out * np.sin(np.pi * (x - lo) / L) ** 2
    return out


def bump_forcing(grid: GridSpec, domain: Box) -> GridField:
    return GridField(grid, bump(grid, domain))


def _check_grid(f: GridField, h: float | None, domain: Box) -> GridSpec:
    grid = f.grid
    if h is not None and not math.isclose(h, grid.h, rel_tol=1e-12):
        raise GridMismatchError(f"h = {h} differs from the forcing grid spacing {grid.h}")
    if not grid.matches(GridSpec.covering(domain, grid.h)):
        raise GridMismatchError("forcing grid does not cover the domain node-to-face")
    return grid


def _nearest_nodes(grid: GridSpec, points: np.ndarray) -> np.ndarray:
    idx = np.rint((points - np.asarray(grid.origin)) / grid.h).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(grid.shape) - 1)
    return np.ravel_multi_index(tuple(idx.T), grid.shape)


def solve_perforated(holes: HoleSet, f: GridField, h: float | None = None,
                     mode: str = "resolved", *, tol: float = 1e-8, maxiter: int = 100_000,
                     penalty_threshold: float = 3.0,
                     lattice_correction: bool = True) -> tuple[GridField, SolveReport]:
    """Solve -Lap u = f in D minus the holes, u = 0 on the boundary and on the holes."""
    if mode == "capacity_penalty":
        mode = "penalty"
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    grid = _check_grid(f, h, holes.domain)
    h = grid.h
    d = grid.dim
    mask = boundary_mask(grid)
    hole_nodes = np.zeros(grid.shape, dtype=bool)
    radii = holes.radii
    if mode == "resolved":
        small = np.zeros(len(radii), dtype=bool)
    else:
        small = radii < penalty_threshold * h
    big = np.flatnonzero(~small & (radii > 0))
    mark_balls(grid, holes.centers[big], radii[big], hole_nodes)

    absorb = np.zeros(grid.size)
    n_pen = n_sat = 0
    pen = np.flatnonzero(small & (radii > 0))
    if len(pen):
        cell = 0.5 * holes.epsilon
        # outer radius eps/2; holes wider than that fall back to the whole-space capacity
        outer = np.where(radii[pen] < cell, cell, np.inf)
        caps = np.atleast_1d(annulus_capacity(radii[pen], outer, d))
        nodes = _nearest_nodes(grid, holes.centers[pen])
        total = np.bincount(nodes, weights=caps, minlength=grid.size)
        hit = np.flatnonzero(total)
        target = total[hit]
        if lattice_correction:
            load = target * lattice_green_origin(d) * h ** (2 - d)
            saturated = load >= 1.0 - 1e-12
            coeff = np.where(saturated, 0.0, target / np.where(saturated, 1.0, 1.0 - load))
        else:
            saturated = np.zeros(len(hit), dtype=bool)
            coeff = target
        absorb[hit] = coeff / h**d
        sat_nodes = hit[saturated]
        hole_nodes.ravel()[sat_nodes] = True
        absorb[sat_nodes] = 0.0
        sat_holes = np.isin(nodes, sat_nodes)
        mark_balls(grid, holes.centers[pen[sat_holes]], radii[pen[sat_holes]], hole_nodes)
        n_sat = int(sat_holes.sum())
        n_pen = len(pen) - n_sat
    mask[hole_nodes & (mask == INTERIOR)] = HOLE

    unknown = mask == INTERIOR
    diag = 2.0 * d / h**2 + absorb.reshape(grid.shape)
    start = time.perf_counter()
    x, it, res, _ = solve_stencil(grid, unknown, diag, f.values, tol=tol, maxiter=maxiter)
    report = SolveReport(it, res, time.perf_counter() - start, mode,
                         n_masked_holes=len(big) + n_sat, n_penalized_holes=n_pen,
                         n_saturated_holes=n_sat)
    return GridField(grid, x, mask), report


def solve_homogenized(c0: float, f: GridField, h: float | None = None, domain: Box | None = None,
                      *, tol: float = 1e-8,
                      maxiter: int = 100_000) -> tuple[GridField, SolveReport]:
    """Solve (-Lap + c0) u = f with u = 0 on the boundary of the grid box."""
    if c0 < 0:
        raise ValueError("c0 must be nonnegative")
    grid = f.grid
    if h is not None and not math.isclose(h, grid.h, rel_tol=1e-12):
        raise GridMismatchError(f"h = {h} differs from the forcing grid spacing {grid.h}")
    if domain is not None:
        _check_grid(f, None, domain)
    mask = boundary_mask(grid)
    diag = np.full(grid.shape, 2.0 * grid.dim / grid.h**2 + c0)
    start = time.perf_counter()
    x, it, res, _ = solve_stencil(grid, mask == INTERIOR, diag, f.values, tol=tol,
                                  maxiter=maxiter)
    return GridField(grid, x, mask), SolveReport(it, res, time.perf_counter() - start, "resolved")


# ------------------------------------------------------------------ norms


@dataclass(frozen=True)
class Norms:
    l2_error: float
    h1_seminorm_error: float
    l2_norm_u: float
    energy_u: float


def trapezoid_weights(grid: GridSpec) -> np.ndarray:
    w = np.full(grid.shape, grid.h**grid.dim)
    for k, n in enumerate(grid.shape):
        edge = [slice(None)] * grid.dim
        for i in (0, n - 1):
            edge[k] = i
            w[tuple(edge)] *= 0.5
    return w


def l2_norm(values: np.ndarray, grid: GridSpec) -> float:
    return math.sqrt(math.fsum((trapezoid_weights(grid) * values * values).ravel()))


def norms(u: GridField, v: GridField) -> Norms:
    u.same_grid(v)
    e = u.values - v.values
    h = u.grid.h
    return Norms(
        l2_error=l2_norm(e, u.grid),
        h1_seminorm_error=math.sqrt(link_energy(e, h)),
        l2_norm_u=l2_norm(u.values, u.grid),
        energy_u=link_energy(u.values, h),
    )


def gradient_pairing(u: GridField, v: GridField, phi: np.ndarray) -> float:
    """|sum over links of h^(d-2) * D(u - v) * D(phi)|, the discrete |int grad(u-v).grad(phi)|."""
    u.same_grid(v)
    e = u.values - v.values
    d = u.grid.dim
    parts = [math.fsum((de * dp).ravel())
             for de, dp in zip(forward_differences(e), forward_differences(phi))]
    return abs(u.grid.h ** (d - 2) * math.fsum(parts))


__all__ = [
    "BOUNDARY", "HOLE", "INTERIOR", "GridField", "GridSpec", "Norms", "SolveReport",
    "bump", "bump_forcing", "constant_forcing", "gradient_pairing", "grid_for_domain",
    "lattice_green_origin", "l2_norm", "norms", "solve_homogenized", "solve_perforated",
    "trapezoid_weights",
]
