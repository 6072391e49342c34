"""Harmonic capacities, the oscillating test function and the strange term."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .box import Box
from .errors import InfiniteMomentError, UnderResolvedError
from .geometry import HolePartition, HoleSet, layer_clusters, sphere_area
from .grid import GridSpec, link_energy, mark_balls, solve_stencil
from .pointproc import ProcessSpec, RadiiSpec, ball_volume, sample

log = logging.getLogger(__name__)

THETA_MIN = 1e-3


def surface_area(d: int) -> float:
    """Area of the unit sphere in R^d."""
    return 4.0 * math.pi if d == 3 else sphere_area(d)


@dataclass(frozen=True)
class CapacityResult:
    value: float
    method: str
    grid_h: float | None = None
    iterations: int | None = None
    residual: float | None = None


def annulus_capacity(r, R, d: int):
    """Cap(B_r, B_R) = (d-2) |S^{d-1}| / (r^{2-d} - R^{2-d}); vectorized, r = 0 gives 0."""
    r = np.asarray(r, dtype=float)
    R = np.asarray(R, dtype=float)
    k = d - 2
    with np.errstate(divide="ignore"):
        inv_r = np.where(r > 0, r ** (-k) if k else 0.0, np.inf)
        inv_R = np.where(np.isinf(R), 0.0, R ** (-k))
    out = k * surface_area(d) / (inv_r - inv_R)
    return out if out.ndim else float(out)


def cap_annulus_analytic(r: float, R: float, d: int) -> CapacityResult:
    if d < 3:
        raise ValueError("dimension must be at least 3")
    if not (r > 0 and R > r):
        raise ValueError(f"need 0 < r < R, got r={r}, R={R}")
    return CapacityResult(annulus_capacity(r, R, d), "analytic")


def cell_function(dist, r: float, R: float, d: int):
    """Radial capacitary potential of B_r in B_R: 1 inside B_r, 0 outside B_R."""
    dist = np.asarray(dist, dtype=float)
    k = d - 2
    with np.errstate(divide="ignore"):
        v = (dist ** (-k) - R ** (-k)) / (r ** (-k) - R ** (-k))
    return np.clip(np.where(dist <= r, 1.0, v), 0.0, 1.0)


# ------------------------------------------------- finite-difference capacity


@dataclass(frozen=True)
class Primitive:
    shape: str                 # "ball" or "cube"
    center: tuple[float, ...]
    size: float                # radius or half-width

    def reach(self) -> float:
        return self.size * (math.sqrt(len(self.center)) if self.shape == "cube" else 1.0)


def _as_primitives(outer) -> list[Primitive]:
    prims = []
    for item in outer:
        if isinstance(item, Primitive):
            prims.append(item)
        else:
            shape, center, size = item
            prims.append(Primitive(shape, tuple(map(float, center)), float(size)))
    return prims


def _region_mask(grid: GridSpec, prims: list[Primitive], tol: float) -> np.ndarray:
    inside = np.zeros(grid.shape, dtype=bool)
    for p in prims:
        c = np.asarray(p.center)
        sl = grid.index_box(c - p.reach() - tol, c + p.reach() + tol)
        if any(s.stop <= s.start for s in sl):
            continue
        xs = grid.coords(sl)
        if p.shape == "ball":
            hit = sum((x - ck) ** 2 for x, ck in zip(xs, c)) < (p.size + tol) ** 2
        else:
            hit = np.ones(inside[sl].shape, dtype=bool)
            for x, ck in zip(xs, c):
                hit = hit & (np.abs(x - ck) < p.size + tol)
        inside[sl] |= hit
    return inside


def _entry_distance(points, axis, sign, centers, radii, h):
    """Distance along sign*e_axis from outside points to the first ball surface (<= h)."""
    t = np.full(len(points), h)
    if len(points) == 0:
        return t
    tree = cKDTree(points)
    for c, r in zip(centers, radii):
        cand = np.asarray(tree.query_ball_point(c, r + h), dtype=np.int64)
        if cand.size == 0:
            continue
        q = points[cand] - c
        bq = sign * q[:, axis]
        disc = bq * bq - (np.einsum("ij,ij->i", q, q) - r * r)
        ok = disc >= 0
        root = -bq - np.sqrt(np.where(ok, disc, 0.0))
        ok &= root >= 0
        np.minimum.at(t, cand[ok], root[ok])
    return t


def _exit_distance(points, axis, sign, prims, h, tol):
    """Distance along sign*e_axis from inside points to the boundary of the union.

    Containment uses primitives grown by ``tol`` so that nodes on a face shared
    by two primitives count as inside.
    """
    t = np.zeros(len(points))
    if len(points) == 0:
        return t
    tree = cKDTree(points)
    for p in prims:
        c = np.asarray(p.center)
        cand = np.asarray(tree.query_ball_point(c, p.reach() + h), dtype=np.int64)
        if cand.size == 0:
            continue
        q = points[cand] - c
        if p.shape == "ball":
            q2 = np.einsum("ij,ij->i", q, q)
            inside = q2 < (p.size + tol) ** 2
            bq = sign * q[:, axis]
            root = -bq + np.sqrt(np.maximum(bq * bq - (q2 - p.size**2), 0.0))
        else:
            inside = np.all(np.abs(q) < p.size + tol, axis=1)
            root = p.size - sign * q[:, axis]
        np.maximum.at(t, cand[inside], root[inside])
    return np.clip(t, 0.0, h)


def cut_link_energy(values: np.ndarray, grid: GridSpec, centers, radii) -> float:
    """Link energy of a field that vanishes on the given balls.

    A link from an outside node x into a ball is charged v(x)^2 / theta, theta
    the fraction of the link outside the ball, the same rule the capacitary
    solver uses.  Links between two inside nodes carry nothing.
    """
    h, d = grid.h, grid.dim
    centers = np.asarray(centers, dtype=float).reshape(-1, d)
    radii = np.asarray(radii, dtype=float).ravel()
    inside = np.zeros(grid.shape, dtype=bool)
    mark_balls(grid, centers, radii, inside)
    origin = np.asarray(grid.origin)
    parts = []
    for k in range(d):
        lo = (slice(None),) * k + (slice(None, -1),)
        hi = (slice(None),) * k + (slice(1, None),)
        a, b = values[lo], values[hi]
        ia, ib = inside[lo], inside[hi]
        parts.append(math.fsum(np.square(b - a)[~ia & ~ib]))
        for sign, out_vals, cut in ((1, a, ~ia & ib), (-1, b, ia & ~ib)):
            idx = np.argwhere(cut)
            if not len(idx):
                continue
            if sign < 0:
                idx[:, k] += 1
            t = _entry_distance(origin + h * idx, k, sign, centers, radii, h)
            theta = np.clip(t / h, THETA_MIN, 1.0)
            parts.append(math.fsum(out_vals[cut] ** 2 / theta))
    return h ** (d - 2) * math.fsum(parts)


def _shift(a: np.ndarray, axis: int, sign: int) -> np.ndarray:
    """b[i] = a[i + sign * e_axis] (wrapping; callers never read wrapped edges)."""
    return np.roll(a, -sign, axis=axis)


@dataclass
class CapacitarySolution:
    grid: GridSpec
    values: np.ndarray        # 1 on inner nodes, 0 outside the region
    region: np.ndarray        # nodes where the potential is defined (inner included)
    energy: float
    iterations: int
    residual: float


def capacitary_potential(grid: GridSpec, inner_centers, inner_radii, outer,
                         tol: float = 1e-8, maxiter: int = 100_000) -> CapacitarySolution:
    """Discrete capacitary potential of a union of balls inside a union of primitives.

    Links cut by a boundary get conductance 1/theta, theta being the fraction
    of the link inside the unknown region, so the matrix stays a symmetric
    M-matrix and curved boundaries are seen at sub-grid accuracy.
    """
    h = grid.h
    d = grid.dim
    prims = _as_primitives(outer)
    inner_c = np.asarray(inner_centers, dtype=float).reshape(-1, d)
    inner_r = np.asarray(inner_radii, dtype=float).ravel()
    eps_tol = 1e-9 * h

    inner = np.zeros(grid.shape, dtype=bool)
    mark_balls(grid, inner_c, inner_r, inner)
    region = _region_mask(grid, prims, eps_tol)
    # nodes lying on the outer surface belong to the boundary, not the region
    edge = region & ~inner
    for k in range(d):
        for s in (-1, 1):
            cut = edge & ~_shift(region, k, s)
            pts = np.argwhere(cut)
            if len(pts):
                x = np.asarray(grid.origin) + h * pts
                t = _exit_distance(x, k, s, prims, h, eps_tol)
                flat = pts[t <= 2 * eps_tol]
                region[tuple(flat.T)] = False
    region |= inner
    unknown = region & ~inner
    for k in range(d):
        if unknown.take([0, -1], axis=k).any():
            raise UnderResolvedError("outer region touches the grid edge")
        if np.any(inner & ~_shift(region, k, 1)) or np.any(inner & ~_shift(region, k, -1)):
            raise UnderResolvedError("an inner ball is not separated from the outer boundary "
                                     "by at least one grid node")

    inv_h2 = 1.0 / (h * h)
    diag = np.zeros(grid.shape)
    rhs = np.zeros(grid.shape)
    cut_links = []   # (node indices, boundary value, theta)
    origin = np.asarray(grid.origin)
    for k in range(d):
        for s in (-1, 1):
            nb_unknown = _shift(unknown, k, s)
            nb_inner = _shift(inner, k, s)
            diag[unknown & nb_unknown] += inv_h2
            to_inner = np.argwhere(unknown & nb_inner)
            if len(to_inner):
                t = _entry_distance(origin + h * to_inner, k, s, inner_c, inner_r, h)
                theta = np.clip(t / h, THETA_MIN, 1.0)
                sel = tuple(to_inner.T)
                np.add.at(diag, sel, inv_h2 / theta)
                np.add.at(rhs, sel, inv_h2 / theta)
                cut_links.append((sel, 1.0, theta))
            to_outer = np.argwhere(unknown & ~_shift(region, k, s))
            if len(to_outer):
                t = _exit_distance(origin + h * to_outer, k, s, prims, h, eps_tol)
                theta = np.clip(t / h, THETA_MIN, 1.0)
                sel = tuple(to_outer.T)
                np.add.at(diag, sel, inv_h2 / theta)
                cut_links.append((sel, 0.0, theta))

    x, iters, res, _ = solve_stencil(grid, unknown, diag, rhs, tol=tol, maxiter=maxiter)
    values = x.copy()
    values[inner] = 1.0

    parts = []
    for k in range(d):
        both = unknown[(slice(None),) * k + (slice(1, None),)] & \
            unknown[(slice(None),) * k + (slice(None, -1),)]
        diff = np.diff(x, axis=k)
        parts.append(math.fsum(np.square(diff[both])))
    for sel, g, theta in cut_links:
        parts.append(math.fsum((x[sel] - g) ** 2 / theta))
    energy = h ** (d - 2) * math.fsum(parts)
    return CapacitarySolution(grid, values, region, energy, iters, res)


def _grid_around(prims: list[Primitive], h: float, d: int) -> GridSpec:
    lo = np.min([np.asarray(p.center) - p.size for p in prims], axis=0)
    hi = np.max([np.asarray(p.center) + p.size for p in prims], axis=0)
    i0 = np.floor(lo / h).astype(np.int64) - 2
    i1 = np.ceil(hi / h).astype(np.int64) + 2
    return GridSpec(tuple(i0 * h), h, tuple(i1 - i0 + 1))


def cap_fd(inner_balls, outer, h: float, tol: float = 1e-8,
           maxiter: int = 100_000) -> CapacityResult:
    """Capacity of a union of balls relative to a union of balls/cubes, by FD relaxation.

    ``inner_balls`` is a sequence of (center, radius); ``outer`` a sequence of
    :class:`Primitive` or (shape, center, size) tuples.
    """
    inner = [(np.asarray(c, dtype=float), float(r)) for c, r in inner_balls]
    if not inner:
        return CapacityResult(0.0, "fd_relaxation", h, 0, 0.0)
    d = len(inner[0][0])
    small = min(r for _, r in inner)
    if small < h:
        raise UnderResolvedError(f"inner radius {small} spans fewer than 3 nodes at h = {h}")
    prims = _as_primitives(outer)
    grid = _grid_around(prims, h, d)
    sol = capacitary_potential(grid, [c for c, _ in inner], [r for _, r in inner], prims,
                               tol=tol, maxiter=maxiter)
    return CapacityResult(sol.energy, "fd_relaxation", h, sol.iterations, sol.residual)


# ------------------------------------------------------- strange term


def _strauss_mc_count(spec: ProcessSpec, d: int, seeds: int, side: float) -> tuple[float, float]:
    window = Box.cube(0.0, side, d)
    marks = RadiiSpec("Constant", constant_value=1.0)
    vals = np.array([len(sample(spec, marks, window, (1 << 40) + s)) / window.volume
                     for s in range(seeds)])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(seeds))


@functools.lru_cache(maxsize=32)
def mean_count(spec: ProcessSpec, d: int, mc_seeds: int = 64,
               mc_side: float = 6.0) -> tuple[float, float]:
    """Mean number of centres per unit cube, with a standard error (0 when exact)."""
    if spec.kind == "Periodic":
        return 1.0, 0.0
    if spec.kind == "Poisson":
        return spec.intensity, 0.0
    if spec.kind == "NeymanScott":
        p = spec.ns_params
        # parents * daughters * E|B_r|, r ~ U(0, R_c): E r^d = R_c^d / (d + 1)
        return spec.intensity * p.daughter_intensity * ball_volume(d) * \
            p.cluster_radius_max**d / (d + 1), 0.0
    return _strauss_mc_count(spec, d, mc_seeds, mc_side)


def strange_term(spec: ProcessSpec, radii: RadiiSpec, d: int) -> float:
    """C0 = (d-2) |S^{d-1}| <N(Q)> <rho^{d-2}>."""
    moment = radii.moment(d - 2)
    if not math.isfinite(moment):
        raise InfiniteMomentError(f"<rho^{d - 2}> is infinite for {radii.kind} radii")
    count, _ = mean_count(spec, d)
    return (d - 2) * surface_area(d) * moment * count


def empirical_strange_density(partition: HolePartition, holes: HoleSet) -> float:
    """Annulus-capacity density of the good holes: (1/|D|) sum Cap(T_j, B(c_j, d_j))."""
    good = partition.good
    if len(good) == 0:
        return 0.0
    caps = annulus_capacity(holes.radii[good], partition.clearance[good], holes.dim)
    return math.fsum(np.atleast_1d(caps)) / holes.domain.volume


def truncated_strange_density(partition: HolePartition, holes: HoleSet,
                              cap_mark: float) -> dict:
    """Good-hole capacity density with marks truncated at ``cap_mark``, and the gap."""
    full = empirical_strange_density(partition, holes)
    good = partition.good
    d = holes.dim
    r = holes.epsilon ** (d / (d - 2)) * np.minimum(holes.rho[good], cap_mark)
    caps = np.atleast_1d(annulus_capacity(r, partition.clearance[good], d)) if len(good) else []
    trunc = math.fsum(caps) / holes.domain.volume
    return {"full": full, "truncated": trunc, "gap": full - trunc, "cap_mark": cap_mark}


# -------------------------------------------------- oscillating test function


@dataclass
class TestFunctionField:
    grid: GridSpec
    values: np.ndarray
    log: dict = field(default_factory=dict)   # hole index -> formula
    energy_good_fd: float = 0.0
    energy_good_analytic: float = 0.0
    energy_bad_fd: float = 0.0
    energy_bad_analytic: float = 0.0
    good_factor: np.ndarray | None = None
    bad_factor: np.ndarray | None = None

    __test__ = False


def build_test_function(partition: HolePartition, holes: HoleSet, grid: GridSpec,
                        tol: float = 1e-8) -> TestFunctionField:
    d, h = holes.dim, grid.h
    record: dict[int, str] = {}

    # good-region factor: 1 minus the explicit cell profiles
    w2 = np.ones(grid.shape)
    analytic_good = []
    resolved_good = []
    inside_unres = np.zeros(grid.shape, dtype=bool)
    for j in partition.good:
        c, r, R = holes.centers[j], holes.radii[j], partition.clearance[j]
        if r >= h:
            sl = grid.index_box(c - R, c + R)
            if all(s.stop > s.start for s in sl):
                xs = grid.coords(sl)
                dist = np.sqrt(sum((x - ck) ** 2 for x, ck in zip(xs, c)))
                w2[sl] -= cell_function(dist, r, R, d)
            resolved_good.append(j)
            record[int(j)] = "cell_explicit"
        else:
            mark_balls(grid, c, r, inside_unres)
            if r > 0:
                analytic_good.append(annulus_capacity(r, R, d))
            record[int(j)] = "unity"
    np.clip(w2, 0.0, 1.0, out=w2)
    w2[inside_unres] = 0.0

    # bad-region factor: 1 minus the capacitary potential of each layer cluster
    w1 = np.ones(grid.shape)
    analytic_bad = []
    fd_bad = []
    prims_all = [Primitive(partition.layer_shape, tuple(c), float(s))
                 for c, s in zip(partition.layer_centers, partition.layer_sizes)]
    inside_bad = np.zeros(grid.shape, dtype=bool)
    for cluster in layer_clusters(partition):
        prims = [prims_all[k] for k in cluster]
        members = sorted({j for k in cluster for j in partition.layer_members[k]})
        resolved = [j for j in members if holes.radii[j] >= h]
        for j in members:
            if holes.radii[j] < h:
                mark_balls(grid, holes.centers[j], holes.radii[j], inside_bad)
                if holes.radii[j] > 0:
                    analytic_bad.append(annulus_capacity(holes.radii[j], 2 * holes.radii[j], d))
                record[int(j)] = "unity"
        if not resolved:
            continue
        sub = _grid_around(prims, h, d)
        shift = np.rint((np.asarray(sub.origin) - np.asarray(grid.origin)) / h).astype(int)
        sub = GridSpec(tuple(np.asarray(grid.origin) + shift * h), h, sub.shape)
        sol = capacitary_potential(sub, holes.centers[resolved], holes.radii[resolved], prims,
                                   tol=tol)
        fd_bad.append(sol.energy)
        src, dst = [], []
        for k in range(d):
            a = max(0, -shift[k])
            b = min(sub.shape[k], grid.shape[k] - shift[k])
            src.append(slice(a, max(a, b)))
            dst.append(slice(a + shift[k], max(a, b) + shift[k]))
        np.minimum(w1[tuple(dst)], 1.0 - sol.values[tuple(src)], out=w1[tuple(dst)])
        for j in resolved:
            record[int(j)] = "capacitary_fd"
    w1[inside_bad] = 0.0

    values = np.minimum(w1, w2)
    return TestFunctionField(
        grid, values, record,
        energy_good_fd=cut_link_energy(w2, grid, holes.centers[resolved_good],
                                       holes.radii[resolved_good]),
        energy_good_analytic=math.fsum(analytic_good),
        energy_bad_fd=math.fsum(fd_bad),
        energy_bad_analytic=math.fsum(analytic_bad),
        good_factor=w2, bad_factor=w1)
