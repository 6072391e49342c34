"""Scaled holes and their good/bad classification.

A hole is the ball of radius ``eps**(d/(d-2)) * rho`` centred at ``eps * z``.
Two partitions are provided: one for lattice centres (bad cells are whole
lattice cubes) and one for arbitrary stationary processes (bad holes are
wrapped in doubled balls).  Both return a :class:`HolePartition` whose good
holes carry a clearance radius inside which the explicit radial cell solution
is used.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .box import Box
from .errors import (EmptyConfigurationError, EpsilonTooLargeError, InvalidSpecError,
                     WindowError, WrongProcessKindError)
from .pointproc import PointConfiguration, nearest_neighbor_distances

GOOD, JB, KB, ITILDE = "GOOD", "JB", "KB", "ITILDE"


def sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def critical_exponent(d: int) -> float:
    return d / (d - 2)


@dataclass(frozen=True)
class HoleSet:
    epsilon: float
    domain: Box
    centers: np.ndarray       # scaled, eps * z
    radii: np.ndarray         # eps**(d/(d-2)) * rho
    rho: np.ndarray
    source_index: np.ndarray

    def __post_init__(self):
        for name in ("centers", "radii", "rho", "source_index"):
            a = np.array(getattr(self, name))
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def __len__(self) -> int:
        return len(self.radii)

    @property
    def unscaled_centers(self) -> np.ndarray:
        return self.centers / self.epsilon

    def with_radii_scaled(self, factor: float) -> "HoleSet":
        return HoleSet(self.epsilon, self.domain, self.centers, self.radii * factor,
                       self.rho * factor, self.source_index)

    def subset(self, keep) -> "HoleSet":
        return HoleSet(self.epsilon, self.domain, self.centers[keep], self.radii[keep],
                       self.rho[keep], self.source_index[keep])


def build_holes(config: PointConfiguration, eps: float, domain: Box) -> HoleSet:
    """Scale the points of ``config`` lying in (1/eps) D into holes in D."""
    if not eps > 0:
        raise InvalidSpecError("epsilon", "must be positive")
    if domain.dim != config.dim:
        raise WindowError("domain and configuration dimensions differ")
    region = domain.scaled(1.0 / eps)
    if not config.window.contains_box(region):
        raise WindowError(f"sampling window {config.window} does not contain (1/eps)D = {region}")
    keep = np.flatnonzero(region.contains(config.centers))
    d = config.dim
    rho = config.radii[keep]
    return HoleSet(eps, domain, eps * config.centers[keep], eps ** critical_exponent(d) * rho,
                   rho, keep)


# ----------------------------------------------------------- pair search


def overlapping_pairs(centers: np.ndarray, radii: np.ndarray, strict: bool = True) -> np.ndarray:
    """Index pairs (i < j) with |c_i - c_j| < r_i + r_j (or <= if not strict).

    Small balls are matched through a KD-tree ball query at twice the typical
    radius; the few large balls are queried individually, so heavy-tailed
    radii do not force an all-pairs search.
    """
    n = len(radii)
    if n < 2:
        return np.empty((0, 2), dtype=np.int64)
    tree = cKDTree(centers)
    cut = float(np.quantile(radii, 0.99))
    small = radii <= cut
    found = []
    if small.sum() >= 2:
        sub = np.flatnonzero(small)
        stree = cKDTree(centers[sub])
        cand = stree.query_pairs(2.0 * cut, output_type="ndarray")
        if len(cand):
            found.append(sub[cand])
    large = np.flatnonzero(~small)
    for i in large:
        nbrs = np.asarray(tree.query_ball_point(centers[i], radii[i] + cut), dtype=np.int64)
        nbrs = nbrs[nbrs != i]
        found.append(np.stack([np.full(len(nbrs), i), nbrs], axis=1))
    if len(large) >= 2:
        # large against large by brute force; there are few of them
        a, b = np.triu_indices(len(large), k=1)
        found.append(np.stack([large[a], large[b]], axis=1))
    if not found:
        return np.empty((0, 2), dtype=np.int64)
    pairs = np.concatenate(found)
    pairs = np.sort(pairs, axis=1)
    pairs = np.unique(pairs, axis=0)
    dist = np.linalg.norm(centers[pairs[:, 0]] - centers[pairs[:, 1]], axis=1)
    reach = radii[pairs[:, 0]] + radii[pairs[:, 1]]
    ok = dist < reach if strict else dist <= reach
    return pairs[ok]


def clusters_from_pairs(n: int, pairs: np.ndarray) -> list[list[int]]:
    if n == 0:
        return []
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    order = np.argsort(labels, kind="stable")
    splits = np.flatnonzero(np.diff(labels[order])) + 1
    groups = [sorted(g.tolist()) for g in np.split(order, splits)]
    return sorted(groups, key=lambda g: g[0])


def detect_overlaps(holes: HoleSet) -> list[list[int]]:
    """Connected components of the overlap graph, singletons included."""
    return clusters_from_pairs(len(holes), overlapping_pairs(holes.centers, holes.radii))


# -------------------------------------------------------------- partition


@dataclass(frozen=True)
class HolePartition:
    """Good/bad split of a :class:`HoleSet`.

    ``classes`` holds one of GOOD, JB, KB, ITILDE per hole.  ``clearance`` is
    the radius of the cell around each good hole (nan for bad holes).  The
    safety layer is the union of ``layer_shape`` primitives; ``layer_sizes``
    holds ball radii or cube half-widths.
    """

    kind: str
    epsilon: float
    dim: int
    classes: np.ndarray
    clearance: np.ndarray
    layer_shape: str
    layer_centers: np.ndarray
    layer_sizes: np.ndarray
    layer_members: list
    r_eps: float | None
    exponent: float
    cap_bad_upper: float

    @property
    def good(self) -> np.ndarray:
        return np.flatnonzero(self.classes == GOOD)

    @property
    def bad(self) -> np.ndarray:
        return np.flatnonzero(self.classes != GOOD)

    def indices(self, cls: str) -> np.ndarray:
        return np.flatnonzero(self.classes == cls)

    def layer_distance(self, points: np.ndarray) -> np.ndarray:
        """Euclidean distance from each point to the safety layer (0 inside)."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        if len(self.layer_sizes) == 0:
            return np.full(len(pts), np.inf)
        return _distance_to_primitives(pts, self.layer_centers, self.layer_sizes, self.layer_shape)

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "epsilon": self.epsilon,
            "n_holes": int(len(self.classes)),
            "n_good": int(np.sum(self.classes == GOOD)),
            "n_bad": int(np.sum(self.classes != GOOD)),
            "n_JB": int(np.sum(self.classes == JB)),
            "n_KB": int(np.sum(self.classes == KB)),
            "n_ITILDE": int(np.sum(self.classes == ITILDE)),
            "n_layer_primitives": int(len(self.layer_sizes)),
            "r_eps": self.r_eps,
            "exponent": self.exponent,
            "cap_bad_upper": self.cap_bad_upper,
        }


def _distance_to_primitives(pts, centers, sizes, shape, chunk=4096):
    out = np.empty(len(pts))
    tree = cKDTree(centers)
    reach = float(sizes.max()) * (math.sqrt(centers.shape[1]) if shape == "cube" else 1.0)
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        # the nearest primitive lies among those whose centres are within
        # (nearest-centre distance + largest reach)
        dn, _ = tree.query(p)
        lists = tree.query_ball_point(p, dn + reach)
        counts = np.fromiter((len(c) for c in lists), dtype=np.int64, count=len(lists))
        who = np.repeat(np.arange(len(p)), counts)
        cand = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.int64,
                           count=int(counts.sum()))
        diff = p[who] - centers[cand]
        if shape == "ball":
            dist = np.sqrt(np.einsum("ij,ij->i", diff, diff)) - sizes[cand]
        else:
            excess = np.clip(np.abs(diff) - sizes[cand][:, None], 0.0, None)
            dist = np.sqrt(np.einsum("ij,ij->i", excess, excess))
        best = np.full(len(p), np.inf)
        np.minimum.at(best, who, dist)
        out[s:s + len(p)] = np.maximum(best, 0.0)
    return out


def bad_capacity_bound(rho: np.ndarray, eps: float, d: int) -> float:
    """Sum over bad holes of Cap(B_r, B_2r) written as in the scaled variables."""
    terms = (d - 2) * sphere_area(d) * eps**d * np.asarray(rho, dtype=float) ** (d - 2)
    return math.fsum(terms) / (1.0 - 2.0 ** (-(d - 2)))


def default_exponent(d: int) -> float:
    return 1.0 / (d - 2)


def _check_exponent(name: str, value: float, d: int) -> float:
    if not (0.0 < value < 2.0 / (d - 2)):
        raise InvalidSpecError(name, f"must lie in (0, {2.0 / (d - 2)})")
    return float(value)


def partition_periodic(holes: HoleSet, delta: float | None = None) -> HolePartition:
    """Partition for lattice centres: bad holes are whole epsilon-cells."""
    d, eps = holes.dim, holes.epsilon
    delta = _check_exponent("delta", default_exponent(d) if delta is None else delta, d)
    if eps**delta > 0.5:
        raise EpsilonTooLargeError(
            f"eps = {eps} violates 2 eps^(1+delta) <= eps for delta = {delta}")
    z = holes.unscaled_centers
    zi = np.rint(z)
    if len(z) and not np.allclose(z, zi, rtol=0, atol=1e-9 * max(1.0, float(np.abs(z).max()))):
        raise WrongProcessKindError("hole centres are not on the integer lattice")
    zi = zi.astype(np.int64)

    threshold = eps ** (1.0 + delta)
    oversized = holes.radii >= threshold
    cells: set[tuple[int, ...]] = set()
    half = 0.5 * eps
    for j in np.flatnonzero(oversized):
        c, big = holes.centers[j], 2.0 * holes.radii[j]
        lo = np.floor((c - big - half) / eps).astype(np.int64)
        hi = np.ceil((c + big + half) / eps).astype(np.int64)
        ranges = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        cand = np.array(list(itertools.product(*ranges)), dtype=np.int64)
        excess = np.clip(np.abs(cand * eps - c) - half, 0.0, None)
        hit = np.einsum("ij,ij->i", excess, excess) <= big * big
        cells.update(map(tuple, cand[hit]))

    classes = np.full(len(holes), GOOD, dtype=object)
    in_cells = np.array([tuple(row) in cells for row in zi], dtype=bool)
    classes[in_cells] = ITILDE
    classes[oversized] = JB
    classes = classes.astype(str)
    clearance = np.where(classes == GOOD, half, np.nan)

    cell_arr = np.array(sorted(cells), dtype=np.int64).reshape(-1, d)
    index_of = {tuple(row): k for k, row in enumerate(zi)}
    members = [[index_of[c]] if c in index_of else [] for c in map(tuple, cell_arr)]
    bad = classes != GOOD
    return HolePartition(
        kind="periodic", epsilon=eps, dim=d, classes=classes, clearance=clearance,
        layer_shape="cube", layer_centers=cell_arr * eps,
        layer_sizes=np.full(len(cell_arr), half), layer_members=members,
        r_eps=None, exponent=delta, cap_bad_upper=bad_capacity_bound(holes.rho[bad], eps, d))


def thinning_radius(holes: HoleSet, alpha: float) -> float:
    d, eps = holes.dim, holes.epsilon
    return max((eps ** critical_exponent(d) * float(holes.rho.max())) ** (1.0 / d),
               eps ** (alpha / 4.0))


def partition_general(holes: HoleSet, alpha: float | None = None) -> HolePartition:
    """Partition for arbitrary centres: oversized, crowded and contaminated holes."""
    d, eps = holes.dim, holes.epsilon
    alpha = _check_exponent("partition_exponent", default_exponent(d) if alpha is None else alpha, d)
    n = len(holes)
    if n == 0:
        raise EmptyConfigurationError("partition needs at least one hole")
    r_eps = thinning_radius(holes, alpha)
    eta = eps * r_eps
    radii, centers = holes.radii, holes.centers

    oversized = radii >= 0.5 * eta
    nn = nearest_neighbor_distances(holes.unscaled_centers)
    crowded = (nn < 2.0 * r_eps) & ~oversized

    near = np.zeros(n, dtype=bool)
    big = np.flatnonzero(oversized)
    if len(big):
        tree = cKDTree(centers)
        for i in big:
            for j in tree.query_ball_point(centers[i], eta + 2.0 * radii[i]):
                near[j] = True
    near &= ~oversized & ~crowded

    classes = np.full(n, GOOD, dtype="<U6")
    classes[near] = ITILDE
    classes[crowded] = KB
    classes[oversized] = JB
    bad = classes != GOOD

    layer_c = centers[bad]
    layer_r = 2.0 * radii[bad]
    clearance = np.full(n, np.nan)
    good = ~bad
    if good.any():
        gap = 0.5 * eps * nn[good]
        if len(layer_r):
            to_layer = _distance_to_primitives(centers[good], layer_c, layer_r, "ball")
        else:
            to_layer = np.full(good.sum(), np.inf)
        clearance[good] = np.minimum(np.minimum(to_layer, gap), eps)
    return HolePartition(
        kind="general", epsilon=eps, dim=d, classes=classes, clearance=clearance,
        layer_shape="ball", layer_centers=layer_c, layer_sizes=layer_r,
        layer_members=[[int(j)] for j in np.flatnonzero(bad)],
        r_eps=r_eps, exponent=alpha, cap_bad_upper=bad_capacity_bound(holes.rho[bad], eps, d))


def layer_clusters(partition: HolePartition) -> list[list[int]]:
    """Connected groups of touching safety-layer primitives."""
    c, s = partition.layer_centers, partition.layer_sizes
    m = len(s)
    if m == 0:
        return []
    if partition.layer_shape == "ball":
        pairs = overlapping_pairs(c, s, strict=False)
    else:
        # cubes on a common lattice touch iff their centres differ by at most one cell per axis
        tree = cKDTree(c)
        cand = tree.query_pairs(2.0 * float(s.max()) * math.sqrt(partition.dim) + 1e-12,
                                output_type="ndarray")
        if len(cand):
            gap = np.abs(c[cand[:, 0]] - c[cand[:, 1]]) - (s[cand[:, 0]] + s[cand[:, 1]])[:, None]
            cand = cand[np.all(gap <= 1e-12 * partition.epsilon, axis=1)]
        pairs = cand.reshape(-1, 2)
    return clusters_from_pairs(m, pairs)


# -------------------------------------------------------------- text dump


def format_partition(partition: HolePartition, holes: HoleSet) -> str:
    lines = []
    for j in range(len(holes)):
        fields = [str(j), str(partition.classes[j])]
        fields += [f"{x:.17g}" for x in holes.centers[j]]
        fields += [f"{holes.radii[j]:.17g}", f"{partition.clearance[j]:.17g}"]
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def write_partition(partition: HolePartition, holes: HoleSet, path: str | Path) -> None:
    Path(path).write_text(format_partition(partition, holes))
