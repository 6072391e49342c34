"""Marked point processes: sampling, thinning and counting statistics.

Centers come from one of four stationary processes (integer lattice, Poisson,
Neyman-Scott cluster, Strauss) and each center carries a positive mark that is
later used as a hole radius.  Every sampler is a pure function of its
arguments; randomness is drawn from named PCG64 substreams of the seed so that
changing one component (say the radius law) does not perturb another.
"""

from __future__ import annotations

import itertools
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special
from scipy.spatial import cKDTree

from . import _kernels
from .box import Box
from .errors import InvalidSpecError, WindowError

log = logging.getLogger(__name__)

PROCESS_KINDS = ("Periodic", "Poisson", "NeymanScott", "Strauss")
RADII_KINDS = ("Constant", "Pareto", "LogNormal", "CorrelatedPareto")


def substream(seed: int, *keys: str | int) -> np.random.Generator:
    """Independent generator for ``seed`` and a path of names or indices."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        words.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def ball_volume(d: int, r: float = 1.0) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * r**d


# ------------------------------------------------------------------ specs


def _positive(key: str, value) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise InvalidSpecError(key, f"expected a number, got {value!r}") from None
    if not (math.isfinite(v) and v > 0):
        raise InvalidSpecError(key, f"must be a positive finite number, got {value!r}")
    return v


@dataclass(frozen=True)
class NeymanScottParams:
    cluster_radius_max: float
    daughter_intensity: float

    def __post_init__(self):
        object.__setattr__(self, "cluster_radius_max",
                           _positive("cluster_radius_max", self.cluster_radius_max))
        lam2 = float(self.daughter_intensity)
        if not (math.isfinite(lam2) and lam2 >= 0):
            raise InvalidSpecError("daughter_intensity", "must be a nonnegative finite number")
        object.__setattr__(self, "daughter_intensity", lam2)


@dataclass(frozen=True)
class StraussParams:
    inhibition: float
    interaction_distance: float
    mcmc_sweeps: int = 200

    def __post_init__(self):
        try:
            beta = float(self.inhibition)
        except (TypeError, ValueError):
            raise InvalidSpecError("inhibition", "expected a number") from None
        if not (0.0 <= beta <= 1.0):
            raise InvalidSpecError("inhibition", f"must lie in [0, 1], got {self.inhibition!r}")
        object.__setattr__(self, "inhibition", beta)
        object.__setattr__(self, "interaction_distance",
                           _positive("interaction_distance", self.interaction_distance))
        if isinstance(self.mcmc_sweeps, bool) or int(self.mcmc_sweeps) != self.mcmc_sweeps \
                or int(self.mcmc_sweeps) < 1:
            raise InvalidSpecError("mcmc_sweeps", "must be a positive integer")
        object.__setattr__(self, "mcmc_sweeps", int(self.mcmc_sweeps))


@dataclass(frozen=True)
class ProcessSpec:
    kind: str
    intensity: float = 1.0
    ns_params: NeymanScottParams | None = None
    strauss_params: StraussParams | None = None

    def __post_init__(self):
        if self.kind not in PROCESS_KINDS:
            raise InvalidSpecError("kind", f"unknown process kind {self.kind!r}")
        if self.kind != "Periodic":
            object.__setattr__(self, "intensity", _positive("intensity", self.intensity))
        if (self.kind == "NeymanScott") != (self.ns_params is not None):
            raise InvalidSpecError("ns_params", "present iff kind is NeymanScott")
        if (self.kind == "Strauss") != (self.strauss_params is not None):
            raise InvalidSpecError("strauss_params", "present iff kind is Strauss")

    def interaction_range(self) -> float:
        if self.kind == "NeymanScott":
            return self.ns_params.cluster_radius_max
        if self.kind == "Strauss":
            return 3.0 * self.strauss_params.interaction_distance
        return 0.0

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "intensity": self.intensity}
        if self.ns_params is not None:
            out["ns_params"] = vars(self.ns_params).copy()
        if self.strauss_params is not None:
            out["strauss_params"] = vars(self.strauss_params).copy()
        return out


@dataclass(frozen=True)
class ParetoParams:
    scale: float = 1.0
    tail_exponent: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "scale", _positive("scale", self.scale))
        object.__setattr__(self, "tail_exponent", _positive("tail_exponent", self.tail_exponent))

    def moment(self, k: float) -> float:
        p = self.tail_exponent
        return math.inf if k >= p else p * self.scale**k / (p - k)


@dataclass(frozen=True)
class LogNormalParams:
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        mu = float(self.mu)
        if not math.isfinite(mu):
            raise InvalidSpecError("mu", "must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", _positive("sigma", self.sigma))


@dataclass(frozen=True)
class CorrelationParams:
    decay_exponent: float
    range: float

    def __post_init__(self):
        object.__setattr__(self, "decay_exponent", _positive("decay_exponent", self.decay_exponent))
        object.__setattr__(self, "range", _positive("range", self.range))

    def covariance(self, r: np.ndarray) -> np.ndarray:
        # (1 + s^2)^(-gamma/2): positive definite in every dimension, tail ~ s^-gamma
        s = np.asarray(r, dtype=float) / self.range
        return (1.0 + s * s) ** (-0.5 * self.decay_exponent)


@dataclass(frozen=True)
class RadiiSpec:
    kind: str
    constant_value: float | None = None
    pareto: ParetoParams | None = None
    lognormal: LogNormalParams | None = None
    correlation: CorrelationParams | None = None

    def __post_init__(self):
        if self.kind not in RADII_KINDS:
            raise InvalidSpecError("kind", f"unknown radii kind {self.kind!r}")
        if self.kind == "Constant":
            if self.constant_value is None:
                raise InvalidSpecError("constant_value", "required for Constant radii")
            v = float(self.constant_value)
            # zero is accepted as the degenerate no-hole case
            if not (math.isfinite(v) and v >= 0):
                raise InvalidSpecError("constant_value", "must be a nonnegative finite number")
            object.__setattr__(self, "constant_value", v)
        elif self.constant_value is not None:
            raise InvalidSpecError("constant_value", "only allowed for Constant radii")
        needs_pareto = self.kind in ("Pareto", "CorrelatedPareto")
        if needs_pareto != (self.pareto is not None):
            raise InvalidSpecError("pareto", "present iff kind is Pareto or CorrelatedPareto")
        if (self.kind == "LogNormal") != (self.lognormal is not None):
            raise InvalidSpecError("lognormal", "present iff kind is LogNormal")
        if (self.kind == "CorrelatedPareto") != (self.correlation is not None):
            raise InvalidSpecError("correlation", "present iff kind is CorrelatedPareto")

    def validate_for_dimension(self, d: int) -> None:
        if self.pareto is not None and self.pareto.tail_exponent <= d - 2:
            raise InvalidSpecError("pareto.tail_exponent",
                                   f"must exceed d-2 = {d - 2} for a finite capacity moment")
        if self.correlation is not None and self.correlation.decay_exponent <= d:
            raise InvalidSpecError("correlation.decay_exponent", f"must exceed d = {d}")

    def moment(self, k: float) -> float:
        """Analytic E[rho^k] (may be inf)."""
        if self.kind == "Constant":
            return self.constant_value**k if k else 1.0
        if self.pareto is not None:
            return self.pareto.moment(k)
        ln = self.lognormal
        return math.exp(k * ln.mu + 0.5 * (k * ln.sigma) ** 2)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        for name in ("constant_value", "pareto", "lognormal", "correlation"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v if name == "constant_value" else vars(v).copy()
        return out


# ---------------------------------------------------------- configuration


@dataclass(frozen=True)
class PointConfiguration:
    """Centers (n, d) and marks (n,) inside ``window``.  Arrays are read-only."""

    window: Box
    centers: np.ndarray
    radii: np.ndarray
    seed: int = 0
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        d = self.window.dim
        c = np.array(self.centers, dtype=float).reshape(-1, d)
        r = np.array(self.radii, dtype=float).reshape(-1)
        if c.shape[0] != r.shape[0]:
            raise ValueError("centers and radii differ in length")
        c.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    @property
    def dim(self) -> int:
        return self.window.dim

    def __len__(self) -> int:
        return self.centers.shape[0]

    def subset(self, keep: np.ndarray, window: Box | None = None) -> "PointConfiguration":
        return PointConfiguration(window or self.window, self.centers[keep], self.radii[keep],
                                  self.seed, dict(self.provenance))

    def permuted(self, order: np.ndarray) -> "PointConfiguration":
        return self.subset(np.asarray(order))


# --------------------------------------------------------------- samplers


def sample(spec: ProcessSpec, radii: RadiiSpec, window: Box, seed: int) -> PointConfiguration:
    """Draw a marked configuration restricted to ``window``."""
    if window.is_degenerate:
        raise WindowError("sampling window has zero volume")
    d = window.dim
    if d < 3:
        raise InvalidSpecError("dimension", "must be at least 3")
    radii.validate_for_dimension(d)
    if spec.kind == "Periodic":
        centers, prov = _sample_lattice(window), {}
    elif spec.kind == "Poisson":
        centers, prov = _sample_poisson(spec.intensity, window, substream(seed, "centers")), {}
    elif spec.kind == "NeymanScott":
        centers, prov = _sample_neyman_scott(spec, window, seed)
    else:
        centers, prov = _sample_strauss(spec, window, seed)
    marks = sample_radii(radii, centers, seed)
    prov = {"process": spec.kind, "radii": radii.kind, **prov}
    return PointConfiguration(window, centers, marks, seed, prov)


def _sample_lattice(window: Box) -> np.ndarray:
    axes = [np.arange(math.ceil(lo), math.ceil(hi), dtype=float)
            for lo, hi in zip(window.lo, window.hi)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def _sample_poisson(lam: float, window: Box, rng: np.random.Generator) -> np.ndarray:
    n = rng.poisson(lam * window.volume)
    u = rng.random((n, window.dim))
    return np.asarray(window.lo) + u * window.lengths


def _uniform_in_ball(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.random(n)[:, None] ** (1.0 / d)


def sample_neyman_scott(spec: ProcessSpec, window: Box, seed: int) -> PointConfiguration:
    centers, prov = _sample_neyman_scott(spec, window, seed)
    return PointConfiguration(window, centers, np.ones(len(centers)), seed, prov)


def _sample_neyman_scott(spec: ProcessSpec, window: Box, seed: int):
    prm = spec.ns_params
    rc, lam2 = prm.cluster_radius_max, prm.daughter_intensity
    d = window.dim
    rng = substream(seed, "centers")
    parents = _sample_poisson(spec.intensity, window.padded(rc), rng)
    r = rng.uniform(0.0, rc, size=len(parents))
    counts = rng.poisson(lam2 * ball_volume(d) * r**d)
    offsets = _uniform_in_ball(rng, int(counts.sum()), d)
    pts = np.repeat(parents, counts, axis=0) + offsets * np.repeat(r, counts)[:, None]
    pts = pts[window.contains(pts)]
    return pts, {"n_parents": int(len(parents))}


def sample_strauss(spec: ProcessSpec, window: Box, seed: int) -> PointConfiguration:
    centers, prov = _sample_strauss(spec, window, seed)
    return PointConfiguration(window, centers, np.ones(len(centers)), seed, prov)


def _sample_strauss(spec: ProcessSpec, window: Box, seed: int):
    prm = spec.strauss_params
    padded = window.padded(3.0 * prm.interaction_distance)
    d = window.dim
    alpha = spec.intensity
    n_steps = prm.mcmc_sweeps * max(1, math.ceil(alpha * padded.volume))
    rng = substream(seed, "mcmc")
    moves = rng.random(n_steps)
    accepts = rng.random(n_steps)
    births = np.asarray(padded.lo) + rng.random((n_steps, d)) * padded.lengths
    picks = rng.random(n_steps)
    cell_mean = alpha * prm.interaction_distance**d
    cap = int(cell_mean + 10 * math.sqrt(cell_mean) + 16)
    pts, accepted = _kernels.strauss_chain(
        np.asarray(padded.lo), np.asarray(padded.hi), alpha, prm.inhibition,
        prm.interaction_distance, moves, accepts, births, picks, cap)
    pts = pts[window.contains(pts)]
    prov = {"mcmc_sweeps": prm.mcmc_sweeps, "mcmc_steps": n_steps,
            "acceptance_rate": accepted / n_steps}
    return pts, prov


def sample_radii(radii: RadiiSpec, centers: np.ndarray, seed: int) -> np.ndarray:
    n = len(centers)
    rng = substream(seed, "radii")
    if radii.kind == "Constant":
        return np.full(n, radii.constant_value)
    if radii.kind == "Pareto":
        u = rng.random(n)
        return radii.pareto.scale * (1.0 - u) ** (-1.0 / radii.pareto.tail_exponent)
    if radii.kind == "LogNormal":
        return rng.lognormal(radii.lognormal.mu, radii.lognormal.sigma, n)
    return _correlated_pareto(radii, centers, rng)


def _correlated_pareto(radii: RadiiSpec, centers: np.ndarray, rng) -> np.ndarray:
    n = len(centers)
    if n == 0:
        return np.empty(0)
    diff = centers[:, None, :] - centers[None, :, :]
    cov = radii.correlation.covariance(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)))
    jitter = 1e-10
    while True:
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter *= 10
    g = chol @ rng.standard_normal(n)
    g /= math.sqrt(1.0 + jitter)
    tail = special.ndtr(-g)  # 1 - Phi(g), keeps precision in the upper tail
    return radii.pareto.scale * tail ** (-1.0 / radii.pareto.tail_exponent)


# ------------------------------------------------------ thinning, counts


def nearest_neighbor_distances(points: np.ndarray) -> np.ndarray:
    n = len(points)
    if n < 2:
        return np.full(n, np.inf)
    dist, _ = cKDTree(points).query(points, k=2)
    return dist[:, 1]


def thin(config: PointConfiguration, delta: float) -> PointConfiguration:
    """Keep the points whose nearest neighbor is at distance >= delta."""
    if not delta > 0:
        raise InvalidSpecError("delta", "must be positive")
    keep = nearest_neighbor_distances(config.centers) >= delta
    return config.subset(keep)


@dataclass(frozen=True)
class CountStatistics:
    n_points: int
    n_cubes: int
    mean_per_unit_cube: float
    second_moment_per_unit_cube: float
    pair_bin_edges: np.ndarray
    empirical_pair_counts: np.ndarray


def cube_counts(config: PointConfiguration, cube_size: float) -> np.ndarray:
    """Point counts in the complete cubes of side ``cube_size`` tiling the window."""
    lo = np.asarray(config.window.lo)
    shape = np.floor(config.window.lengths / cube_size + 1e-9).astype(int)
    if np.any(shape < 1):
        raise WindowError("window is smaller than one counting cube")
    idx = np.floor((config.centers - lo) / cube_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < shape), axis=1)
    flat = np.ravel_multi_index(tuple(idx[inside].T), tuple(shape))
    return np.bincount(flat, minlength=int(np.prod(shape))).reshape(tuple(shape))


def count_statistics(config: PointConfiguration, cube_size: float = 1.0,
                     pair_bins: int = 10, pair_range: float | None = None) -> CountStatistics:
    counts = cube_counts(config, cube_size).ravel().astype(float)
    vol = cube_size**config.dim
    mean = math.fsum(counts) / counts.size / vol
    second = math.fsum(counts * counts) / counts.size / vol**2
    edges = np.linspace(0.0, pair_range or cube_size, pair_bins + 1)
    if len(config) >= 2:
        tree = cKDTree(config.centers)
        cum = tree.count_neighbors(tree, edges[1:]).astype(np.int64) - len(config)
        pairs = np.diff(np.concatenate([[0], cum // 2]))
    else:
        pairs = np.zeros(pair_bins, dtype=np.int64)
    return CountStatistics(len(config), counts.size, mean, second, edges, pairs)


# ------------------------------------------------------------- text I/O


def write_configuration(config: PointConfiguration, path: str | Path) -> None:
    Path(path).write_text(format_configuration(config))


def format_configuration(config: PointConfiguration) -> str:
    w = config.window
    if len(set(w.lo)) == 1 and len(set(w.hi)) == 1:
        corners = [w.lo[0], w.hi[0]]
    else:
        corners = list(w.lo) + list(w.hi)
    head = " ".join([str(config.dim)] + [f"{x:.17g}" for x in corners] + [str(config.seed)])
    lines = [head]
    for z, rho in zip(config.centers, config.radii):
        lines.append(" ".join(f"{x:.17g}" for x in itertools.chain(z, [rho])))
    return "\n".join(lines) + "\n"


def read_configuration(path: str | Path) -> PointConfiguration:
    lines = Path(path).read_text().split("\n")
    head = lines[0].split()
    d = int(head[0])
    if len(head) == 4:
        window = Box.cube(float(head[1]), float(head[2]), d)
    elif len(head) == 2 * d + 2:
        window = Box(tuple(map(float, head[1:1 + d])), tuple(map(float, head[1 + d:1 + 2 * d])))
    else:
        raise ValueError(f"malformed configuration header: {lines[0]!r}")
    rows = [list(map(float, ln.split())) for ln in lines[1:] if ln.strip()]
    data = np.array(rows, dtype=float).reshape(-1, d + 1)
    return PointConfiguration(window, data[:, :d], data[:, d], int(head[-1]))


__all__ = [
    "ProcessSpec", "RadiiSpec", "NeymanScottParams", "StraussParams", "ParetoParams",
    "LogNormalParams", "CorrelationParams", "PointConfiguration", "CountStatistics",
    "sample", "sample_neyman_scott", "sample_strauss", "sample_radii", "thin",
    "count_statistics", "cube_counts", "nearest_neighbor_distances", "substream",
    "write_configuration", "read_configuration", "format_configuration", "ball_volume",
]
