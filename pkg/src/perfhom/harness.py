"""Monte Carlo convergence sweeps and statistical checks of the limit theorems.

A sweep evaluates one row per (epsilon, seed).  Each seed is sampled once on
the window (1/eps_min) D and every epsilon uses the part of that same
realization lying in (1/eps) D, so the rows of one seed are nested.  Rows are
stored under a hash of everything they depend on, which makes sweeps
resumable and lets independent rows run on a process pool.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import functools
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .box import Box
from .capacity import empirical_strange_density, mean_count, strange_term
from .errors import InfiniteMomentError, InvalidSpecError
from .geometry import build_holes, partition_general, partition_periodic
from .grid import GridField, GridSpec
from .pde import (bump, constant_forcing, gradient_pairing, norms, solve_homogenized,
                  solve_perforated)
from .pointproc import (ProcessSpec, RadiiSpec, ball_volume, cube_counts,
                        nearest_neighbor_distances, sample, substream)

log = logging.getLogger(__name__)

COLUMNS = ("epsilon", "seed", "n_holes", "n_good", "n_bad", "eps_d_Ib", "cap_bad_upper",
           "strange_density", "l2_err", "weak_indicator", "iters", "residual", "wall_ms",
           "status")
METRICS = ("n_holes", "n_good", "n_bad", "eps_d_Ib", "cap_bad_upper", "strange_density",
           "l2_err", "weak_indicator", "iters", "residual")
FORCINGS = ("constant", "bump")


# ------------------------------------------------------------------ plans


@dataclass(frozen=True)
class StatsPlan:
    """Pre-registered settings and thresholds for the statistical suite."""

    slln_windows: tuple[float, ...] = (8.0, 16.0, 32.0)
    slln_seeds: int = 50
    slln_mark: str = "count"
    slln_z: float = 4.0
    thinning_deltas: tuple[float, ...] = (0.5, 0.25, 0.125)
    thinning_window: float = 20.0
    thinning_seeds: int = 50
    mixing_lags: tuple[int, ...] = (1, 2, 3, 4, 5)
    mixing_window: tuple[float, ...] = (12.0, 4.0, 4.0)
    mixing_seeds: int = 200
    mixing_z: float = 3.0
    bootstrap: int = 200


@dataclass(frozen=True)
class ExperimentPlan:
    process: ProcessSpec
    radii: RadiiSpec
    domain: Box
    epsilons: tuple[float, ...]
    seeds: tuple[int, ...]
    cells_per_epsilon: int = 8
    mode: str = "penalty"
    outputs: str = "out"
    forcing: str = "constant"
    partition_exponent: float | None = None
    tolerance: float = 1e-8
    penalty_threshold: float = 3.0
    lattice_correction: bool = True
    record_wall_time: bool = False
    stats: StatsPlan = field(default_factory=StatsPlan)

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if not eps:
            raise InvalidSpecError("epsilons", "must not be empty")
        if any(not (e > 0) for e in eps):
            raise InvalidSpecError("epsilons", "must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise InvalidSpecError("epsilons", "must be strictly decreasing")
        object.__setattr__(self, "epsilons", eps)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise InvalidSpecError("seeds", "must not be empty")
        if int(self.cells_per_epsilon) < 4:
            raise InvalidSpecError("grid.cells_per_epsilon", "must be at least 4 (h <= eps/4)")
        if self.mode not in ("resolved", "penalty"):
            raise InvalidSpecError("mode", "must be 'resolved' or 'penalty'")
        if self.forcing not in FORCINGS:
            raise InvalidSpecError("forcing", f"must be one of {FORCINGS}")
        if self.domain.dim < 3:
            raise InvalidSpecError("domain", "dimension must be at least 3")
        if not (0 < self.tolerance < 1):
            raise InvalidSpecError("solver.tolerance", "must lie in (0, 1)")
        self.radii.validate_for_dimension(self.domain.dim)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def grid_h(self, eps: float) -> float:
        return eps / self.cells_per_epsilon

    def sampling_window(self) -> Box:
        return self.domain.scaled(1.0 / min(self.epsilons))

    def row_inputs(self) -> dict:
        """Everything a row depends on apart from (epsilon, seed)."""
        return {
            "process": self.process.to_dict(),
            "radii": self.radii.to_dict(),
            "domain": self.domain.to_list(),
            "window": self.sampling_window().to_list(),
            "cells_per_epsilon": self.cells_per_epsilon,
            "mode": self.mode,
            "forcing": self.forcing,
            "partition_exponent": self.partition_exponent,
            "tolerance": self.tolerance,
            "penalty_threshold": self.penalty_threshold,
            "lattice_correction": self.lattice_correction,
            "record_wall_time": self.record_wall_time,
            "version": __version__,
        }

    def row_key(self, eps: float, seed: int) -> str:
        blob = json.dumps({"inputs": self.row_inputs(), "epsilon": eps, "seed": seed},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:32]


# -------------------------------------------------------------- one row


def forcing_field(name: str, grid: GridSpec, domain: Box) -> GridField:
    if name == "constant":
        return constant_forcing(grid)
    return GridField(grid, bump(grid, domain))


@functools.lru_cache(maxsize=4)
def _homogenized(c0: float, grid: GridSpec, domain: Box, forcing: str, tol: float):
    u, _ = solve_homogenized(c0, forcing_field(forcing, grid, domain), tol=tol)
    return u


def plan_strange_term(plan: ExperimentPlan) -> float:
    return strange_term(plan.process, plan.radii, plan.dim)


def _partition(plan: ExperimentPlan, holes):
    if plan.process.kind == "Periodic":
        return partition_periodic(holes, plan.partition_exponent)
    return partition_general(holes, plan.partition_exponent)


def solve_row(plan: ExperimentPlan, eps: float, seed: int, keep_fields: bool = False):
    """Compute one report row; returns (row, fields or None).  Never raises on model errors."""
    start = time.perf_counter()
    row: dict = {"epsilon": eps, "seed": seed}
    fields = None
    try:
        config = sample(plan.process, plan.radii, plan.sampling_window(), seed)
        holes = build_holes(config, eps, plan.domain)
        part = _partition(plan, holes)
        summary = part.summary()
        grid = GridSpec.covering(plan.domain, plan.grid_h(eps))
        f = forcing_field(plan.forcing, grid, plan.domain)
        u, rep = solve_perforated(holes, f, mode=plan.mode, tol=plan.tolerance,
                                  penalty_threshold=plan.penalty_threshold,
                                  lattice_correction=plan.lattice_correction)
        c0 = plan_strange_term(plan)
        uh = _homogenized(c0, grid, plan.domain, plan.forcing, plan.tolerance)
        nrm = norms(u, uh)
        row.update(
            n_holes=summary["n_holes"], n_good=summary["n_good"], n_bad=summary["n_bad"],
            eps_d_Ib=eps**plan.dim * summary["n_bad"],
            cap_bad_upper=part.cap_bad_upper,
            strange_density=empirical_strange_density(part, holes),
            l2_err=nrm.l2_error,
            weak_indicator=gradient_pairing(u, uh, bump(grid, plan.domain)),
            iters=rep.iterations, residual=rep.final_relative_residual, status="ok")
        if keep_fields:
            fields = {"f": f, "u_eps": u, "u_h": uh}
    except Exception as exc:  # recorded per row, the sweep goes on
        log.warning("row eps=%g seed=%d failed: %s", eps, seed, exc)
        row.update({k: math.nan for k in METRICS})
        row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    wall = (time.perf_counter() - start) * 1e3
    row["wall_ms"] = wall if plan.record_wall_time else ""
    row["_wall_ms"] = wall
    return row, fields


def _row_job(plan: ExperimentPlan, eps: float, seed: int) -> dict:
    return solve_row(plan, eps, seed)[0]


# --------------------------------------------------------------- reports


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def aggregate(rows: list[dict], epsilons) -> dict:
    out = {}
    for eps in epsilons:
        ok = [r for r in rows if r["epsilon"] == eps and r["status"] == "ok"]
        entry = {"n_rows": sum(r["epsilon"] == eps for r in rows), "n_ok": len(ok)}
        for m in METRICS:
            vals = np.array([float(r[m]) for r in ok])
            if len(vals) == 0:
                entry[m] = {"mean": None, "stderr": None}
                continue
            mean = math.fsum(vals) / len(vals)
            se = (math.sqrt(math.fsum((vals - mean) ** 2) / (len(vals) - 1) / len(vals))
                  if len(vals) > 1 else None)
            entry[m] = {"mean": mean, "stderr": se}
        out[repr(float(eps))] = entry
    return out


@dataclass
class ExperimentReport:
    epsilons: tuple[float, ...]
    rows: list[dict]
    aggregates: dict

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(r[c]) for c in COLUMNS])
        return buf.getvalue()

    def mean(self, metric: str, eps: float) -> float | None:
        return self.aggregates[repr(float(eps))][metric]["mean"]

    def stderr(self, metric: str, eps: float) -> float | None:
        return self.aggregates[repr(float(eps))][metric]["stderr"]

    def write(self, outdir: str | Path) -> None:
        outdir = Path(outdir)
        atomic_write(outdir / "report.csv", self.csv_text())
        payload = {"epsilons": list(self.epsilons), "aggregates": self.aggregates}
        atomic_write(outdir / "aggregate.json", json.dumps(payload, indent=2, sort_keys=True))
        timing = ["epsilon,seed,wall_ms"] + [
            f"{_fmt(r['epsilon'])},{r['seed']},{r['_wall_ms']:.3f}" for r in self.rows
            if "_wall_ms" in r]
        atomic_write(outdir / "timings.csv", "\n".join(timing) + "\n")


def _parse_cell(col: str, text: str):
    if col == "status":
        return text
    if col in ("seed", "n_holes", "n_good", "n_bad", "iters"):
        try:
            return int(text)
        except ValueError:
            return float(text)
    if col == "wall_ms" and text == "":
        return ""
    return float(text)


def load_report(outdir: str | Path) -> ExperimentReport:
    """Read report.csv and aggregate.json, checking that the aggregates match the rows."""
    outdir = Path(outdir)
    with open(outdir / "report.csv") as fh:
        reader = csv.DictReader(fh)
        rows = [{c: _parse_cell(c, rec[c]) for c in COLUMNS} for rec in reader]
    payload = json.loads((outdir / "aggregate.json").read_text())
    eps = tuple(payload["epsilons"])
    again = aggregate(rows, eps)
    if json.dumps(again, sort_keys=True) != json.dumps(payload["aggregates"], sort_keys=True):
        raise ValueError("stored aggregates do not match the rows")
    return ExperimentReport(eps, rows, payload["aggregates"])


# ------------------------------------------------------------- the sweep


def _row_path(outdir: Path, key: str) -> Path:
    return outdir / "rows" / f"{key}.json"


def _save_row(outdir: Path, key: str, row: dict) -> None:
    atomic_write(_row_path(outdir, key), json.dumps(row, sort_keys=True))


def run_convergence(plan: ExperimentPlan, outdir: str | Path | None = None,
                    workers: int = 1) -> ExperimentReport:
    """Run (or resume) the sweep; completed rows found under ``outdir`` are reused."""
    outdir = Path(outdir or plan.outputs)
    jobs = [(eps, seed) for eps in plan.epsilons for seed in plan.seeds]
    done: dict[tuple[float, int], dict] = {}
    todo = []
    for eps, seed in jobs:
        path = _row_path(outdir, plan.row_key(eps, seed))
        if path.exists():
            done[(eps, seed)] = json.loads(path.read_text())
        else:
            todo.append((eps, seed))
    log.info("%d rows cached, %d to compute", len(done), len(todo))

    if workers <= 1:
        for eps, seed in todo:
            row = _row_job(plan, eps, seed)
            _save_row(outdir, plan.row_key(eps, seed), row)
            done[(eps, seed)] = row
    else:
        pool = cf.ProcessPoolExecutor(max_workers=workers)
        futures = {pool.submit(_row_job, plan, eps, seed): (eps, seed) for eps, seed in todo}
        try:
            for fut in cf.as_completed(futures):
                eps, seed = futures[fut]
                row = fut.result()
                _save_row(outdir, plan.row_key(eps, seed), row)
                done[(eps, seed)] = row
        except KeyboardInterrupt:
            # let in-flight rows finish and keep them, drop the queue
            pool.shutdown(wait=True, cancel_futures=True)
            for fut, (eps, seed) in futures.items():
                if fut.done() and not fut.cancelled() and fut.exception() is None \
                        and (eps, seed) not in done:
                    _save_row(outdir, plan.row_key(eps, seed), fut.result())
            raise
        finally:
            pool.shutdown(wait=True)

    rows = [done[j] for j in jobs]
    report = ExperimentReport(plan.epsilons, rows, aggregate(rows, plan.epsilons))
    report.write(outdir)
    return report


# ------------------------------------------------------- statistical suite


@dataclass
class TestVerdict:
    passed: bool
    table: list[dict]
    details: dict = field(default_factory=dict)

    __test__ = False


def _mark_values(mark: str, rho: np.ndarray, d: int) -> np.ndarray:
    if mark == "count":
        return np.ones_like(rho)
    if mark == "rho_power":
        return rho ** (d - 2)
    raise InvalidSpecError("mark", f"unknown mark function {mark!r}")


def _mark_mean(mark: str, radii: RadiiSpec, d: int) -> float:
    if mark == "count":
        return 1.0
    m = radii.moment(d - 2)
    if not math.isfinite(m):
        raise InfiniteMomentError(f"<rho^{d - 2}> is infinite")
    return m


def _mean_se(vals) -> tuple[float, float]:
    vals = np.asarray(vals, dtype=float)
    mean = math.fsum(vals) / len(vals)
    se = math.sqrt(math.fsum((vals - mean) ** 2) / (len(vals) - 1) / len(vals)) \
        if len(vals) > 1 else 0.0
    return mean, se


def slln_test(spec: ProcessSpec, radii: RadiiSpec, mark: str, windows, seeds, d: int = 3,
              z: float = 4.0) -> TestVerdict:
    """Volume-normalized mark sums over growing cubes [0, L)^d against <N(Q)><X>."""
    count, count_se = mean_count(spec, d)
    target = count * _mark_mean(mark, radii, d)
    table = []
    for L in windows:
        window = Box.cube(0.0, float(L), d)
        vals = []
        for s in seeds:
            cfg = sample(spec, radii, window, int(s))
            vals.append(math.fsum(_mark_values(mark, cfg.radii, d)) / window.volume)
        mean, se = _mean_se(vals)
        table.append({"window": float(L), "mean": mean, "stderr": se, "target": target,
                      "deviation": abs(mean - target)})
    last = table[-1]
    # a Monte Carlo target carries its own error
    ref_se = count_se * (target / count if count else 0.0)
    spread = math.hypot(last["stderr"], ref_se)
    if spread == 0.0:
        within = last["deviation"] <= 1e-12 * max(1.0, abs(target))
    else:
        within = last["deviation"] <= z * spread
    devs = [row["deviation"] for row in table]
    steps = list(zip(devs, devs[1:]))[-3:]
    nonincreasing = sum(b <= a for a, b in steps)
    trend = nonincreasing >= min(2, len(steps))
    return TestVerdict(within and trend, table,
                       {"final_within": within, "trend": trend, "target": target,
                        "z": z, "nonincreasing_steps": nonincreasing, "steps": len(steps)})


def thinning_limit_test(spec: ProcessSpec, deltas, seeds, window: float = 20.0,
                        d: int = 3) -> TestVerdict:
    """Mean retained intensity after thinning at each delta, counted away from the edges."""
    deltas = [float(x) for x in deltas]
    if any(b >= a for a, b in zip(deltas, deltas[1:])) or min(deltas) <= 0:
        raise InvalidSpecError("deltas", "must be positive and strictly decreasing")
    margin = max(deltas)
    box = Box.cube(0.0, window, d)
    inner = Box.cube(margin, window - margin, d)
    marks = RadiiSpec("Constant", constant_value=1.0)
    per_delta = {dl: [] for dl in deltas}
    full = []
    nested = True
    for s in seeds:
        cfg = sample(spec, marks, box, int(s))
        nn = nearest_neighbor_distances(cfg.centers)
        keep_inner = inner.contains(cfg.centers)
        full.append(keep_inner.sum() / inner.volume)
        prev = None
        for dl in deltas:
            kept = nn >= dl
            if prev is not None and np.any(prev & ~kept):
                nested = False
            prev = kept
            per_delta[dl].append((kept & keep_inner).sum() / inner.volume)
    lam = spec.intensity if spec.kind == "Poisson" else None
    table = []
    for dl in deltas:
        mean, se = _mean_se(per_delta[dl])
        row = {"delta": dl, "mean": mean, "stderr": se}
        if lam is not None:
            row["palm"] = lam * math.exp(-lam * ball_volume(d, dl))
        table.append(row)
    full_mean, full_se = _mean_se(full)
    means = [r["mean"] for r in table]
    increasing = all(b >= a for a, b in zip(means, means[1:]))
    bounded = all(m <= full_mean + 1e-12 for m in means)
    return TestVerdict(nested and increasing and bounded, table,
                       {"per_realization_nested": nested, "increasing": increasing,
                        "full_mean": full_mean, "full_stderr": full_se})


def mixing_decay_probe(spec: ProcessSpec, lags, seeds, window=(12.0, 4.0, 4.0),
                       cube: float = 1.0, z: float = 3.0, n_boot: int = 200) -> TestVerdict:
    """Covariance of unit-cube counts at integer lags along the first axis."""
    lags = [int(x) for x in lags]
    d = len(window)
    box = Box((0.0,) * d, tuple(float(w) for w in window))
    if max(lags) >= int(box.lengths[0] // cube):
        raise InvalidSpecError("lags", "window too short for the largest lag")
    marks = RadiiSpec("Constant", constant_value=1.0)
    means = []
    products = {lag: [] for lag in lags}
    for s in seeds:
        counts = cube_counts(sample(spec, marks, box, int(s)), cube).astype(float)
        means.append(counts.mean())
        n0 = counts.shape[0]
        for lag in lags:
            products[lag].append(float(np.mean(counts[: n0 - lag] * counts[lag:])))
    means = np.asarray(means)
    prod = {lag: np.asarray(v) for lag, v in products.items()}
    rng = substream(0, "bootstrap")
    picks = rng.integers(0, len(means), size=(n_boot, len(means)))
    table = []
    for lag in lags:
        cov = prod[lag].mean() - means.mean() ** 2
        boots = prod[lag][picks].mean(axis=1) - means[picks].mean(axis=1) ** 2
        se = float(boots.std(ddof=1))
        table.append({"lag": lag * cube, "covariance": float(cov), "stderr": se,
                      "z": float(cov / se) if se > 0 else math.inf})
    last = table[-1]
    passed = abs(last["covariance"]) <= z * last["stderr"]
    return TestVerdict(passed, table, {"z_threshold": z})


__all__ = [
    "COLUMNS", "ExperimentPlan", "ExperimentReport", "StatsPlan", "TestVerdict", "aggregate",
    "atomic_write", "load_report", "mixing_decay_probe", "run_convergence", "slln_test",
    "solve_row", "thinning_limit_test",
]
