"""YAML plan files mapped onto ExperimentPlan.

Every mapping is checked against the dataclass it feeds, so a misspelled key
is an error rather than a silently ignored setting.  Errors carry the dotted
key path, e.g. ``process.strauss_params.inhibition``.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .box import Box
from .errors import InvalidSpecError
from .harness import ExperimentPlan, StatsPlan
from .pointproc import (CorrelationParams, LogNormalParams, NeymanScottParams, ParetoParams,
                        ProcessSpec, RadiiSpec, StraussParams)

PLAN_VERSION = 1

_NESTED = {
    ProcessSpec: {"ns_params": NeymanScottParams, "strauss_params": StraussParams},
    RadiiSpec: {"pareto": ParetoParams, "lognormal": LogNormalParams,
                "correlation": CorrelationParams},
}
_TUPLES = {"slln_windows", "thinning_deltas", "mixing_lags", "mixing_window"}


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _mapping(data, path: str) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidSpecError(path, "expected a mapping")
    return data


def _check_keys(data: dict, allowed, path: str) -> None:
    for key in data:
        if key not in allowed:
            raise InvalidSpecError(_join(path, str(key)), "unknown key")


def _build(cls, data, path: str):
    data = _mapping(data, path)
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(data, names, path)
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(cls, {}).get(key)
        if sub is not None and value is not None:
            value = _build(sub, value, _join(path, key))
        elif key in _TUPLES:
            value = tuple(value) if isinstance(value, (list, tuple)) else value
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except InvalidSpecError as exc:
        raise exc.prefixed(path) from None
    except (TypeError, ValueError) as exc:
        raise InvalidSpecError(path or cls.__name__, str(exc)) from None


def _domain(data, path: str) -> Box:
    data = _mapping(data, path)
    _check_keys(data, {"lo", "hi", "dim"}, path)
    lo, hi, dim = data.get("lo", 0.0), data.get("hi", 1.0), data.get("dim")
    try:
        if isinstance(lo, (list, tuple)) or isinstance(hi, (list, tuple)):
            box = Box(tuple(map(float, lo)), tuple(map(float, hi)))
        else:
            box = Box.cube(float(lo), float(hi), int(dim if dim is not None else 3))
    except (TypeError, ValueError) as exc:
        raise InvalidSpecError(path, str(exc)) from None
    if box.is_degenerate:
        raise InvalidSpecError(path, "degenerate box")
    return box


def _seeds(data, path: str) -> tuple[int, ...]:
    if isinstance(data, dict):
        _check_keys(data, {"start", "count"}, path)
        try:
            start, count = int(data.get("start", 0)), int(data["count"])
        except (KeyError, TypeError, ValueError):
            raise InvalidSpecError(path, "needs an integer count") from None
        return tuple(range(start, start + count))
    if isinstance(data, int):
        return (data,)
    if isinstance(data, list) and all(isinstance(s, int) for s in data):
        return tuple(data)
    raise InvalidSpecError(path, "expected an integer, a list of integers or {start, count}")


_TOP = {"version", "process", "radii", "domain", "epsilons", "seeds", "grid", "mode",
        "forcing", "partition", "solver", "record_wall_time", "outputs", "stats"}


def plan_from_dict(data) -> ExperimentPlan:
    data = _mapping(data, "")
    _check_keys(data, _TOP, "")
    version = data.get("version")
    if version != PLAN_VERSION:
        raise InvalidSpecError("version", f"expected {PLAN_VERSION}, found {version!r}")
    for key in ("process", "radii", "domain", "epsilons"):
        if key not in data:
            raise InvalidSpecError(key, "missing")
    process = _build(ProcessSpec, data["process"], "process")
    radii = _build(RadiiSpec, data["radii"], "radii")
    domain = _domain(data["domain"], "domain")

    grid = _mapping(data.get("grid"), "grid")
    _check_keys(grid, {"cells_per_epsilon"}, "grid")
    partition = _mapping(data.get("partition"), "partition")
    _check_keys(partition, {"exponent"}, "partition")
    solver = _mapping(data.get("solver"), "solver")
    _check_keys(solver, {"tolerance", "penalty_threshold", "lattice_correction"}, "solver")
    stats = _build(StatsPlan, data.get("stats"), "stats")

    eps = data["epsilons"]
    if not isinstance(eps, list) or not all(isinstance(e, (int, float)) for e in eps):
        raise InvalidSpecError("epsilons", "expected a list of numbers")
    kwargs = dict(
        process=process, radii=radii, domain=domain, epsilons=tuple(eps),
        seeds=_seeds(data.get("seeds", 0), "seeds"),
        mode=data.get("mode", "penalty"), forcing=data.get("forcing", "constant"),
        outputs=str(data.get("outputs", "out")),
        record_wall_time=bool(data.get("record_wall_time", False)), stats=stats,
    )
    if "cells_per_epsilon" in grid:
        kwargs["cells_per_epsilon"] = grid["cells_per_epsilon"]
    if "exponent" in partition:
        kwargs["partition_exponent"] = partition["exponent"]
    for key in ("tolerance", "penalty_threshold", "lattice_correction"):
        if key in solver:
            kwargs[key] = solver[key]
    if kwargs["mode"] == "capacity_penalty":
        kwargs["mode"] = "penalty"
    try:
        return ExperimentPlan(**kwargs)
    except InvalidSpecError:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidSpecError("plan", str(exc)) from None


def load_plan(path: str | Path) -> ExperimentPlan:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise InvalidSpecError("plan", f"not valid YAML: {exc}") from None
    return plan_from_dict(data)


def _clean(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _clean(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if getattr(obj, f.name) is not None}
    if isinstance(obj, tuple):
        return [_clean(x) for x in obj]
    return obj


def plan_to_dict(plan: ExperimentPlan) -> dict:
    """Inverse of :func:`plan_from_dict`."""
    out = {
        "version": PLAN_VERSION,
        "process": _clean(plan.process),
        "radii": _clean(plan.radii),
        "domain": {"lo": list(plan.domain.lo), "hi": list(plan.domain.hi)},
        "epsilons": list(plan.epsilons),
        "seeds": list(plan.seeds),
        "grid": {"cells_per_epsilon": plan.cells_per_epsilon},
        "mode": plan.mode,
        "forcing": plan.forcing,
        "solver": {"tolerance": plan.tolerance, "penalty_threshold": plan.penalty_threshold,
                   "lattice_correction": plan.lattice_correction},
        "record_wall_time": plan.record_wall_time,
        "outputs": plan.outputs,
        "stats": _clean(plan.stats),
    }
    if plan.partition_exponent is not None:
        out["partition"] = {"exponent": plan.partition_exponent}
    return out


def dump_plan(plan: ExperimentPlan) -> str:
    return yaml.safe_dump(plan_to_dict(plan), sort_keys=False)
