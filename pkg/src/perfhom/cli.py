"""``perfhom`` command line: sample | partition | solve | convergence | stats.

Exit status is 0 on success, 1 when an input fails validation and 2 when a
run fails.  PERFHOM_OUT and PERFHOM_WORKERS override the output directory and
worker count when the corresponding flag is absent.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .box import Box
from .errors import InvalidSpecError, PerfhomError
from .geometry import build_holes, format_partition, partition_general, partition_periodic
from .grid import format_field
from .harness import (ExperimentPlan, atomic_write, mixing_decay_probe, run_convergence,
                      slln_test, solve_row, thinning_limit_test)
from .plan import load_plan
from .pointproc import format_configuration, read_configuration, sample

log = logging.getLogger("perfhom")


def _out_dir(args, plan: ExperimentPlan | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get("PERFHOM_OUT"):
        return Path(os.environ["PERFHOM_OUT"])
    return Path(plan.outputs if plan is not None else "out")


def _workers(args) -> int:
    if args.workers is not None:
        n = args.workers
    elif os.environ.get("PERFHOM_WORKERS"):
        try:
            n = int(os.environ["PERFHOM_WORKERS"])
        except ValueError:
            raise InvalidSpecError("PERFHOM_WORKERS", "must be an integer") from None
    else:
        n = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    if n < 1:
        raise InvalidSpecError("workers", "must be at least 1")
    return n


def _plan(args) -> ExperimentPlan:
    plan = load_plan(args.plan)
    changes = {}
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = (args.seed,)
    return dataclasses.replace(plan, **changes) if changes else plan


def _epsilon(args, plan: ExperimentPlan) -> float:
    return args.epsilon if args.epsilon is not None else min(plan.epsilons)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"


def cmd_sample(args) -> None:
    plan = _plan(args)
    eps = _epsilon(args, plan)
    seed = plan.seeds[0]
    config = sample(plan.process, plan.radii, plan.domain.scaled(1.0 / eps), seed)
    out = _out_dir(args, plan)
    path = out / f"config_seed{seed}.txt"
    atomic_write(path, format_configuration(config))
    print(f"{len(config)} points -> {path}")


def cmd_partition(args) -> None:
    config = read_configuration(args.config)
    d = config.dim
    domain = Box.cube(args.domain[0], args.domain[1], d)
    holes = build_holes(config, args.epsilon, domain)
    if args.kind == "periodic":
        part = partition_periodic(holes, args.exponent)
    else:
        part = partition_general(holes, args.exponent)
    out = _out_dir(args)
    atomic_write(out / "partition.txt", format_partition(part, holes))
    summary = part.summary()
    atomic_write(out / "partition_summary.json", _json(summary))
    print(_json(summary), end="")


def cmd_solve(args) -> None:
    plan = _plan(args)
    eps = _epsilon(args, plan)
    row, fields = solve_row(plan, eps, plan.seeds[0], keep_fields=True)
    out = _out_dir(args, plan)
    if fields is not None:
        for name, fld in fields.items():
            atomic_write(out / f"{name}.field", format_field(fld))
    row.pop("_wall_ms", None)
    atomic_write(out / "row.json", _json(row))
    print(_json(row), end="")
    if row["status"] != "ok":
        raise PerfhomError(row["status"])


def cmd_convergence(args) -> None:
    plan = _plan(args)
    out = _out_dir(args, plan)
    report = run_convergence(plan, out, workers=_workers(args))
    for eps in plan.epsilons:
        print(f"eps={eps:g} l2_err={report.mean('l2_err', eps)} "
              f"strange_density={report.mean('strange_density', eps)}")
    failed = [r for r in report.rows if r["status"] != "ok"]
    if failed:
        log.warning("%d of %d rows failed", len(failed), len(report.rows))


def cmd_stats(args) -> None:
    plan = _plan(args)
    st = plan.stats
    d = plan.dim
    base = plan.seeds[0]
    out = _out_dir(args, plan)
    results = {
        "slln": slln_test(plan.process, plan.radii, st.slln_mark, st.slln_windows,
                          range(base, base + st.slln_seeds), d=d, z=st.slln_z),
        "thinning": thinning_limit_test(plan.process, st.thinning_deltas,
                                        range(base, base + st.thinning_seeds),
                                        window=st.thinning_window, d=d),
        "mixing": mixing_decay_probe(plan.process, st.mixing_lags,
                                     range(base, base + st.mixing_seeds),
                                     window=st.mixing_window, z=st.mixing_z,
                                     n_boot=st.bootstrap),
    }
    summary = {}
    for name, verdict in results.items():
        payload = {"passed": verdict.passed, "table": verdict.table, "details": verdict.details}
        atomic_write(out / f"{name}.json", _json(payload))
        summary[name] = "PASS" if verdict.passed else "FAIL"
    atomic_write(out / "verdicts.json", _json(summary))
    for name, v in summary.items():
        print(f"{name}: {v}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perfhom", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, plan=True):
        if plan:
            p.add_argument("--plan", required=True, help="YAML plan file")
            p.add_argument("--seed", type=int, help="run this seed only")
            p.add_argument("--mode", choices=("resolved", "penalty"))
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int)

    p = sub.add_parser("sample", help="sample one configuration on (1/eps) D")
    common(p)
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("partition", help="good/bad partition of a configuration file")
    common(p, plan=False)
    p.add_argument("--config", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--domain", type=float, nargs=2, default=(0.0, 1.0), metavar=("LO", "HI"))
    p.add_argument("--kind", choices=("general", "periodic"), default="general")
    p.add_argument("--exponent", type=float)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("solve", help="one (eps, seed) row with its fields")
    common(p)
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("convergence", help="full sweep to report.csv and aggregate.json")
    common(p)
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("stats", help="SLLN, thinning and mixing checks")
    common(p)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except InvalidSpecError as exc:
        print(f"error: invalid input at {exc.key}: {exc.message}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; completed rows were kept", file=sys.stderr)
        return 2
    except (PerfhomError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
