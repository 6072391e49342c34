import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest
import yaml

from perfhom import harness
from perfhom.cli import main
from perfhom.grid import read_field
from perfhom.harness import atomic_write, run_convergence
from perfhom.plan import dump_plan, load_plan, plan_from_dict
from perfhom.pointproc import read_configuration

PERIODIC_PLAN = """\
version: 1
process: {kind: Periodic}
radii: {kind: Constant, constant_value: 0.5}
domain: {lo: 0.0, hi: 1.0, dim: 3}
epsilons: [0.5, 0.25]
seeds: [0]
grid: {cells_per_epsilon: 4}
"""

POISSON_PLAN = """\
version: 1
process: {kind: Poisson, intensity: 1.0}
radii:
  kind: Pareto
  pareto: {tail_exponent: 1.5}
domain: {lo: 0.0, hi: 1.0, dim: 3}
epsilons: [0.5, 0.25]
seeds: {start: 0, count: 3}
grid: {cells_per_epsilon: 4}
"""


@pytest.fixture
def plan_file(tmp_path):
    def write(text, name="plan.yaml"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


def test_sample_writes_lattice(plan_file, tmp_path):
    out = tmp_path / "o"
    code = main(["sample", "--plan", plan_file(PERIODIC_PLAN), "--epsilon", "0.25",
                 "--out", str(out)])
    assert code == 0
    lines = (out / "config_seed0.txt").read_text().splitlines()
    assert len(lines) == 1 + 64
    cfg = read_configuration(out / "config_seed0.txt")
    assert len(cfg) == 64 and np.all(cfg.radii == 0.5)


def test_repulsion_parameter_out_of_range(plan_file, capsys):
    bad = PERIODIC_PLAN.replace(
        "process: {kind: Periodic}",
        "process:\n  kind: Strauss\n  intensity: 1.0\n"
        "  strauss_params: {inhibition: 1.5, interaction_distance: 0.5}")
    assert main(["sample", "--plan", plan_file(bad)]) == 1
    err = capsys.readouterr().err
    assert "strauss_params.inhibition" in err


@pytest.mark.parametrize("edit,key", [
    (lambda t: t + "colour: blue\n", "colour"),
    (lambda t: t.replace("version: 1", "version: 2"), "version"),
    (lambda t: t.replace("cells_per_epsilon: 4", "cells_per_epsilon: 4, refine: 2"), "grid.refine"),
    (lambda t: t.replace("constant_value: 0.5", "constant_value: 0.5, spread: 1"), "radii.spread"),
])
def test_malformed_plans_exit_with_key_path(plan_file, capsys, edit, key):
    assert main(["solve", "--plan", plan_file(edit(PERIODIC_PLAN))]) == 1
    assert f"invalid input at {key}" in capsys.readouterr().err


def test_missing_plan_file(tmp_path, capsys):
    assert main(["sample", "--plan", str(tmp_path / "nope.yaml")]) == 1
    assert "error" in capsys.readouterr().err


def test_plan_round_trip(plan_file):
    for text in (PERIODIC_PLAN, POISSON_PLAN):
        plan = load_plan(plan_file(text))
        again = plan_from_dict(yaml.safe_load(dump_plan(plan)))
        assert again == plan
        assert again.row_key(0.25, 0) == plan.row_key(0.25, 0)


@pytest.mark.parametrize("name", ["periodic.yaml", "poisson_pareto.yaml", "strauss_stats.yaml"])
def test_shipped_plans_load(name):
    here = os.path.dirname(__file__)
    load_plan(os.path.join(here, "..", "plans", name))


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "report.csv"
    target.write_text("old\n")

    def boom(src, dst):
        raise KeyboardInterrupt

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(KeyboardInterrupt):
        atomic_write(target, "new contents\n")
    assert target.read_text() == "old\n"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["report.csv"]


def test_output_directory_from_environment(plan_file, tmp_path, monkeypatch):
    monkeypatch.setenv("PERFHOM_OUT", str(tmp_path / "env"))
    assert main(["sample", "--plan", plan_file(PERIODIC_PLAN)]) == 0
    assert (tmp_path / "env" / "config_seed0.txt").exists()
    assert main(["sample", "--plan", plan_file(PERIODIC_PLAN), "--out",
                 str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "config_seed0.txt").exists()


def test_bad_worker_count(plan_file, monkeypatch, capsys):
    monkeypatch.setenv("PERFHOM_WORKERS", "many")
    assert main(["convergence", "--plan", plan_file(PERIODIC_PLAN)]) == 1
    assert "PERFHOM_WORKERS" in capsys.readouterr().err


def test_partition_of_a_sampled_file(plan_file, tmp_path):
    out = tmp_path / "o"
    main(["sample", "--plan", plan_file(POISSON_PLAN), "--seed", "4", "--out", str(out)])
    code = main(["partition", "--config", str(out / "config_seed4.txt"), "--epsilon", "0.25",
                 "--out", str(out)])
    assert code == 0
    cfg = read_configuration(out / "config_seed4.txt")
    assert len((out / "partition.txt").read_text().splitlines()) == len(cfg)
    assert "cap_bad_upper" in (out / "partition_summary.json").read_text()


def test_solve_writes_fields(plan_file, tmp_path):
    out = tmp_path / "o"
    assert main(["solve", "--plan", plan_file(PERIODIC_PLAN), "--epsilon", "0.25",
                 "--out", str(out)]) == 0
    u = read_field(out / "u_eps.field")
    assert u.grid.shape == (17, 17, 17)
    for name in ("f.field", "u_h.field", "row.json"):
        assert (out / name).exists()


def test_runtime_failure_exits_two(plan_file, tmp_path, monkeypatch, capsys):
    def broken(*a, **k):
        raise RuntimeError("solver exploded")
    monkeypatch.setattr(harness, "solve_perforated", broken)
    assert main(["solve", "--plan", plan_file(PERIODIC_PLAN), "--out", str(tmp_path)]) == 2
    assert "solver exploded" in capsys.readouterr().err


def test_convergence_matches_library(plan_file, tmp_path):
    path = plan_file(POISSON_PLAN)
    assert main(["convergence", "--plan", path, "--out", str(tmp_path / "cli"),
                 "--workers", "1"]) == 0
    lib = run_convergence(load_plan(path), tmp_path / "lib")
    assert (tmp_path / "cli" / "report.csv").read_text() == lib.csv_text()
    assert (tmp_path / "cli" / "aggregate.json").exists()


def test_mode_flag_changes_rows(plan_file, tmp_path):
    path = plan_file(POISSON_PLAN)
    main(["convergence", "--plan", path, "--out", str(tmp_path / "a"), "--workers", "1"])
    main(["convergence", "--plan", path, "--out", str(tmp_path / "b"), "--workers", "1",
          "--mode", "resolved"])
    assert (tmp_path / "a" / "report.csv").read_text() != (tmp_path / "b" / "report.csv").read_text()


def test_stats_writes_verdicts(plan_file, tmp_path):
    text = PERIODIC_PLAN + textwrap.dedent("""\
        stats:
          slln_windows: [2, 4, 8]
          slln_seeds: 2
          thinning_deltas: [0.9, 0.5]
          thinning_window: 6.0
          thinning_seeds: 2
          mixing_lags: [1, 2]
          mixing_window: [6.0, 2.0, 2.0]
          mixing_seeds: 10
          bootstrap: 20
        """)
    assert main(["stats", "--plan", plan_file(text), "--out", str(tmp_path)]) == 0
    for name in ("slln.json", "thinning.json", "mixing.json", "verdicts.json"):
        assert (tmp_path / name).exists()


def test_module_entry_point(plan_file, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "perfhom", "sample", "--plan",
                           plan_file(PERIODIC_PLAN), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "config_seed0.txt").exists()
