import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import pareto_moment_quad
from scipy.spatial.distance import pdist

from perfhom.box import Box
from perfhom.errors import InvalidSpecError, WindowError
from perfhom.pointproc import (CorrelationParams, NeymanScottParams, ParetoParams,
                               PointConfiguration, ProcessSpec, RadiiSpec, StraussParams,
                               ball_volume, count_statistics, format_configuration,
                               read_configuration, sample, sample_radii, thin)

CUBE3 = Box.cube(0.0, 1.0, 3)
UNIT_R = RadiiSpec("Constant", constant_value=1.0)
PARETO = RadiiSpec("Pareto", pareto=ParetoParams(1.0, 1.5))


def strauss(beta, rc, alpha=1.0, sweeps=200):
    return ProcessSpec("Strauss", alpha, strauss_params=StraussParams(beta, rc, sweeps))


# ---------------------------------------------------------------- specs


def test_inhibition_above_one_is_rejected_with_key():
    with pytest.raises(InvalidSpecError) as info:
        StraussParams(1.5, 0.3)
    assert info.value.key == "inhibition"


@pytest.mark.parametrize("make", [
    lambda: ProcessSpec("Poisson", intensity=0.0),
    lambda: ProcessSpec("Cox"),
    lambda: ProcessSpec("NeymanScott"),
    lambda: ProcessSpec("Poisson", strauss_params=StraussParams(0.5, 0.3)),
    lambda: NeymanScottParams(0.0, 1.0),
    lambda: RadiiSpec("Pareto"),
    lambda: RadiiSpec("Constant", constant_value=-1.0),
])
def test_malformed_specs_raise(make):
    with pytest.raises(InvalidSpecError):
        make()


def test_pareto_needs_finite_capacity_moment():
    RadiiSpec("Pareto", pareto=ParetoParams(1.0, 1.5)).validate_for_dimension(3)
    with pytest.raises(InvalidSpecError):
        RadiiSpec("Pareto", pareto=ParetoParams(1.0, 1.0)).validate_for_dimension(3)
    with pytest.raises(InvalidSpecError):
        RadiiSpec("Pareto", pareto=ParetoParams(1.0, 1.5)).validate_for_dimension(4)


def test_correlation_decay_must_exceed_dimension():
    corr = RadiiSpec("CorrelatedPareto", pareto=ParetoParams(), correlation=CorrelationParams(3.0, 1.0))
    with pytest.raises(InvalidSpecError):
        corr.validate_for_dimension(3)


def test_degenerate_window_rejected():
    with pytest.raises(WindowError):
        sample(ProcessSpec("Poisson"), UNIT_R, Box((0, 0, 0), (1, 0, 1)), 0)


@pytest.mark.parametrize("p", [2.5, 3.0, 4.0])
def test_pareto_moment_matches_quadrature(p):
    assert ParetoParams(1.3, p).moment(1) == pytest.approx(pareto_moment_quad(1, 1.3, p), rel=1e-9)


# -------------------------------------------------------------- samplers


def test_periodic_lattice_on_four_cube():
    cfg = sample(ProcessSpec("Periodic"), RadiiSpec("Constant", constant_value=0.5),
                 Box.cube(0, 4, 3), 0)
    assert len(cfg) == 64
    assert np.all(cfg.radii == 0.5)
    assert np.array_equal(cfg.centers, np.rint(cfg.centers))


@pytest.mark.parametrize("spec", [
    ProcessSpec("Poisson", 2.0),
    ProcessSpec("NeymanScott", 1.0, ns_params=NeymanScottParams(1.0, 5.0)),
    strauss(0.5, 0.3, sweeps=20),
])
def test_sampling_is_bit_reproducible(spec):
    radii = RadiiSpec("CorrelatedPareto", pareto=ParetoParams(),
                      correlation=CorrelationParams(4.0, 1.0))
    a = sample(spec, radii, Box.cube(0, 3, 3), 7)
    b = sample(spec, radii, Box.cube(0, 3, 3), 7)
    assert a.centers.tobytes() == b.centers.tobytes()
    assert a.radii.tobytes() == b.radii.tobytes()
    assert Box.cube(0, 3, 3).contains(a.centers).all()
    assert np.all(a.radii > 0)


def test_poisson_mean_count():
    counts = [len(sample(ProcessSpec("Poisson", 2.0), UNIT_R, Box.cube(0, 10, 3), s))
              for s in range(1000)]
    se = math.sqrt(2000 / len(counts))
    assert abs(np.mean(counts) - 2000) <= 3 * se


def test_neyman_scott_without_daughters_is_empty():
    spec = ProcessSpec("NeymanScott", 3.0, ns_params=NeymanScottParams(1.0, 0.0))
    assert len(sample(spec, UNIT_R, Box.cube(0, 6, 3), 1)) == 0


def test_neyman_scott_intensity_matches_closed_form():
    spec = ProcessSpec("NeymanScott", 1.0, ns_params=NeymanScottParams(1.0, 5.0))
    window = Box.cube(0, 8, 3)
    dens = np.array([len(sample(spec, UNIT_R, window, s)) / window.volume for s in range(500)])
    # lambda1 * lambda2 * E|B_r| with r ~ U(0, 1): E r^3 = 1/4
    target = 1.0 * 5.0 * (4 * math.pi / 3) / 4
    assert abs(dens.mean() - target) <= 3 * dens.std(ddof=1) / math.sqrt(len(dens))


def test_neyman_scott_edge_intensity_matches_centre():
    # without padding, parents just outside the window would be missing
    spec = ProcessSpec("NeymanScott", 1.0, ns_params=NeymanScottParams(1.0, 5.0))
    window = Box.cube(0, 6, 3)
    corner, middle = Box.cube(0, 1, 3), Box.cube(2.5, 3.5, 3)
    a, b = [], []
    for s in range(500):
        cfg = sample(spec, UNIT_R, window, s)
        a.append(corner.contains(cfg.centers).sum())
        b.append(middle.contains(cfg.centers).sum())
    diff = np.asarray(a, float) - np.asarray(b, float)
    assert abs(diff.mean()) <= 3 * diff.std(ddof=1) / math.sqrt(len(diff))


def test_strauss_hard_core():
    for s in range(20):
        cfg = sample(strauss(0.0, 0.5), UNIT_R, Box.cube(0, 4, 3), s)
        assert len(cfg) > 10
        assert pdist(cfg.centers).min() > 0.5


def test_strauss_repulsion_lowers_close_pairs():
    window = Box.cube(0, 5, 3)

    def close_pairs(spec, seeds):
        return np.array([np.sum(pdist(sample(spec, UNIT_R, window, s).centers) <= 0.3)
                         for s in seeds], dtype=float)

    rep = close_pairs(strauss(0.5, 0.3), range(40))
    poi = close_pairs(ProcessSpec("Poisson", 1.0), range(40))
    se = math.hypot(rep.std(ddof=1), poi.std(ddof=1)) / math.sqrt(40)
    assert poi.mean() - rep.mean() > 3 * se


def test_strauss_provenance_records_sweeps():
    cfg = sample(strauss(0.5, 0.3, sweeps=30), UNIT_R, Box.cube(0, 3, 3), 0)
    assert cfg.provenance["mcmc_sweeps"] == 30
    assert cfg.provenance["mcmc_steps"] > 0


def test_pareto_capacity_moment_is_empirically_recovered():
    spec = RadiiSpec("Pareto", pareto=ParetoParams(1.0, 3.0))   # finite variance
    rho = sample_radii(spec, np.zeros((200_000, 3)), 5)
    assert rho.min() >= 1.0
    target = pareto_moment_quad(1, 1.0, 3.0)
    assert abs(rho.mean() - target) <= 3 * rho.std(ddof=1) / math.sqrt(len(rho))


def test_correlated_pareto_marginal_and_correlation():
    spec = RadiiSpec("CorrelatedPareto", pareto=ParetoParams(1.0, 1.5),
                     correlation=CorrelationParams(4.0, 2.0))
    window = Box.cube(0, 8, 3)
    tails, near, far = [], [], []
    for s in range(10):
        cfg = sample(ProcessSpec("Poisson", 1.0), spec, window, s)
        u = 1.0 - cfg.radii ** -1.5          # uniform under the Pareto marginal
        tails.append(np.mean(cfg.radii > 2.0))
        dist = np.linalg.norm(cfg.centers[:, None] - cfg.centers[None], axis=-1)
        iu = np.triu_indices(len(u), 1)
        prod = (u[:, None] - 0.5) * (u[None] - 0.5)
        near.append(prod[iu][dist[iu] < 0.5].mean())
        far.append(prod[iu][dist[iu] > 6.0].mean())
    assert np.mean(tails) == pytest.approx(2 ** -1.5, abs=0.03)
    assert np.mean(near) > 0.03 > abs(np.mean(far))


# ------------------------------------------------------------- thinning


def _config(points, radii=None, window=Box.cube(-10, 10, 3)):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    r = np.ones(len(pts)) if radii is None else radii
    return PointConfiguration(window, pts, r)


def test_thin_single_point_is_kept():
    assert len(thin(_config([[0, 0, 0]]), 5.0)) == 1


def test_thin_pair_closer_than_delta_is_removed():
    assert len(thin(_config([[0, 0, 0], [1, 0, 0]]), 2.0)) == 0


points_strategy = st.lists(st.tuples(*[st.floats(-5, 5)] * 3), min_size=0, max_size=40)


@settings(max_examples=60, deadline=None)
@given(points_strategy, st.floats(0.01, 3.0), st.floats(0.01, 3.0))
def test_thin_is_monotone_and_idempotent(points, d1, d2):
    cfg = _config(points, np.arange(len(points), dtype=float) + 1)
    lo, hi = sorted((d1, d2))
    small, big = thin(cfg, lo), thin(cfg, hi)
    as_set = lambda c: {tuple(p) for p in c.centers}
    assert as_set(big) <= as_set(small)
    once = thin(cfg, lo)
    # retained points keep their own radii
    for p, r in zip(once.centers, once.radii):
        k = int(r) - 1
        assert tuple(cfg.centers[k]) == tuple(p)
    assert len(thin(once, lo)) <= len(once)


@settings(max_examples=40, deadline=None)
@given(points_strategy, st.floats(0.05, 2.0), st.randoms(use_true_random=False))
def test_operations_are_permutation_invariant(points, delta, rnd):
    cfg = _config(points, window=Box.cube(-5, 5, 3))
    order = list(range(len(cfg)))
    rnd.shuffle(order)
    other = cfg.permuted(np.asarray(order, dtype=np.int64))
    a, b = count_statistics(cfg), count_statistics(other)
    assert (a.n_points, a.mean_per_unit_cube, a.second_moment_per_unit_cube) == \
        (b.n_points, b.mean_per_unit_cube, b.second_moment_per_unit_cube)
    assert np.array_equal(a.empirical_pair_counts, b.empirical_pair_counts)
    as_set = lambda c: sorted(map(tuple, c.centers))
    assert as_set(thin(cfg, delta)) == as_set(thin(other, delta))


# ------------------------------------------------------------ statistics


def test_lattice_count_statistics():
    cfg = sample(ProcessSpec("Periodic"), UNIT_R, Box.cube(0, 6, 3), 0)
    stats = count_statistics(cfg)
    assert stats.mean_per_unit_cube == 1.0
    assert stats.second_moment_per_unit_cube - stats.mean_per_unit_cube**2 == 0.0


def test_empty_count_statistics():
    stats = count_statistics(_config(np.zeros((0, 3)), np.zeros(0), Box.cube(0, 4, 3)))
    assert stats.n_points == 0
    assert stats.mean_per_unit_cube == 0 and stats.second_moment_per_unit_cube == 0
    assert stats.empirical_pair_counts.sum() == 0


def test_window_smaller_than_cube():
    with pytest.raises(WindowError):
        count_statistics(_config([[0.1, 0.1, 0.1]], window=Box.cube(0, 0.5, 3)))


def test_poisson_count_statistics_ensemble():
    means, seconds = [], []
    for s in range(20):
        st_ = count_statistics(sample(ProcessSpec("Poisson", 3.0), UNIT_R, Box.cube(0, 16, 3), s))
        means.append(st_.mean_per_unit_cube)
        seconds.append(st_.second_moment_per_unit_cube)
    means = np.asarray(means)
    assert abs(means.mean() - 3.0) <= 3 * means.std(ddof=1) / math.sqrt(len(means))
    assert np.mean(seconds) >= np.mean(means) ** 2


def test_pair_counts_match_brute_force():
    cfg = sample(ProcessSpec("Poisson", 2.0), UNIT_R, Box.cube(0, 3, 3), 4)
    stats = count_statistics(cfg, pair_bins=5, pair_range=1.0)
    hist, _ = np.histogram(pdist(cfg.centers), bins=stats.pair_bin_edges)
    assert np.array_equal(hist, stats.empirical_pair_counts)


def test_ball_volume():
    assert ball_volume(3, 2.0) == pytest.approx(4 / 3 * math.pi * 8, rel=1e-15)


# ------------------------------------------------------------------ I/O


def test_configuration_text_round_trip(tmp_path):
    cfg = sample(ProcessSpec("Poisson", 1.0), PARETO, Box.cube(0, 4, 3), 11)
    path = tmp_path / "c.txt"
    path.write_text(format_configuration(cfg))
    back = read_configuration(path)
    assert back.seed == 11 and back.window == cfg.window
    assert np.array_equal(back.centers, cfg.centers) and np.array_equal(back.radii, cfg.radii)
    assert path.read_text().splitlines()[0] == "3 0 4 11"
