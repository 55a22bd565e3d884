import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nss.analysis import (
    EvalRecord,
    complexity_sweep,
    deviation,
    edf,
    flops_band_filter,
    order_pattern,
    pareto_front,
    random_baseline,
    records_from_csv,
    records_to_csv,
    samples_to_constraint,
    space_ordering_stats,
    with_width_cap,
)
from nss.errors import CapExhaustedError
from nss.objectives import SurrogateOracle, flops_loss
from nss.search import SearchConfig
from nss.space_model import ExpandedSpaceConfig, NetworkConfig, NetworkSpace, network_flops, space_mean_flops
from oracles import brute_force_front

STANDARD = ExpandedSpaceConfig()
DUMMY = NetworkConfig((1, 1, 1), (1, 1, 1))


def recs(pairs):
    return [EvalRecord(DUMMY, f, e) for e, f in pairs]


def ks_distance(curve, cdf):
    """Two-sided KS statistic between a step EDF and a continuous CDF."""
    below = np.concatenate([[0.0], curve.fractions[:-1]])
    at = cdf(curve.values)
    return float(max(np.max(curve.fractions - at), np.max(at - below)))


# --- Pareto -----------------------------------------------------------------


def test_pareto_small_example():
    front = pareto_front(recs([(1, 1), (0.5, 2), (2, 3)]))
    assert [(r.error, r.flops) for r in front] == [(1, 1), (0.5, 2)]
    (only,) = pareto_front(recs([(0.3, 7)]))
    assert (only.error, only.flops) == (0.3, 7)
    with pytest.raises(ValueError):
        pareto_front([])


@pytest.mark.parametrize("n, seed", [(200, 0), (500, 1), (500, 2)])
def test_pareto_equals_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    # a coarse grid forces ties on each axis and exact duplicates
    pairs = [(float(e), int(f)) for e, f in zip(rng.integers(0, 40, n) / 40, rng.integers(0, 60, n))]
    records = recs(pairs)
    expected = sorted((records[i] for i in brute_force_front(pairs)), key=lambda r: (r.flops, r.error))
    assert pareto_front(records) == expected


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=60))
def test_pareto_front_properties(pairs):
    records = recs(pairs)
    front = pareto_front(records)
    dom = lambda a, b: a.error <= b.error and a.flops <= b.flops and (a.error, a.flops) != (b.error, b.flops)  # noqa: E731
    assert not any(dom(a, b) for a in front for b in front)
    for r in records:
        assert any(dom(f, r) or (f.error, f.flops) == (r.error, r.flops) for f in front)
    assert [r.flops for r in front] == sorted(r.flops for r in front)
    assert len({(r.error, r.flops) for r in front}) == len(front)


# --- EDF --------------------------------------------------------------------


def test_edf_examples():
    assert edf([1, 2, 3])(2) == pytest.approx(2 / 3)
    flat = edf([4.0] * 5)
    assert list(flat.values) == [4.0] and list(flat.fractions) == [1.0]
    assert flat(3.99) == 0.0 and flat(4.0) == 1.0
    with pytest.raises(ValueError):
        edf([])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
def test_edf_is_a_valid_cdf(values):
    c = edf(values)
    assert np.all(np.diff(c.values) > 0)
    assert np.all(np.diff(c.fractions) > 0)
    assert c.fractions[-1] == 1.0 and c.fractions[0] > 0
    assert c(c.values[0] - 1) == 0.0
    for v in values[:10]:
        assert c(v) == pytest.approx(np.mean(np.asarray(values) <= v))


def test_edf_ks_against_uniform():
    n = 10_000
    sample = np.random.default_rng(0).random(n)
    d = ks_distance(edf(sample), lambda x: x)
    assert d == pytest.approx(stats.kstest(sample, "uniform").statistic, abs=1e-15)
    assert d < 1.628 / math.sqrt(n)


def test_edf_csv_has_provenance():
    text = edf([3.0, 1.0]).to_csv("# engine=nss seed=1")
    assert text.splitlines() == ["# engine=nss seed=1", "value,fraction", "1.0,0.5", "3.0,1.0"]


# --- bands and deviation ----------------------------------------------------


def test_band_filter_is_inclusive():
    fl = [539_999_999, 540_000_000, 600_000_000, 660_000_000, 660_000_001]
    kept = flops_band_filter(recs([(0.1, f) for f in fl]), 600e6, 0.1)
    assert [r.flops for r in kept] == fl[1:4]
    assert [r.flops for r in flops_band_filter(recs([(0.1, f) for f in fl]), 600e6, 0.0)] == [600_000_000]
    with pytest.raises(ValueError):
        flops_band_filter([], 600e6, -0.1)


def test_deviation_examples():
    assert round(deviation(571e6, 600e6), 1) == 4.8
    assert deviation(600e6, 600e6) == 0.0
    assert deviation(660e6, 600e6) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        deviation(1.0, 0.0)


@settings(max_examples=1000)
@given(st.floats(0, 1e12), st.floats(1, 1e12))
def test_deviation_matches_flops_loss_exactly(f, t):
    assert deviation(f, t) / 100 == flops_loss(f, t)


# --- baselines and samples-to-constraint ------------------------------------


def test_random_baseline_singleton_and_mean():
    cfg = ExpandedSpaceConfig(depth_window=1, width_window=1)
    s = NetworkSpace((0, 1, 2), (10, 20, 30))
    out = random_baseline(cfg, s, SurrogateOracle(cfg), 5, np.random.default_rng(0))
    assert len(out) == 5 and len(set(out)) == 1
    s = NetworkSpace((1, 2, 0), (3, 4, 1))
    out = random_baseline(STANDARD, s, SurrogateOracle(STANDARD), 2000, np.random.default_rng(1))
    fl = np.array([r.flops for r in out], dtype=float)
    assert abs(fl.mean() - space_mean_flops(STANDARD, s)) <= 3 * fl.std(ddof=1) / math.sqrt(fl.size)
    assert all(r.flops == network_flops(STANDARD, r.config).total for r in out)
    again = random_baseline(STANDARD, s, SurrogateOracle(STANDARD), 2000, np.random.default_rng(1))
    assert again == out
    with pytest.raises(ValueError):
        random_baseline(STANDARD, s, SurrogateOracle(STANDARD), 0, np.random.default_rng(0))


def test_samples_to_constraint_basics():
    rng = np.random.default_rng(0)
    assert samples_to_constraint(lambda r: 600e6, 600e6, 0.1, 10, rng) == 1
    with pytest.raises(CapExhaustedError) as info:
        samples_to_constraint(lambda r: 1.0, 600e6, 0.1, 25, rng)
    assert info.value.draws == 25
    with pytest.raises(ValueError):
        samples_to_constraint(lambda r: 1.0, 600e6, 0.1, 0, rng)


@pytest.mark.parametrize("p", [0.1, 0.5])
def test_samples_to_constraint_is_geometric(p):
    rng = np.random.default_rng(int(p * 10))
    sampler = lambda r: 600e6 if r.random() < p else 1.0  # noqa: E731
    counts = [samples_to_constraint(sampler, 600e6, 0.1, 10_000, rng) for _ in range(10_000)]
    assert abs(np.mean(counts) * p - 1) <= 0.05


# --- CSV --------------------------------------------------------------------


def test_records_csv_round_trip_and_checks():
    cfg = STANDARD
    rs = [EvalRecord(a, network_flops(cfg, a).total, e)
          for a, e in [(NetworkConfig((1, 2, 3), (4, 5, 6)), 0.25), (NetworkConfig((16, 1, 1), (512, 1, 9)), 1 / 3)]]
    text = records_to_csv(rs, 3, "# engine=nss config=abc seed=0")
    assert text.splitlines()[1] == "d1,d2,d3,w1,w2,w3,flops,error"
    assert records_from_csv(text, cfg) == rs
    with pytest.raises(ValueError, match="empty"):
        records_from_csv("# only a comment\n")
    with pytest.raises(ValueError, match="header"):
        records_from_csv("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="row 2"):
        records_from_csv("d1,w1,flops,error\n1,x,3,0.5\n")
    with pytest.raises(ValueError, match="disagree"):
        records_from_csv(text.replace(str(rs[0].flops), str(rs[0].flops + 1)), cfg)


# --- elite-space statistics -------------------------------------------------


def test_ordering_pattern_examples():
    cfg = ExpandedSpaceConfig(depth_window=1, width_window=32)
    s = NetworkSpace((1, 13, 5), (0, 0, 0))
    st_ = space_ordering_stats(cfg, [s])
    assert list(st_.depth_midpoints[0]) == [2, 14, 6]
    assert st_.depth_patterns == ("d1<=d3<=d2",)
    assert st_.width_patterns == ("w1=w2=w3",)
    assert order_pattern([3, 3, 1], "w") == "w3<=w1=w2"


def test_ordering_frequencies_sum_to_one():
    rng = np.random.default_rng(0)
    spaces = [NetworkSpace(tuple(rng.integers(0, 4, 3)), tuple(rng.integers(0, 16, 3))) for _ in range(40)]
    st_ = space_ordering_stats(STANDARD, spaces)
    assert sum(st_.depth_frequencies.values()) == pytest.approx(1.0)
    assert sum(st_.width_frequencies.values()) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        space_ordering_stats(STANDARD, [])


# --- complexity sweep -------------------------------------------------------

SWEEP = SearchConfig(epochs=2, steps_per_epoch=25, archs_per_space=2, flops_target=600e6,
                     flops_penalty_level="space_mean", mean_flops_samples=512)


def test_complexity_sweep_narrow_universe_is_denser():
    rows = complexity_sweep([with_width_cap(STANDARD, 128), STANDARD], SurrogateOracle, SWEEP, n_eval=400)
    assert [r.variant.w_max for r in rows] == [128, 512]
    assert rows[0].nas_band_fraction > rows[1].nas_band_fraction
    again = complexity_sweep([with_width_cap(STANDARD, 128)], SurrogateOracle, SWEEP, n_eval=400)
    assert len(again) == 1
    assert again[0].nas_band_fraction == rows[0].nas_band_fraction
    assert again[0].elite == rows[0].elite
