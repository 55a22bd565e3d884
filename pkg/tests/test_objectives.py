import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nss.analysis import EvalRecord, pareto_front
from nss.errors import ConfigNotFoundError, ConfigurationError, OracleError, OracleTransportError
from nss.objectives import (
    ExternalProcessOracle,
    FlopsTarget,
    LossWeights,
    OracleSpec,
    SurrogateOracle,
    TabularOracle,
    combined_loss,
    evaluate_many,
    flops_loss,
    make_oracle,
    oracle_eval,
    space_task_loss_estimate,
    worker_count,
)
from nss.space_model import ExpandedSpaceConfig, NetworkConfig, NetworkSpace, enumerate_space, network_flops

STANDARD = ExpandedSpaceConfig()
SMALL = ExpandedSpaceConfig(num_stages=2, d_max=4, depth_window=2, w_max=8, width_window=4, input_resolution=8)
FIXTURE = Path(__file__).parent / "fixtures" / "line_oracle.py"


def test_flops_loss_examples():
    assert flops_loss(600e6, FlopsTarget(600e6)) == 0
    assert flops_loss(660e6, FlopsTarget(600e6)) == pytest.approx(0.1, abs=1e-15)
    assert flops_loss(0, 600e6) == 1
    with pytest.raises(ValueError):
        flops_loss(-1, 600e6)
    with pytest.raises(ConfigurationError):
        FlopsTarget(0)


@settings(max_examples=200)
@given(st.floats(0, 1e10), st.floats(0, 1e10), st.floats(1, 1e10))
def test_flops_loss_is_1_lipschitz_in_ratio(f1, f2, t):
    a, b = flops_loss(f1, t), flops_loss(f2, t)
    assert a >= 0
    assert abs(a - b) <= abs(f1 / t - f2 / t) + 1e-12
    assert (a == 0) == (f1 == t)


def test_combined_loss_examples():
    assert combined_loss(0.37, 0.9, LossWeights(0.0)) == 0.37
    assert combined_loss(1.0, 0.5, LossWeights(2.0)) == 2.0
    assert LossWeights().lam == 10.0
    with pytest.raises(ConfigurationError):
        LossWeights(-0.1)


@given(st.floats(-10, 10), st.floats(0, 5), st.floats(0, 5), st.floats(0.01, 20))
def test_combined_loss_affine_and_monotone(task, f1, f2, lam):
    lo, hi = sorted([f1, f2])
    assert combined_loss(task, lo, lam) <= combined_loss(task, hi, lam)
    mid = combined_loss(task, (f1 + f2) / 2, lam)
    assert mid == pytest.approx((combined_loss(task, f1, lam) + combined_loss(task, f2, lam)) / 2, abs=1e-9)


def test_surrogate_is_pure_and_hash_seeded():
    o = SurrogateOracle(STANDARD, sigma=0.0)
    a = NetworkConfig((3, 7, 5), (50, 130, 90))
    assert o.evaluate(a) == o.evaluate(a)
    noisy, other = SurrogateOracle(STANDARD, seed=1), SurrogateOracle(STANDARD, seed=2)
    assert noisy.evaluate(a) == SurrogateOracle(STANDARD, seed=1).evaluate(a)
    assert noisy.evaluate(a) != other.evaluate(a)
    assert oracle_eval(noisy, a) == noisy.evaluate(a)


def test_surrogate_default_formula():
    o = SurrogateOracle(STANDARD, sigma=0.0)
    a = NetworkConfig((2, 8, 5), (51, 128, 92))
    f = network_flops(STANDARD, a).total
    expected = 0.03 + 0.5 * (f / 600e6) ** -0.45
    assert o.evaluate(a) == pytest.approx(expected, rel=1e-12)  # planted optimum: zero penalty


def test_surrogate_more_flops_lower_error_without_penalties():
    o = SurrogateOracle(STANDARD, sigma=0.0, gammas=0.0)
    narrow = NetworkConfig((4, 4, 4), (32, 64, 128))
    wide = NetworkConfig((4, 4, 4), (48, 96, 192))
    assert o.evaluate(wide) < o.evaluate(narrow)


def test_surrogate_front_is_flops_sorted_curve():
    o = SurrogateOracle(SMALL, sigma=0.0, gammas=0.0)
    whole = NetworkSpace((0, 0), (0, 0))
    wide = ExpandedSpaceConfig(num_stages=2, d_max=4, depth_window=4, w_max=8, width_window=8, input_resolution=8)
    recs = [EvalRecord(a, network_flops(wide, a).total, o.evaluate(a)) for a in enumerate_space(wide, whole)]
    front = pareto_front(recs)
    fl = [r.flops for r in front]
    err = [r.error for r in front]
    distinct = sorted({r.flops for r in recs})
    assert fl == distinct
    assert all(e1 > e2 for e1, e2 in zip(err, err[1:]))


def test_relaxed_loss_gradient_matches_finite_differences():
    o = SurrogateOracle(STANDARD, sigma=0.0)
    d = np.array([3.3, 7.1, 4.2])
    w = np.array([60.0, 140.0, 88.0])
    _, gd, gw = o.relaxed_loss(d, w, 600e6, 10.0)
    for vec, grad in ((d, gd), (w, gw)):
        for i in range(3):
            h = 1e-4 * max(1.0, abs(vec[i]))
            up, dn = vec.copy(), vec.copy()
            up[i] += h
            dn[i] -= h
            args_up = (up, w) if vec is d else (d, up)
            args_dn = (dn, w) if vec is d else (d, dn)
            fd = (o.relaxed_loss(*args_up, 600e6, 10.0)[0] - o.relaxed_loss(*args_dn, 600e6, 10.0)[0]) / (2 * h)
            assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-12)


def test_relaxed_flops_agrees_with_integer_model():
    o = SurrogateOracle(STANDARD)
    a = NetworkConfig((2, 5, 3), (40, 100, 300))
    f, _, _ = o.relaxed_flops(np.array(a.depths, float), np.array(a.widths, float))
    assert f == network_flops(STANDARD, a).total


def _write_table(path):
    path.write_text(
        "# hand-written fixture\n"
        "d1,d2,w1,w2,error\n"
        "1,1,1,1,0.5\n"
        "2,3,4,5,0.125\n"
        "4,4,8,8,0.0625\n"
    )
    return path


def test_tabular_exact_lookup_and_miss(tmp_path):
    o = TabularOracle(SMALL, _write_table(tmp_path / "t.csv"))
    assert o.evaluate(NetworkConfig((2, 3), (4, 5))) == 0.125
    assert o.evaluate(NetworkConfig((4, 4), (8, 8))) == 0.0625
    with pytest.raises(ConfigNotFoundError, match=r"\(2, 3\)"):
        o.evaluate(NetworkConfig((2, 3), (4, 6)))


def test_tabular_rejects_bad_files(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(ConfigurationError):
        TabularOracle(SMALL, tmp_path / "empty.csv")
    (tmp_path / "hdr.csv").write_text("d1,w1,d2,w2,error\n")
    with pytest.raises(ConfigurationError, match="header"):
        TabularOracle(SMALL, tmp_path / "hdr.csv")
    (tmp_path / "row.csv").write_text("d1,d2,w1,w2,error\n1,x,1,1,0.1\n")
    with pytest.raises(ConfigurationError, match="row 2"):
        TabularOracle(SMALL, tmp_path / "row.csv")


def _external(mode, timeout=10.0):
    return ExternalProcessOracle([sys.executable, str(FIXTURE), mode], timeout=timeout)


def test_external_process_round_trips():
    with _external("ok") as o:
        assert o.evaluate(NetworkConfig((1, 2), (3, 4))) == pytest.approx(0.03 + 7e-4)
        assert o.evaluate(NetworkConfig((4, 4), (8, 8))) == pytest.approx(0.08 + 16e-4)


def test_external_process_reported_error_echoes_config():
    with _external("reject") as o:
        assert o.evaluate(NetworkConfig((1, 1), (1, 1))) > 0
        with pytest.raises(OracleError, match="depth too large") as info:
            o.evaluate(NetworkConfig((2, 1), (1, 1)))
        assert info.value.config == NetworkConfig((2, 1), (1, 1))
        assert not isinstance(info.value, OracleTransportError)


@pytest.mark.parametrize("mode", ["quit", "wrong-id"])
def test_external_process_transport_failures(mode):
    a = NetworkConfig((1, 2), (3, 4))
    with _external(mode) as o:
        with pytest.raises(OracleTransportError) as info:
            o.evaluate(a)
    assert info.value.config == a


def test_external_process_timeout():
    a = NetworkConfig((1, 2), (3, 4))
    with _external("hang", timeout=0.5) as o:
        with pytest.raises(OracleTransportError, match="timed out") as info:
            o.evaluate(a)
    assert info.value.config == a


def test_external_process_missing_binary():
    with pytest.raises(OracleTransportError):
        ExternalProcessOracle(["/nonexistent/oracle"]).evaluate(NetworkConfig((1, 1), (1, 1)))


def test_oracle_spec_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        OracleSpec("crystal_ball")
    with pytest.raises(ConfigurationError):
        OracleSpec.from_dict({"sigma": 0})
    spec = OracleSpec.from_dict({"kind": "analytic_surrogate", "sigma": 0.0, "seed": 3})
    assert spec.to_dict() == {"kind": "analytic_surrogate", "sigma": 0.0, "seed": 3}
    assert isinstance(make_oracle(spec, STANDARD), SurrogateOracle)
    with pytest.raises(ConfigurationError):
        make_oracle(OracleSpec("tabular"), SMALL)
    with pytest.raises(ConfigurationError):
        make_oracle(OracleSpec("external_process"), SMALL)
    with pytest.raises(ConfigurationError):
        make_oracle(OracleSpec("toy_supernet"), SMALL)
    table = make_oracle(OracleSpec("tabular", {"path": str(_write_table(tmp_path / "t.csv"))}), SMALL)
    assert table.evaluate(NetworkConfig((1, 1), (1, 1))) == 0.5


def test_space_estimate_singleton_and_m1():
    o = SurrogateOracle(STANDARD)
    cfg = ExpandedSpaceConfig(depth_window=1, width_window=1)
    s = NetworkSpace((2, 5, 1), (30, 100, 200))
    (a,) = list(enumerate_space(cfg, s))
    mean, err = space_task_loss_estimate(o, cfg, s, 1, np.random.default_rng(0))
    assert (mean, err) == (o.evaluate(a), 0.0)
    with pytest.raises(ValueError):
        space_task_loss_estimate(o, cfg, s, 0, np.random.default_rng(0))


def test_space_estimate_matches_enumeration_mean():
    o = SurrogateOracle(SMALL, f_ref=1e4)
    s = NetworkSpace((1, 0), (0, 1))
    exact = np.mean([o.evaluate(a) for a in enumerate_space(SMALL, s)])
    rng = np.random.default_rng(1)
    mean, err = space_task_loss_estimate(o, SMALL, s, 4000, rng)
    assert abs(mean - exact) <= 3 * err
    # unbiasedness: the average of many small estimates converges on the same mean
    ests = np.array([space_task_loss_estimate(o, SMALL, s, 4, rng)[0] for _ in range(2000)])
    assert abs(ests.mean() - exact) <= 3 * ests.std(ddof=1) / np.sqrt(ests.size)


def test_space_estimate_propagates_oracle_errors(tmp_path):
    o = TabularOracle(SMALL, _write_table(tmp_path / "t.csv"))
    with pytest.raises(ConfigNotFoundError):
        space_task_loss_estimate(o, SMALL, NetworkSpace((0, 0), (1, 1)), 3, np.random.default_rng(0))


def test_parallel_evaluation_preserves_order(monkeypatch):
    o = SurrogateOracle(STANDARD)
    configs = [NetworkConfig((1 + i % 16, 2, 3), (10 + i, 20, 30)) for i in range(64)]
    serial = evaluate_many(o, configs)
    monkeypatch.setenv("NSS_THREADS", "4")
    assert worker_count() == 4
    assert evaluate_many(o, configs) == serial
    monkeypatch.setenv("NSS_THREADS", "0")
    assert worker_count() == 1
