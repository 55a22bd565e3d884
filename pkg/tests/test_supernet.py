import numpy as np
import pytest

from nss.sampling import sample_architecture_uniform
from nss.search import SearchConfig
from nss.space_model import ExpandedSpaceConfig, NetworkConfig, NetworkSpace, full_space, space_mean_flops
from nss.supernet import (
    MaskSpec,
    SupernetConfig,
    SupernetOracle,
    SyntheticTask,
    TrainingDivergedError,
    WarmupSchedule,
    bilevel_nss,
    init_params,
    load_params,
    masked_backward,
    masked_forward,
    mean_loss,
    save_params,
    sgd_update,
    train_supernet,
    warmup_mask,
    weight_step,
)
from oracles import sliced_forward

CFG = ExpandedSpaceConfig(num_stages=2, d_max=4, depth_window=2, w_max=16, width_window=8,
                          input_resolution=8, input_channels=8, stem_width=4, num_classes=4)
TASK = SyntheticTask(input_dim=8, output_dim=4)


def _params(seed=0, cfg=CFG):
    p = init_params(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    # nonzero biases so every bias pathway is exercised
    for k, v in p.arrays.items():
        if k.endswith("b") or k.endswith(".a"):
            v += 0.1 * rng.normal(size=v.shape)
    return p


def _random_config(rng, cfg=CFG):
    return NetworkConfig(tuple(int(v) for v in rng.integers(1, cfg.d_max + 1, cfg.num_stages)),
                         tuple(int(v) for v in rng.integers(1, cfg.w_max + 1, cfg.num_stages)))


def test_masking_equals_sliced_network_bitwise():
    params = _params()
    rng = np.random.default_rng(1)
    x = rng.normal(size=(32, 8))
    for _ in range(50):
        a = _random_config(rng)
        y, _ = masked_forward(params, MaskSpec.from_config(a), x)
        np.testing.assert_array_equal(y, sliced_forward(params.arrays, a.depths, a.widths, x))


def test_full_mask_equals_dense_forward():
    params = _params()
    x = np.random.default_rng(2).normal(size=(16, 8))
    full = NetworkConfig((4, 4), (16, 16))
    y, _ = masked_forward(params, MaskSpec.from_config(full), x)
    np.testing.assert_array_equal(y, sliced_forward(params.arrays, full.depths, full.widths, x))


def test_zero_input_follows_bias_pathway():
    cfg = ExpandedSpaceConfig(num_stages=1, d_max=1, depth_window=1, w_max=3, width_window=3,
                              input_resolution=4, input_channels=2, stem_width=2, num_classes=2)
    p = _params(cfg=cfg)
    A = p.arrays
    h = np.maximum(A["stem.b"], 0) @ A["s0.proj.W"] + A["s0.proj.b"]
    inner = np.maximum(h @ A["s0.A"][0] + A["s0.a"][0], 0) @ A["s0.B"][0] + A["s0.b"][0]
    h = np.maximum(h + A["s0.scale"][0] * inner, 0)
    expected = h @ A["head.W"] + A["head.b"]
    y, _ = masked_forward(p, MaskSpec((1,), (3,)), np.zeros((1, 2)))
    np.testing.assert_allclose(y[0], expected, rtol=1e-14)


def test_forward_rejects_bad_shapes():
    p = _params()
    with pytest.raises(ValueError):
        masked_forward(p, MaskSpec((1, 1), (1, 1)), np.zeros((3, 5)))
    with pytest.raises(ValueError):
        masked_forward(p, MaskSpec((1,), (1,)), np.zeros((3, 8)))
    with pytest.raises(ValueError):
        masked_forward(p, MaskSpec((1, 1), (1, 17)), np.zeros((3, 8)))


def _fd_check(params, mask, x, target, loss_kind, h=1e-4):
    _, grads = masked_backward(params, mask, x, target, loss_kind)
    worst = 0.0
    for k, arr in params.arrays.items():
        g = grads[k]
        scale = np.abs(g).max() + 1e-12
        for idx in zip(*np.nonzero(g)):
            old = arr[idx]
            arr[idx] = old + h
            up = mean_loss(params, mask, x, target, loss_kind)
            arr[idx] = old - h
            dn = mean_loss(params, mask, x, target, loss_kind)
            arr[idx] = old
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), 1e-3 * scale))
    return worst


@pytest.mark.parametrize("loss_kind", ["mse", "ce"])
def test_backward_matches_finite_differences(loss_kind):
    cfg = ExpandedSpaceConfig(num_stages=1, d_max=2, depth_window=1, w_max=4, width_window=2,
                              input_resolution=4, input_channels=3, stem_width=3, num_classes=3)
    params = _params(3, cfg)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 3))
    target = rng.integers(0, 3, 6) if loss_kind == "ce" else rng.normal(size=(6, 3))
    assert _fd_check(params, MaskSpec((2,), (3,)), x, target, loss_kind) <= 1e-5


def test_backward_matches_finite_differences_two_stages():
    params = _params(5)
    rng = np.random.default_rng(6)
    x, t = rng.normal(size=(5, 8)), rng.normal(size=(5, 4))
    assert _fd_check(params, MaskSpec((2, 3), (5, 7)), x, t, "mse") <= 1e-5


def test_masked_out_gradients_are_exactly_zero():
    params = _params()
    rng = np.random.default_rng(7)
    x, t = rng.normal(size=(10, 8)), rng.normal(size=(10, 4))
    _, g = masked_backward(params, MaskSpec((2, 1), (5, 9)), x, t)
    assert not g["s0.A"][2:].any() and not g["s1.A"][1:].any()
    assert not g["s0.A"][:, 5:, :].any() and not g["s0.A"][:, :, 5:].any()
    assert not g["s1.proj.W"][5:].any() and not g["s1.proj.W"][:, 9:].any()
    assert not g["head.W"][9:].any()
    assert not g["s0.scale"][2:].any()


def test_duplicated_batch_leaves_gradient_unchanged():
    params = _params()
    rng = np.random.default_rng(8)
    x, t = rng.normal(size=(7, 8)), rng.normal(size=(7, 4))
    mask = MaskSpec((3, 2), (10, 6))
    l1, g1 = masked_backward(params, mask, x, t)
    l2, g2 = masked_backward(params, mask, np.vstack([x, x]), np.vstack([t, t]))
    assert l1 == pytest.approx(l2, rel=1e-13)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)


def test_step_changes_only_active_weights():
    params = _params()
    rng = np.random.default_rng(9)
    base = MaskSpec((2, 1), (6, 3))
    mask = warmup_mask(base, WarmupSchedule(0.5, 10), 2, rng, CFG.d_max, CFG.w_max)
    _, g = masked_backward(params, mask, rng.normal(size=(8, 8)), rng.normal(size=(8, 4)))
    new = sgd_update(params, g, 0.1)
    for i in range(2):
        ch, bl = set(mask.channels(i)), set(mask.blocks(i))
        changed = np.argwhere(new[f"s{i}.A"] != params[f"s{i}.A"])
        assert changed.size and all(j in bl and r in ch and c in ch for j, r, c in changed)


def test_warmup_schedule_endpoints_exact():
    s = WarmupSchedule(0.8, 100)
    assert s.probability(0) == 0.8
    assert s.probability(100) == 0.0 and s.probability(1000) == 0.0
    assert s.probability(25) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        WarmupSchedule(1.5, 10)


def test_warmup_mask_examples():
    base = MaskSpec((1, 2), (3, 4))
    rng = np.random.default_rng(0)
    assert warmup_mask(base, WarmupSchedule(1.0, 10), 10, rng, 4, 16) is base
    full = warmup_mask(base, WarmupSchedule(1.0, 10), 0, rng, 4, 16)
    assert all(list(full.channels(i)) == list(range(16)) for i in range(2))
    assert all(full.blocks(i) == [0, 1, 2, 3] for i in range(2))
    with pytest.raises(ValueError):
        warmup_mask(base, WarmupSchedule(1.0, 10), -1, rng, 4, 16)


def test_warmup_enablement_frequency_at_half_duration():
    base = MaskSpec((1,), (1,))
    rng = np.random.default_rng(1)
    sched = WarmupSchedule(1.0, 200)
    hits = sum(len(warmup_mask(base, sched, 100, rng, 2, 2).extra_channels[0]) for _ in range(10_000))
    assert abs(hits - 5000) <= 3 * np.sqrt(10_000 * 0.25)


def test_mask_rejects_overlapping_extras():
    with pytest.raises(ValueError):
        MaskSpec((2,), (4,), extra_channels=(frozenset({3}),))
    with pytest.raises(ValueError):
        MaskSpec((2,), (4,), extra_blocks=(frozenset({1}),))


def test_task_split_is_disjoint():
    d = TASK.data()
    assert set(d["train_idx"]).isdisjoint(d["val_idx"])
    assert len(d["train_idx"]) == len(d["val_idx"]) == 512


def _uniform_sampler(cfg):
    _, whole = full_space(cfg)
    return lambda rng: sample_architecture_uniform(cfg.single_window(), whole, rng)


def test_training_halves_the_loss():
    sn = SupernetConfig()
    _, trace = train_supernet(TASK, CFG, sn, _uniform_sampler(CFG), np.random.default_rng(0))
    assert sn.steps == 2000 and len(trace) == 2000
    assert trace[-100:].mean() <= 0.5 * trace[:100].mean()


def test_zero_lr_and_determinism():
    sn = SupernetConfig(lr=0.0, steps=20)
    init = init_params(CFG, np.random.default_rng(0))
    frozen, _ = train_supernet(TASK, CFG, sn, _uniform_sampler(CFG), np.random.default_rng(0))
    assert frozen.digest() == init.digest()
    sn = SupernetConfig(steps=50)
    a, _ = train_supernet(TASK, CFG, sn, _uniform_sampler(CFG), np.random.default_rng(3))
    b, _ = train_supernet(TASK, CFG, sn, _uniform_sampler(CFG), np.random.default_rng(3))
    assert a.digest() == b.digest()


def test_divergence_is_reported():
    params = init_params(CFG, np.random.default_rng(0), init_scale=1e200)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError, match="step 0"):
        weight_step(params, NetworkConfig((4, 4), (16, 16)), TASK, SupernetConfig(), WarmupSchedule(), 0,
                    np.random.default_rng(0))


def test_oracle_is_read_only_and_repeatable():
    params = _params()
    oracle = SupernetOracle(params, TASK, CFG)
    before = params.digest()
    a = NetworkConfig((3, 1), (7, 12))
    assert oracle.evaluate(a) == oracle.evaluate(a)
    assert params.digest() == before
    full = NetworkConfig((4, 4), (16, 16))
    d = TASK.data()
    dense = sliced_forward(params.arrays, full.depths, full.widths, d["x_val"])
    assert oracle.evaluate(full) == pytest.approx(0.5 * np.sum((dense - d["y_val"]) ** 2) / len(dense), rel=1e-14)


def test_params_round_trip(tmp_path):
    params = _params()
    save_params(tmp_path / "sn.json", params, TASK, CFG, seed=0, step=7)
    back, task = load_params(tmp_path / "sn.json")
    assert back.digest() == params.digest() and task == TASK
    blob = tmp_path / "sn.bin"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 1
    blob.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="digest"):
        load_params(tmp_path / "sn.json")


def _bilevel_search(target, **kw):
    base = dict(epochs=4, steps_per_epoch=25, archs_per_space=4, flops_target=target)
    base.update(kw)
    return SearchConfig(**base)


# Finer windows than CFG, so several spaces sit near the target.
BILEVEL_CFG = ExpandedSpaceConfig(num_stages=2, d_max=4, depth_window=1, w_max=16, width_window=4,
                                  input_resolution=8, input_channels=8, stem_width=4, num_classes=4)


def _toy_target():
    # mean FLOPs of a mid-sized space, so a compliant space exists by construction
    return space_mean_flops(BILEVEL_CFG, NetworkSpace((1, 1), (1, 2)))


def test_bilevel_warmup_updates_weights_only():
    search = _bilevel_search(_toy_target(), warmup_fraction=0.5)
    seen = []
    bilevel_nss(TASK, BILEVEL_CFG, search, SupernetConfig(),
                on_step=lambda st: seen.append(st.theta.factors()[0].copy()))
    assert all(not f.any() for f in seen[: search.warmup_steps])
    assert seen[search.warmup_steps].any()


def test_bilevel_finds_compliant_space_deterministically():
    search = _bilevel_search(_toy_target())
    state, elite, params = bilevel_nss(TASK, BILEVEL_CFG, search, SupernetConfig())
    assert elite.deviation <= 0.10
    state2, elite2, params2 = bilevel_nss(TASK, BILEVEL_CFG, search, SupernetConfig())
    assert elite2 == elite and params2.digest() == params.digest()
    assert state2.history == state.history
