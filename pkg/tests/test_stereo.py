import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from depthbench import ops, stereo
from depthbench.gradcheck import grad_check
from depthbench.nn import count_flops, count_parameters
from depthbench.stereo import AnyNetConfig, CostVolume, build_anynet
from depthbench.tensor import Tensor

TOL = 1e-12


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def _weighted(out, seed=0):
    return ops.sum(out * np.random.default_rng(seed).standard_normal(out.shape))


# ---------------------------------------------------------------------------
# cost volumes, warping, regression
# ---------------------------------------------------------------------------


def test_full_cost_volume_matches_loops():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, c, h, w = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 7)
        d = int(rng.integers(1, w + 1))
        fl, fr = rng.standard_normal((n, c, h, w)), rng.standard_normal((n, c, h, w))
        cv = stereo.cost_volume_full(_t(fl), _t(fr), d)
        assert cv.depth == d and cv.base == 0.0 and cv.step == 1.0
        np.testing.assert_allclose(cv.cost.data, oracles.shift_cost(fl, fr, range(d)), rtol=0, atol=TOL)


def test_residual_cost_volume_matches_loops():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, c, h, w = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(3, 8)
        k = int(rng.integers(1, 3))
        fl, fr = rng.standard_normal((n, c, h, w)), rng.standard_normal((n, c, h, w))
        base = rng.uniform(0, 3, (n, 1, h, w))
        cv = stereo.cost_volume_residual(_t(fl), _t(fr), k, _t(base))
        np.testing.assert_allclose(cv.cost.data, oracles.shift_cost(fl, fr, range(-k, k + 1)), rtol=0, atol=TOL)
        np.testing.assert_allclose(cv.base.data, base - k, rtol=0, atol=TOL)


def test_cost_volume_too_many_candidates():
    with pytest.raises(ValueError):
        stereo.cost_volume_full(_t(np.zeros((1, 1, 2, 4))), _t(np.zeros((1, 1, 2, 4))), 5)
    with pytest.raises(ValueError):
        stereo.cost_volume_full(_t(np.zeros((1, 1, 2, 4))), _t(np.zeros((1, 2, 2, 4))), 2)


def test_matching_shift_has_zero_cost():
    rng = np.random.default_rng(2)
    fr = rng.standard_normal((1, 3, 4, 10))
    fl = np.roll(fr, 3, axis=-1)
    cv = stereo.cost_volume_full(_t(fl), _t(fr), 5)
    assert np.all(cv.cost.data[0, 3, :, 3:] == 0.0)


def test_warp_matches_loops():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, c, h, w = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4), rng.integers(2, 8)
        fr = rng.standard_normal((n, c, h, w))
        d = rng.uniform(-2, w + 1, (n, 1, h, w))
        got = stereo.warp_with_disparity(_t(fr), _t(d)).data
        np.testing.assert_allclose(got, oracles.warp(fr, d), rtol=0, atol=TOL)


@given(seed=st.integers(0, 2**31), s=st.integers(0, 4))
def test_integer_warp_is_a_shift(seed, s):
    fr = np.random.default_rng(seed).standard_normal((1, 2, 3, 9))
    out = stereo.warp_with_disparity(_t(fr), _t(np.full((1, 1, 3, 9), float(s)))).data
    np.testing.assert_array_equal(out[..., s:], fr[..., :9 - s])


def test_warp_shape_error():
    with pytest.raises(ValueError):
        stereo.warp_with_disparity(_t(np.zeros((1, 2, 3, 4))), _t(np.zeros((1, 2, 3, 4))))


def test_soft_argmin_matches_loops():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n, d, h, w = rng.integers(1, 3), rng.integers(1, 6), rng.integers(1, 4), rng.integers(1, 4)
        cost = rng.standard_normal((n, d, h, w)) * 3
        if rng.uniform() < 0.5:
            base, step = float(rng.uniform(-2, 2)), float(rng.uniform(0.5, 2))
            got = stereo.soft_argmin(CostVolume(_t(cost), base, step)).data
            want = oracles.soft_argmin(cost, base, step)
        else:
            base = rng.uniform(-2, 2, (n, 1, h, w))
            got = stereo.soft_argmin(CostVolume(_t(cost), _t(base), 1.0)).data
            want = oracles.soft_argmin(cost, base)
        np.testing.assert_allclose(got, want, rtol=0, atol=TOL)


@given(seed=st.integers(0, 2**31), d=st.integers(2, 8))
def test_soft_argmin_within_candidate_range(seed, d):
    cost = np.random.default_rng(seed).standard_normal((1, d, 3, 3)) * 10
    out = stereo.soft_argmin(CostVolume(_t(cost))).data
    assert np.all(out >= 0) and np.all(out <= d - 1)


def test_soft_argmin_peaked_cost_recovers_candidate():
    cost = np.full((1, 5, 1, 1), 100.0)
    cost[0, 3] = 0.0
    assert abs(stereo.soft_argmin(CostVolume(_t(cost))).item() - 3.0) < 1e-12


def test_regression_gradients():
    rng = np.random.default_rng(5)
    fl, fr = _t(rng.standard_normal((1, 2, 2, 6))), _t(rng.standard_normal((1, 2, 2, 6)))
    assert grad_check(lambda: _weighted(stereo.cost_volume_full(fl, fr, 3).cost), [fl, fr]) < 1e-6
    base = _t(rng.uniform(0, 2, (1, 1, 2, 6)))
    assert grad_check(lambda: _weighted(stereo.cost_volume_residual(fl, fr, 2, base).cost), [fl, fr]) < 1e-6
    d = _t(rng.uniform(0.2, 4.8, (1, 1, 2, 6)) + 0.013)
    assert grad_check(lambda: _weighted(stereo.warp_with_disparity(fr, d)), [fr, d]) < 1e-6
    cost = _t(rng.standard_normal((2, 4, 2, 3)))
    b = _t(rng.standard_normal((2, 1, 2, 3)))
    assert grad_check(lambda: _weighted(stereo.soft_argmin(CostVolume(cost, b, 1.0))), [cost, b]) < 1e-6


# ---------------------------------------------------------------------------
# spatial propagation
# ---------------------------------------------------------------------------


def _scan_weights(rng, g, h, w):
    raw = rng.uniform(0, 1, (1, g, 3, h, w))
    return raw / (raw.sum(axis=2, keepdims=True) + rng.uniform(0.1, 1.0))


def test_scan_matches_loops_in_every_direction():
    rng = np.random.default_rng(6)
    for trial in range(100):
        h, w = rng.integers(1, 5), rng.integers(1, 6)
        d = rng.standard_normal((1, 1, h, w))
        wts = _scan_weights(rng, 1, h, w)
        direction = stereo._DIRECTIONS[trial % 4]
        got = stereo.spn_scan(_t(d), _t(wts), direction).data[0, 0]
        # re-express every direction as a left-to-right scan of a transformed map
        flip = {"lr": lambda a: a, "rl": lambda a: a[..., ::-1],
                "tb": lambda a: np.swapaxes(a, -1, -2), "bt": lambda a: np.swapaxes(a, -1, -2)[..., ::-1]}[direction]
        want = oracles.spn_scan_lr(flip(d[0, 0]), flip(wts[0, 0]))
        unflip = {"lr": want, "rl": want[..., ::-1], "tb": want.T, "bt": want[..., ::-1].T}[direction]
        np.testing.assert_allclose(got, unflip, rtol=0, atol=TOL)


def test_zero_affinity_is_identity():
    d = np.random.default_rng(7).standard_normal((2, 1, 5, 6))
    out = stereo.spn_propagate(_t(d), _t(np.zeros((2, 6, 5, 6)))).data
    np.testing.assert_allclose(out, d, atol=1e-15)


@given(seed=st.integers(0, 2**31), groups=st.sampled_from([1, 2, 4]))
def test_propagation_is_convex(seed, groups):
    rng = np.random.default_rng(seed)
    d = rng.uniform(-3, 3, (1, 1, 4, 5))
    aff = rng.standard_normal((1, 3 * groups, 4, 5)) * 5
    out = stereo.spn_propagate(_t(d), _t(aff)).data
    assert out.min() >= d.min() - 1e-12 and out.max() <= d.max() + 1e-12
    const = stereo.spn_propagate(_t(np.full_like(d, 2.5)), _t(aff)).data
    np.testing.assert_allclose(const, 2.5, atol=1e-12)


def test_spn_gradients():
    rng = np.random.default_rng(8)
    d = _t(rng.standard_normal((1, 1, 4, 5)))
    wts = _t(_scan_weights(rng, 2, 4, 5))
    for direction in stereo._DIRECTIONS:
        assert grad_check(lambda: _weighted(stereo.spn_scan(d, wts, direction)), [d, wts]) < 1e-6
    aff = _t(rng.standard_normal((1, 6, 4, 5)))
    assert grad_check(lambda: _weighted(stereo.spn_propagate(d, aff)), [d, aff]) < 1e-6


def test_spn_refine_and_errors():
    rng = np.random.default_rng(9)
    d, rgb = rng.uniform(0, 4, (1, 1, 6, 8)), rng.uniform(0, 1, (1, 3, 6, 8))
    a = stereo.spn_refine(d, rgb, 4, seed=3).data
    b = stereo.spn_refine(d, rgb, 4, seed=3).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == d.shape
    with pytest.raises(ValueError):
        stereo.spn_refine(d, rgb, 3)
    with pytest.raises(ValueError):
        stereo.spn_scan(_t(d), _t(np.zeros((1, 1, 3, 6, 8))), "diag")
    with pytest.raises(ValueError):
        stereo.spn_propagate(_t(d), _t(np.zeros((1, 4, 6, 8))))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

SWEEP_TRAINABLE = {None: 34629, 1: 34827, 2: 35277, 4: 36933, 8: 43269}


def test_spn_sweep_parameter_counts():
    counts = {c: count_parameters(build_anynet(AnyNetConfig(spn_channels=c)).store)["trainable"]
              for c in stereo.SPN_SWEEP}
    assert counts == SWEEP_TRAINABLE
    values = [counts[c] for c in stereo.SPN_SWEEP]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_spn_closed_form_increment():
    base = SWEEP_TRAINABLE[None]
    for c in (1, 2, 4, 8):
        # guidance convs 4->2c->2c->2c->3c, 3x3, no bias
        assert SWEEP_TRAINABLE[c] - base == 9 * (4 * 2 * c + 2 * (2 * c) ** 2 + 2 * c * 3 * c)


def test_config_validation():
    with pytest.raises(ValueError):
        AnyNetConfig(max_disparity=40)
    with pytest.raises(ValueError):
        AnyNetConfig(spn_channels=3)
    with pytest.raises(ValueError):
        AnyNetConfig(stage_loss_weights=(1, 1))


@pytest.fixture(scope="module")
def small_net():
    return build_anynet(AnyNetConfig(max_disparity=32, spn_channels=2), seed=4)


@pytest.fixture(scope="module")
def pair():
    rng = np.random.default_rng(10)
    return rng.uniform(0, 1, (2, 3, 32, 64)), rng.uniform(0, 1, (2, 3, 32, 64))


def test_anytime_outputs_invariant_to_stopping_stage(small_net, pair):
    small_net.eval()
    full = small_net(_t(pair[0]), _t(pair[1]), 4)
    assert len(full) == 4 and all(o.shape == (2, 1, 32, 64) for o in full)
    for k in (1, 2, 3):
        part = small_net(_t(pair[0]), _t(pair[1]), k)
        assert len(part) == k
        for a, b in zip(part, full):
            np.testing.assert_array_equal(a.data, b.data)
    small_net.train()


def test_mac_counts_increase_with_stage(small_net):
    macs = [count_flops(small_net, (1, 3, 32, 64), up_to_stage=k)["total"] for k in (1, 2, 3, 4)]
    assert macs[0] < macs[1] < macs[2] < macs[3]


def test_forward_errors(small_net, pair):
    with pytest.raises(ValueError):
        small_net(_t(pair[0]), _t(pair[1]), 5)
    with pytest.raises(ValueError):
        small_net(_t(pair[0][..., :40]), _t(pair[1][..., :40]))


def test_no_spn_stage4_repeats_stage3(pair):
    net = build_anynet(AnyNetConfig(max_disparity=32, spn_channels=None))
    out = net(_t(pair[0]), _t(pair[1]))
    np.testing.assert_array_equal(out[2].data, out[3].data)


def test_end_to_end_gradient(pair):
    net = build_anynet(AnyNetConfig(max_disparity=32, spn_channels=1), seed=5)
    rng = np.random.default_rng(11)
    target = rng.uniform(0, 12, (2, 1, 32, 64))
    mask = np.ones_like(target)

    def loss():
        outs = net(_t(pair[0]), _t(pair[1]))
        return stereo.stereo_total_loss(outs, target, mask, net.config.stage_loss_weights)

    assert grad_check(loss, net.store.trainable(), n_samples=20, seed=2) < 1e-4


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------


@given(beta=st.floats(0.1, 5.0))
def test_smooth_l1_knee_continuity(beta):
    target = np.zeros((1,))
    below = stereo.smooth_l1_loss(_t(np.array([np.nextafter(beta, 0)])), target, np.ones(1), beta).item()
    above = stereo.smooth_l1_loss(_t(np.array([beta])), target, np.ones(1), beta).item()
    assert abs(below - beta / 2) < 1e-12 and abs(above - beta / 2) < 1e-12


def test_smooth_l1_values():
    pred = _t(np.array([0.5, -2.0, 0.0]))
    got = stereo.smooth_l1_loss(pred, np.zeros(3), np.array([1, 1, 0])).item()
    assert abs(got - (0.125 + 1.5) / 2) < 1e-15
    with pytest.raises(ValueError):
        stereo.smooth_l1_loss(pred, np.zeros(3), np.ones(3), beta=0)


def test_smooth_l1_gradient():
    rng = np.random.default_rng(12)
    p = _t(rng.uniform(-3, 3, (2, 1, 4, 4)))
    t = rng.uniform(-3, 3, (2, 1, 4, 4))
    assert grad_check(lambda: stereo.smooth_l1_loss(p, t, np.ones_like(t), 1.0), [p]) < 1e-6


def test_three_pixel_error_trivial_cases():
    t = np.arange(12.0).reshape(1, 3, 4)
    m = np.ones_like(t)
    assert stereo.three_pixel_error(t, t, m) == 0.0
    assert stereo.three_pixel_error(t + 3.0, t, m) == 0.0
    assert stereo.three_pixel_error(t + 3.5, t, m) == 1.0
    half = t.copy()
    half[..., :2] += 10
    assert stereo.three_pixel_error(half, t, m) == 0.5
    assert stereo.three_pixel_error(t + 100, t, np.zeros_like(m) + (t < 1)) == 1.0
    # kitti variant also needs the error to exceed 5% of the true value
    big = np.full((1, 2, 2), 100.0)
    assert stereo.three_pixel_error(big + 4, big, np.ones_like(big), "kitti") == 0.0
    assert stereo.three_pixel_error(big + 6, big, np.ones_like(big), "kitti") == 1.0
    with pytest.raises(ValueError):
        stereo.three_pixel_error(t, t, np.zeros_like(m))
    with pytest.raises(ValueError):
        stereo.three_pixel_error(t, t, m, "middlebury")


def test_total_loss_weights_mismatch():
    with pytest.raises(ValueError):
        stereo.stereo_total_loss([_t(np.zeros(2))], np.zeros(2), np.ones(2), [1.0, 1.0])
