import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pairdiff.denoiser import ConvDenoiser, init_params
from pairdiff.editing import (H2P, P2H, EditRequest, GuidanceConfig, acg_weight, edit, edit_request,
                              guidance_gain, guided_update, lcg_weight, plain_resample, start_index)
from pairdiff.experiments import heldout_cases, run_edits
from pairdiff.metrics import l1
from pairdiff.numerics import InvalidRangeError, mask_to_signed
from pairdiff.schedule import build_linear_schedule, subsample_timeline

T = 1024


@pytest.fixture(scope="module")
def timeline():
    return subsample_timeline(build_linear_schedule(T), 20)


@pytest.fixture(scope="module")
def model():
    rng = np.random.default_rng(0)
    p = init_params(rng, zero_final=False)
    return ConvDenoiser({k: 0.3 * v for k, v in p.items()}, T)


@pytest.fixture(scope="module")
def inputs():
    rng = np.random.default_rng(1)
    src = np.clip(rng.normal(0, 0.4, (3, 12, 12)), -1, 1)
    masks = np.zeros((3, 12, 12))
    masks[:, 4:8, 3:9] = 1.0
    return src, masks


def test_guidance_gain_examples():
    cfg = GuidanceConfig()
    assert guidance_gain(cfg, 0, 300) == 20.0
    assert guidance_gain(cfg, 300, 300) == pytest.approx(12.130613194252668, abs=1e-12)
    flat = GuidanceConfig(k=0.0)
    assert all(guidance_gain(flat, t, 300) == 20.0 for t in (0, 17, 300))
    with pytest.raises(InvalidRangeError):
        guidance_gain(cfg, 301, 300)


def test_acg_weight_examples():
    cfg = GuidanceConfig()
    y0 = np.random.default_rng(0).uniform(-1, 1, (5, 5))
    assert np.array_equal(acg_weight(cfg, y0, y0, 10, 300), np.ones((5, 5)))
    w = acg_weight(cfg, np.full((2, 2), 0.1), np.zeros((2, 2)), 0, 300)
    assert np.allclose(w, 0.1353352832366127, rtol=1e-12)
    ramp = acg_weight(cfg, np.linspace(0, 1, 11), np.zeros(11), 50, 300)
    assert np.all(np.diff(ramp) < 0)


def test_lcg_weight_examples():
    cfg = GuidanceConfig()
    assert np.array_equal(lcg_weight(cfg, np.zeros((9, 9))), np.ones((9, 9)))
    big = np.zeros((30, 30))
    big[5:25, 5:25] = 1.0
    assert lcg_weight(cfg, big)[15, 15] == pytest.approx(0.0, abs=1e-15)
    one = np.zeros((9, 9))
    one[4, 4] = 1.0
    assert lcg_weight(GuidanceConfig(pool_window=3), one)[4, 4] == pytest.approx(8 / 9, abs=1e-15)
    with pytest.raises(ValueError):
        lcg_weight(cfg, np.full((4, 4), 0.5))


def test_guided_update_examples():
    y_prev, y0 = np.array([0.0, 0.3]), np.array([1.0, -0.2])
    assert np.array_equal(guided_update(y_prev, y0, np.ones(2)), y0)
    assert np.array_equal(guided_update(y_prev, y0, np.zeros(2)), y_prev)
    assert guided_update(np.array([0.0]), np.array([1.0]), np.array([0.5]))[0] == 0.5
    with pytest.raises(InvalidRangeError):
        guided_update(y_prev, y0, np.array([1.2, 0.0]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_guided_update_is_a_contraction(seed):
    rng = np.random.default_rng(seed)
    y_prev, y0 = rng.normal(0, 2, (2, 6, 6))
    lam = rng.uniform(0, 1, (6, 6))
    out = guided_update(y_prev, y0, lam)
    assert np.max(np.abs(out - y0)) <= np.max(np.abs(y_prev - y0)) + 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), alpha0=st.floats(0.1, 50), k=st.floats(0, 3), eta=st.floats(0, 1))
def test_weights_lie_in_unit_interval(seed, alpha0, k, eta):
    rng = np.random.default_rng(seed)
    cfg = GuidanceConfig(alpha0=alpha0, k=k, eta=eta)
    lam = acg_weight(cfg, rng.uniform(-1, 1, (8, 8)), rng.uniform(-1, 1, (8, 8)), int(rng.integers(0, 51)), 50)
    lam = lam * lcg_weight(cfg, (rng.random((8, 8)) > 0.6).astype(float))
    assert lam.min() >= 0.0 and lam.max() <= 1.0


def test_config_validation():
    for bad in ({"alpha0": 0.0}, {"k": -1.0}, {"eta": 1.5}, {"t_start_frac": 0.0}, {"pool_window": 4}):
        with pytest.raises(InvalidRangeError):
            GuidanceConfig(**bad).validate()


def test_start_index():
    assert start_index(GuidanceConfig(t_start_frac=0.6), 300) == 120
    assert start_index(GuidanceConfig(t_start_frac=1.0), 300) == 0
    assert start_index(GuidanceConfig(t_start_frac=0.001), 300) == 299
    r = start_index(GuidanceConfig(random_start=True), 300, np.random.default_rng(0))
    assert 0 <= r < 300
    with pytest.raises(ValueError):
        start_index(GuidanceConfig(random_start=True), 300)


def test_request_validation():
    with pytest.raises(ValueError):
        EditRequest(np.zeros((4, 4)), np.zeros((4, 4)), "sideways")
    with pytest.raises(ValueError):
        EditRequest(np.zeros((4, 4)), np.full((4, 4), 0.5), H2P)


def test_acg_off_equals_plain_resampling(model, timeline, inputs):
    src, masks = inputs
    cfg = GuidanceConfig(acg_enabled=False, t_start_frac=0.5)
    got = edit(model, src, masks, H2P, cfg, timeline, seed=3).output
    ref = plain_resample(model, src, mask_to_signed(masks), timeline, start_index(cfg, len(timeline)), 3, [0, 1, 2])
    assert np.array_equal(got, ref)


def test_directions_differ_only_in_mask_and_lesion_weight(model, timeline, inputs):
    src, masks = inputs
    cfg = GuidanceConfig(lcg_enabled=False, t_start_frac=0.5)
    p2h = edit(model, src, masks, P2H, cfg, timeline, seed=4).output
    h2p_empty = edit(model, src, np.zeros_like(masks), H2P, cfg, timeline, seed=4).output
    assert np.array_equal(p2h, h2p_empty)
    # with an empty mask, lesion guidance is the identity
    assert np.array_equal(edit(model, src, np.zeros_like(masks), H2P, GuidanceConfig(t_start_frac=0.5),
                               timeline, seed=4).output, h2p_empty)


def test_edit_is_deterministic_and_batch_independent(model, timeline, inputs):
    src, masks = inputs
    cfg = GuidanceConfig(t_start_frac=0.5)
    a = edit(model, src, masks, H2P, cfg, timeline, seed=5, snapshot_steps=(1, 5))
    b = edit(model, src, masks, H2P, cfg, timeline, seed=5)
    assert np.array_equal(a.output, b.output)
    one = edit(model, src[2], masks[2], H2P, cfg, timeline, seed=5, indices=[2])
    assert np.allclose(one.output, a.output[2], rtol=0, atol=1e-12)
    assert sorted(a.snapshots) == [1, 5]
    assert all(s.min() >= 0 and s.max() <= 1 for s in a.snapshots.values())
    assert a.record["direction"] == H2P and a.record["timeline_K"] == 20
    req = edit_request(model, EditRequest(src[2], masks[2], H2P), cfg, timeline, 5, index=2)
    assert np.array_equal(req.output, one.output)


def test_edit_does_not_mutate_inputs(model, timeline, inputs):
    src, masks = inputs
    s0, m0 = src.copy(), masks.copy()
    edit(model, src, masks, P2H, GuidanceConfig(), timeline, seed=0)
    assert np.array_equal(src, s0) and np.array_equal(masks, m0)


# -- trained toy model -----------------------------------------------------------------

@pytest.fixture(scope="module")
def cases():
    return heldout_cases(20)


def test_p2h_preserves_outside_lesion(trained_state, cases):
    tl = subsample_timeline(trained_state.schedule, 300)
    out = run_edits(trained_state.models["brain"], cases.paths, cases.masks, P2H, GuidanceConfig(), tl, 0)
    outside = [l1(out[i], cases.paths[i], cases.outside_weight(i)) for i in range(len(cases))]
    assert np.median(outside) < 0.05


@pytest.mark.xfail(strict=True, reason="the toy model's one-step estimates are too coarse for lambda -> 1; "
                                       "measured value and analysis in the decisions ledger")
def test_h2p_with_empty_mask_reproduces_input(trained_state, cases):
    tl = subsample_timeline(trained_state.schedule, 300)
    out = run_edits(trained_state.models["brain"], cases.healthies, np.zeros_like(cases.masks), H2P,
                    GuidanceConfig(), tl, 0)
    assert np.median([l1(out[i], cases.healthies[i]) for i in range(len(cases))]) < 0.02
