import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sstune.bundles import TestInstanceBundle
from sstune.errors import DimMismatch, KOutOfRange, NonFiniteLoss, ShapeMismatch
from sstune.harness import SYNTH_PREDICTOR, relative_errors
from sstune.numerics import l2_normalize
from sstune.predictors import PredictorConfig, zero_shot_logits
from sstune.synth import SyntheticConfig, synth_generate
from sstune.tuner import (
    ConfidenceFilter,
    FactorizedWeights,
    OptimizerConfig,
    OptimizerState,
    TuningSchedule,
    adamw_step,
    apply_weights,
    central_differences,
    evaluate_loss,
    final_predict,
    finite_difference_gradients,
    loss_and_gradients,
    loss_gradients,
    marginal_entropy_loss,
    select_frames,
    tune,
)

CONF = ConfidenceFilter()


def _args(support, test, weights, frames, text, config=SYNTH_PREDICTOR, conf=CONF):
    return (support.F, weights, test.views, frames, text.W, support.L, config, conf)


def _duplicated(support):
    """Replace every odd repeat with a copy of the repeat before it."""
    F = support.F.copy()
    for row, (_, _, r, _) in enumerate(support.provenance):
        if r % 2 == 1:
            F[row] = F[row - 1]
    return replace(support, F=F)


def test_apply_weights_examples():
    F = np.random.default_rng(0).standard_normal((3, 2, 4))
    np.testing.assert_array_equal(apply_weights(F, FactorizedWeights.ones(3, 2)), F)
    out = apply_weights(np.array([[[2.0, 4.0]]]), FactorizedWeights(np.array([0.5]), np.array([2.0])))
    np.testing.assert_array_equal(out, [[[2.0, 4.0]]])
    w = FactorizedWeights(np.array([1.0, 0.0, 2.0]), np.ones(2))
    assert np.all(apply_weights(F, w)[1] == 0)
    with pytest.raises(DimMismatch):
        apply_weights(F, FactorizedWeights.ones(2, 2))


def test_apply_weights_bilinear(rng):
    F = rng.standard_normal((4, 3, 2))
    a, b = rng.standard_normal(4), rng.standard_normal(4)
    r_fr = rng.standard_normal(3)
    lhs = apply_weights(F, FactorizedWeights(2 * a + b, r_fr))
    rhs = 2 * apply_weights(F, FactorizedWeights(a, r_fr)) + apply_weights(F, FactorizedWeights(b, r_fr))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_select_frames():
    assert select_frames(np.array([0.1, 0.9, 0.5, 0.7]), 2, "top").tolist() == [1, 3]
    for strategy in ("top", "random"):
        assert select_frames(np.ones(8), 8, strategy, np.random.default_rng(0)).tolist() == list(range(8))
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    draws1 = [select_frames(np.ones(8), 4, "random", r1).tolist() for _ in range(2)]
    draws2 = [select_frames(np.ones(8), 4, "random", r2).tolist() for _ in range(2)]
    assert draws1 == draws2
    assert all(d == sorted(d) and len(set(d)) == 4 for d in draws1)
    with pytest.raises(KOutOfRange):
        select_frames(np.ones(4), 5)


def test_marginal_entropy_loss_examples():
    loss, _ = marginal_entropy_loss(np.tile([0.0, 1.0, 0.0], (4, 1)), CONF)
    assert loss == 0.0
    loss, sel = marginal_entropy_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), ConfidenceFilter(1.0))
    assert loss == pytest.approx(math.log(2)) and sel.tolist() == [0, 1]
    assert ConfidenceFilter(0.1).count(32) == 3
    assert ConfidenceFilter(0.1).count(8) == 1
    _, sel = marginal_entropy_loss(np.array([[0.5, 0.5], [0.9, 0.1], [0.6, 0.4]]), ConfidenceFilter(0.67))
    assert sel.tolist() == [1, 2]


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6), st.integers(1, 12))
def test_marginal_entropy_loss_bounds(seed, C, V):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(C), size=V)
    loss, _ = marginal_entropy_loss(P, CONF)
    assert -1e-12 <= loss <= math.log(C) + 1e-12


def test_zero_shot_only_blend_has_zero_gradients(small_set):
    _, text, support, tests = small_set
    cfg = replace(SYNTH_PREDICTOR, blend=(1.0, 0.0, 0.0))
    args = _args(support, tests[0], FactorizedWeights.ones(support.F.shape[0], 8), np.arange(8), text, cfg)
    g_vid, g_fr = loss_gradients(*args)
    assert np.all(g_vid == 0) and np.all(g_fr == 0)
    n_vid, n_fr = finite_difference_gradients(*args)
    assert np.abs(np.concatenate([n_vid, n_fr])).max() <= 1e-8


def test_frame_gradient_supported_on_selected_frames(small_set):
    _, text, support, tests = small_set
    frames = np.array([1, 4, 6])
    _, g_fr = loss_gradients(*_args(support, tests[1], FactorizedWeights.ones(support.F.shape[0], 8),
                                     frames, text))
    assert np.all(g_fr[np.setdiff1d(np.arange(8), frames)] == 0)
    assert np.any(g_fr[frames] != 0)


def test_gradients_match_finite_differences_seed42():
    _, text, support, tests = synth_generate(SyntheticConfig(seed=42, num_tests=1))
    weights = FactorizedWeights.ones(support.F.shape[0], support.T)
    for frames in (np.arange(8), np.array([0, 1, 2, 3, 4, 5]), np.array([2, 3, 5, 7])):
        args = _args(support, tests[0], weights, frames, text)
        g = np.concatenate(loss_gradients(*args))
        n = np.concatenate(finite_difference_gradients(*args, h=1e-3))
        assert relative_errors(g, n).max() <= 1e-3


@pytest.mark.parametrize("config", [
    PredictorConfig(tau=1.0, blend=(1, 1, 1)),
    PredictorConfig(tau=0.5, blend=(0, 1, 0), beta=2.0),
    PredictorConfig(tau=1.0, psi_mode="exponential", psi_scale=3.0),
])
def test_gradients_match_finite_differences_other_paths(small_set, config):
    _, text, support, tests = small_set
    rng = np.random.default_rng(9)
    N = support.F.shape[0]
    weights = FactorizedWeights(1 + 0.1 * rng.standard_normal(N), 1 + 0.1 * rng.standard_normal(8))
    args = _args(support, tests[2], weights, np.array([0, 3, 4, 6, 7]), text, config)
    g = np.concatenate(loss_gradients(*args))
    n = np.concatenate(finite_difference_gradients(*args))
    assert relative_errors(g, n).max() <= 1e-3


def test_finite_differences_on_quadratic():
    theta = np.array([0.5, -1.25, 3.0])
    grad = central_differences(lambda t: float(np.sum(t * t)), theta, h=1e-3)
    np.testing.assert_allclose(grad, 2 * theta, atol=1e-9)
    w = FactorizedWeights(np.array([0.5, 2.0]), np.array([-1.0]))
    g_vid, g_fr = finite_difference_gradients(None, w, None, None, None, None, None, None,
                                              loss_fn=lambda t: float(np.sum(t * t)))
    np.testing.assert_allclose(np.concatenate([g_vid, g_fr]), 2 * w.flat(), atol=1e-9)
    with pytest.raises(ValueError):
        finite_difference_gradients(None, w, None, None, None, None, None, None, h=0.0, loss_fn=lambda t: 0.0)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([(1, 0, 1), (1, 1, 1), (0, 1, 1), (0, 1, 0)]),
       st.sampled_from(["affine", "exponential"]), st.integers(1, 6))
def test_duplicate_videos_get_equal_gradients(seed, blend, mode, k):
    rng = np.random.default_rng(seed)
    cfg = SyntheticConfig(C=3, m=1, n=2, T=6, d=8, V=6, view_noise=0.3, seed=int(rng.integers(1 << 30)),
                          num_tests=1)
    _, text, support, tests = synth_generate(cfg)
    support = _duplicated(support)
    N = support.F.shape[0]
    r_vid = 1 + 0.2 * rng.standard_normal(N)
    r_vid[1::2] = r_vid[0::2]
    weights = FactorizedWeights(r_vid, 1 + 0.2 * rng.standard_normal(6))
    frames = select_frames(weights.r_fr, k, "top")
    config = PredictorConfig(tau=float(rng.choice([0.1, 1.0])), blend=blend, psi_mode=mode)
    g_vid, _ = loss_gradients(*_args(support, tests[0], weights, frames, text, config))
    np.testing.assert_allclose(g_vid[0::2], g_vid[1::2], rtol=1e-12, atol=1e-15)


def test_adamw_examples():
    state = OptimizerState.init(1, OptimizerConfig(lr=0.001, eps=0.0, weight_decay=0.01))
    new, state = adamw_step(state, np.array([1.0]), np.array([0.5]))
    assert new[0] == pytest.approx(0.99899, abs=1e-12)
    assert new[0] == pytest.approx(oracles.adamw_first_step(1.0, 0.5, 0.001, 0.9, 0.999, 0.0, 0.01), abs=1e-15)
    assert state.step_count == 1

    params = np.array([0.3, -2.0, 5.0])
    same, _ = adamw_step(OptimizerState.init(3), params, np.zeros(3))
    np.testing.assert_array_equal(same, params)

    g = np.array([0.2, -3.0, 1e-4, -1e-4])
    moved, _ = adamw_step(OptimizerState.init(4, OptimizerConfig(eps=0.0)), np.ones(4), g)
    assert np.all(np.sign(moved - 1.0) == -np.sign(g))
    with pytest.raises(ShapeMismatch):
        adamw_step(OptimizerState.init(2), np.ones(3), np.ones(3))


def test_adamw_later_steps_match_scalar_loop():
    cfg = OptimizerConfig(lr=0.01, weight_decay=0.1)
    state = OptimizerState.init(1, cfg)
    theta, m, v = 0.7, 0.0, 0.0
    p = np.array([theta])
    for t, g in enumerate([0.3, -0.1, 0.8, 0.05], start=1):
        p, state = adamw_step(state, p, np.array([g]))
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8) - 0.01 * 0.1 * theta
        assert p[0] == pytest.approx(theta, abs=1e-15)


def test_schedule_parse_and_defaults():
    s = TuningSchedule()
    assert s.total_steps == 10
    assert TuningSchedule.parse("8x4,6x3,4x3") == s
    assert TuningSchedule.parse("8x2", repeats=3).total_steps == 6
    with pytest.raises(KOutOfRange):
        TuningSchedule.parse("9x1").check(8)


def test_default_schedule_trace(small_set):
    _, text, support, tests = small_set
    _, trace = tune(support, tests[0], text.W, TuningSchedule(), SYNTH_PREDICTOR)
    assert len(trace) == 10
    assert trace.scales == [8, 8, 8, 8, 6, 6, 6, 4, 4, 4]
    assert [r["step"] for r in trace.records] == list(range(10))
    assert all(len(r["frame_indices"]) == r["scale"] for r in trace.records)


def test_single_stage_is_one_plain_step(small_set):
    _, text, support, tests = small_set
    test = tests[0]
    N = support.F.shape[0]
    weights, trace = tune(support, test, text.W, TuningSchedule(stages=((8, 1),)), SYNTH_PREDICTOR)
    ones = FactorizedWeights.ones(N, 8)
    loss, g_vid, g_fr, _, _ = loss_and_gradients(*_args(support, test, ones, np.arange(8), text))
    expected, _ = adamw_step(OptimizerState.init(N + 8), ones.flat(), np.concatenate([g_vid, g_fr]))
    assert weights.flat().tobytes() == expected.tobytes()
    assert trace.losses == [loss]


def test_tune_is_deterministic(small_set):
    _, text, support, tests = small_set
    sched = TuningSchedule(strategy="random", rng_seed=4)
    a = tune(support, tests[3], text.W, sched, SYNTH_PREDICTOR)
    b = tune(support, tests[3], text.W, sched, SYNTH_PREDICTOR)
    assert a[1].to_jsonl() == b[1].to_jsonl()
    assert a[0].flat().tobytes() == b[0].flat().tobytes()


def test_duplicates_keep_identical_trajectories(small_set):
    _, text, support, tests = small_set
    support = _duplicated(support)
    for steps in range(1, 11):
        stages, left = [], steps
        for k, s in TuningSchedule().stages:
            if left > 0:
                stages.append((k, min(s, left)))
                left -= s
        w, _ = tune(support, tests[0], text.W, TuningSchedule(stages=tuple(stages)), SYNTH_PREDICTOR)
        np.testing.assert_array_equal(w.r_vid[0::2], w.r_vid[1::2])


def test_disabled_weights_stay_at_one(small_set):
    _, text, support, tests = small_set
    w, _ = tune(support, tests[0], text.W, predictor_config=SYNTH_PREDICTOR, train_r_vid=False)
    assert np.all(w.r_vid == 1.0) and np.any(w.r_fr != 1.0)
    w, _ = tune(support, tests[0], text.W, predictor_config=SYNTH_PREDICTOR, train_r_fr=False)
    assert np.all(w.r_fr == 1.0) and np.any(w.r_vid != 1.0)


def test_non_finite_loss_carries_trace(small_set):
    _, text, support, tests = small_set
    views = tests[0].views.copy()
    views[0, 0, 0] = np.nan
    bad = TestInstanceBundle(views=views, original=tests[0].original, ground_truth=0)
    with pytest.raises(NonFiniteLoss) as info:
        tune(support, bad, text.W, predictor_config=SYNTH_PREDICTOR)
    assert len(info.value.trace) == 1


def test_tuning_lowers_loss(small_set):
    _, text, support, tests = small_set
    test = tests[4]
    ones = FactorizedWeights.ones(support.F.shape[0], 8)
    w, _ = tune(support, test, text.W, predictor_config=SYNTH_PREDICTOR,
                optimizer_config=OptimizerConfig(lr=1e-2))
    before = evaluate_loss(support, test, ones, text.W, SYNTH_PREDICTOR)
    after = evaluate_loss(support, test, w, text.W, SYNTH_PREDICTOR)
    assert after < before


def test_final_predict_identity_reduces_to_zero_shot(small_set):
    _, text, support, tests = small_set
    cfg = PredictorConfig(blend=(1, 0, 0))
    for test in tests:
        logits, pred = final_predict(support, test, FactorizedWeights.ones(support.F.shape[0], 8), text.W, cfg)
        f = l2_normalize(test.original.astype(np.float64).mean(axis=0))
        np.testing.assert_allclose(logits, zero_shot_logits(f, text.W), atol=1e-12)
        assert pred == int(np.argmax(logits))


def test_mismatched_test_dims(small_set):
    _, text, support, tests = small_set
    bad = TestInstanceBundle(views=tests[0].views[:, :4], original=tests[0].original[:4])
    with pytest.raises(DimMismatch):
        tune(support, bad, text.W)


def test_seed42_loss_descends_at_default_lr():
    _, text, support, tests = synth_generate(SyntheticConfig(seed=42, num_tests=1))
    ones = FactorizedWeights.ones(support.F.shape[0], 8)
    w, _ = tune(support, tests[0], text.W, predictor_config=SYNTH_PREDICTOR)
    before = evaluate_loss(support, tests[0], ones, text.W, SYNTH_PREDICTOR)
    after = evaluate_loss(support, tests[0], w, text.W, SYNTH_PREDICTOR)
    assert after < before


def test_seed42_outlier_batch_accuracy_not_hurt():
    cfg = SyntheticConfig(seed=42, outlier_fraction=0.25, outlier_distance=0.8, view_noise=0.3, num_tests=50)
    _, text, support, tests = synth_generate(cfg)
    ones = FactorizedWeights.ones(support.F.shape[0], 8)
    tuned = untuned = 0
    for t in tests:
        w, _ = tune(support, t, text.W, predictor_config=SYNTH_PREDICTOR)
        tuned += final_predict(support, t, w, text.W, SYNTH_PREDICTOR)[1] == t.ground_truth
        untuned += final_predict(support, t, ones, text.W, SYNTH_PREDICTOR)[1] == t.ground_truth
    assert tuned >= untuned


def test_final_predict_class_permutation(small_set):
    _, text, support, tests = small_set
    perm = np.array([2, 0, 4, 1, 3])
    inv = np.argsort(perm)
    permuted = replace(support, L=support.L[:, perm],
                       provenance=np.column_stack([inv[support.provenance[:, 0]], support.provenance[:, 1:]]),
                       classes=tuple(support.classes[i] for i in perm))
    w = FactorizedWeights.ones(support.F.shape[0], 8)
    logits, pred = final_predict(support, tests[0], w, text.W, SYNTH_PREDICTOR)
    logits_p, pred_p = final_predict(permuted, tests[0], w, text.W[perm], SYNTH_PREDICTOR)
    np.testing.assert_allclose(logits_p, logits[perm], atol=1e-12)
    assert perm[pred_p] == pred
