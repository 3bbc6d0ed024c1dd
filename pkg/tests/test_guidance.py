import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import FixedPredictor, LinearPredictor
from swgsim.data import triangle
from swgsim.denoisers import OptimalDenoiser, make_denoiser
from swgsim.errors import (DegenerateDirectionError, IncompatibleRuleError, MissingConditionError, ShapeError,
                           ValidationError)
from swgsim.guidance import (GuidanceRule, GuidanceTerm, OptimalWeight, cfg_rule, guided_predict, guided_target,
                             interpolate_rules, optimal_weight, wmg_rule)

rng = np.random.default_rng(0)
vec = st.lists(st.floats(-10, 10), min_size=4, max_size=4).map(np.array)
weight = st.floats(-5, 20)


def linear(seed, d=4):
    r = np.random.default_rng(seed)
    return LinearPredictor(r.standard_normal((d, d)), r.standard_normal(d))


POS, NEG1, NEG2 = linear(1), linear(2), linear(3)


@given(vec, st.floats(0.01, 10))
def test_zero_weight_returns_positive_bitwise(x, sigma):
    rule = GuidanceRule(POS, (GuidanceTerm(NEG1, 0.0), GuidanceTerm(NEG2, 0.0, alpha=0.3)))
    assert np.array_equal(guided_predict(x, sigma, 0, rule), POS.predict_noise(x, sigma))


@given(vec)
def test_minus_one_returns_negative_bitwise(x):
    rule = wmg_rule(POS, NEG1, -1.0)
    assert np.array_equal(guided_predict(x, 1.0, 0, rule), NEG1.predict_noise(x, 1.0))


@given(vec, weight)
def test_single_term_matches_extrapolation(x, w):
    pos, neg = POS.predict_noise(x, 1.0), NEG1.predict_noise(x, 1.0)
    np.testing.assert_allclose(guided_predict(x, 1.0, 0, wmg_rule(POS, NEG1, w)), pos + w * (pos - neg),
                               rtol=1e-12, atol=1e-9)


@given(vec, weight)
def test_mask_zero_dims_are_positive_and_others_unmasked(x, w):
    mask = np.array([1.0, 0.0, 1.0, 0.0])
    masked = guided_predict(x, 1.0, 0, GuidanceRule(POS, (GuidanceTerm(NEG1, w),), mask=mask))
    plain = guided_predict(x, 1.0, 0, wmg_rule(POS, NEG1, w))
    pos = POS.predict_noise(x, 1.0)
    assert np.array_equal(masked[mask == 0], pos[mask == 0])
    assert np.array_equal(masked[mask == 1], plain[mask == 1])


@given(vec, st.floats(-3, 3), st.floats(-3, 3))
def test_affine_in_each_weight(x, w1, w2):
    h = 0.5
    def f(a):
        return guided_predict(x, 1.0, 0, GuidanceRule(POS, (GuidanceTerm(NEG1, a), GuidanceTerm(NEG2, w2))))
    slope = (f(w1 + h) - f(w1)) / h
    expected = POS.predict_noise(x, 1.0) - NEG1.predict_noise(x, 1.0)
    np.testing.assert_allclose(slope, expected, atol=1e-10 * (1 + np.abs(f(w1)).max()))


@given(vec, weight)
def test_target_space_agrees_with_noise_space(x, w):
    rule = GuidanceRule(POS, (GuidanceTerm(NEG1, w), GuidanceTerm(NEG2, 0.5 * w, alpha=0.4)))
    sigma = 0.7
    eps = guided_predict(x, sigma, 0, rule)
    y = guided_target(x, sigma, 0, rule)
    np.testing.assert_allclose((x - y) / sigma, eps, rtol=1e-9, atol=1e-8)


def test_interval_gates_exactly():
    rule = wmg_rule(POS, NEG1, 3.0, interval=(2, 4))
    x = rng.standard_normal(4)
    pos = POS.predict_noise(x, 1.0)
    for step in range(8):
        out = guided_predict(x, 1.0, step, rule)
        if 2 <= step <= 4:
            assert not np.array_equal(out, pos)
        else:
            assert np.array_equal(out, pos)


def test_interval_validation():
    with pytest.raises(ValidationError):
        wmg_rule(POS, NEG1, 1.0, interval=(5, 2))
    with pytest.raises(ValidationError):
        wmg_rule(POS, NEG1, 1.0, interval=(0, 40)).check_steps(40)


def test_empty_terms_reduce_to_positive():
    x = rng.standard_normal(4)
    assert np.array_equal(guided_predict(x, 1.0, 0, GuidanceRule(POS)), POS.predict_noise(x, 1.0))


def test_term_validation():
    with pytest.raises(ValidationError):
        GuidanceTerm(NEG1, 1.0, alpha=1.5)
    with pytest.raises(ValidationError):
        GuidanceTerm(NEG1, float("inf"))
    with pytest.raises(ValidationError):
        GuidanceTerm(NEG1, 1.0, mask=[0, 0.5, 1, 1])
    with pytest.raises(ShapeError):
        GuidanceRule(POS, mask=[1, 1])


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        wmg_rule(POS, linear(4, d=3), 1.0)
    with pytest.raises(ShapeError):
        guided_predict(np.zeros(3), 1.0, 0, wmg_rule(POS, NEG1, 1.0))


def test_cfg_is_conditional_minus_unconditional():
    ds = triangle()
    cond, uncond = OptimalDenoiser(ds, True), OptimalDenoiser(ds)
    x, sigma, w = np.array([0.3, 0.1]), 0.8, 2.0
    e_c, e_u = cond.predict_noise(x, sigma, 1), uncond.predict_noise(x, sigma)
    np.testing.assert_allclose(guided_predict(x, sigma, 0, cfg_rule(cond, uncond, w), 1),
                               e_c + w * (e_c - e_u), rtol=1e-13)
    with pytest.raises(MissingConditionError):
        guided_predict(x, sigma, 0, cfg_rule(cond, uncond, w))


def test_optimal_weight_zero_for_oracle_positive():
    ds = triangle()
    oracle = OptimalDenoiser(ds)
    assert optimal_weight(np.array([0.2, 0.3]), 0.5, oracle, make_denoiser(ds, 0.2), oracle) == 0.0


@given(vec, vec)
def test_optimal_weight_collinear_unit(star, e):
    if np.linalg.norm(e) < 1e-3:
        return
    oracle = FixedPredictor(star)
    pos, neg = FixedPredictor(star + e), FixedPredictor(star + 2 * e)
    x = np.zeros(4)
    w = optimal_weight(x, 1.0, pos, neg, oracle)
    assert w == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_allclose(guided_predict(x, 1.0, 0, wmg_rule(pos, neg, w)), star,
                               atol=1e-12 * (1 + np.abs(star).max() + np.abs(e).max()))


def test_optimal_weight_degenerate():
    p = FixedPredictor(np.ones(4))
    with pytest.raises(DegenerateDirectionError):
        optimal_weight(np.zeros(4), 1.0, p, FixedPredictor(np.ones(4)), FixedPredictor(np.zeros(4)))


def test_pointwise_optimal_weight_in_rule_recovers_oracle():
    star, e = rng.standard_normal(4), rng.standard_normal(4)
    oracle = FixedPredictor(star)
    rule = wmg_rule(FixedPredictor(star + e), FixedPredictor(star + 3.5 * e), OptimalWeight(oracle))
    np.testing.assert_allclose(guided_predict(np.zeros((2, 4)), 1.0, 0, rule), np.tile(star, (2, 1)), atol=1e-12)
    # Degenerate direction: weight 0, positive returned.
    same = wmg_rule(FixedPredictor(star + e), FixedPredictor(star + e), OptimalWeight(oracle))
    np.testing.assert_array_equal(guided_predict(np.zeros(4), 1.0, 0, same), star + e)


def test_interpolate_one_hot_is_bitwise():
    r1, r2 = wmg_rule(POS, NEG1, 2.0), wmg_rule(POS, NEG2, 5.0)
    merged = interpolate_rules([(r1, 1.0), (r2, 0.0)])
    for _ in range(20):
        x = rng.standard_normal(4)
        assert np.array_equal(guided_predict(x, 0.9, 0, merged), guided_predict(x, 0.9, 0, r1))


def test_interpolate_idempotent():
    r = wmg_rule(POS, NEG1, 2.0)
    merged = interpolate_rules([(r, 0.5), (r, 0.5)])
    x = rng.standard_normal(4)
    np.testing.assert_allclose(guided_predict(x, 1.0, 0, merged), guided_predict(x, 1.0, 0, r), rtol=1e-13)


def test_interpolate_halves_expand_by_hand():
    merged = interpolate_rules([(wmg_rule(POS, NEG1, 1.0), 0.5), (wmg_rule(POS, NEG2, 1.0), 0.5)])
    x = rng.standard_normal(4)
    p, n1, n2 = (d.predict_noise(x, 1.0) for d in (POS, NEG1, NEG2))
    np.testing.assert_allclose(guided_predict(x, 1.0, 0, merged), p + 0.5 * (p - n1) + 0.5 * (p - n2), rtol=1e-13)
    both = GuidanceRule(POS, (GuidanceTerm(NEG1, 0.5), GuidanceTerm(NEG2, 0.5)))
    np.testing.assert_allclose(guided_predict(x, 1.0, 0, merged), guided_predict(x, 1.0, 0, both), rtol=1e-13)


def test_interpolate_keeps_rule_masks_on_their_terms():
    mask = np.array([1.0, 1.0, 0.0, 0.0])
    r1 = GuidanceRule(POS, (GuidanceTerm(NEG1, 2.0),), mask=mask)
    r2 = wmg_rule(POS, NEG2, 2.0)
    merged = interpolate_rules([(r1, 0.5), (r2, 0.5)])
    x = rng.standard_normal(4)
    p, n1, n2 = (d.predict_noise(x, 1.0) for d in (POS, NEG1, NEG2))
    np.testing.assert_allclose(guided_predict(x, 1.0, 0, merged), p + mask * (p - n1) + (p - n2), rtol=1e-12)


def test_interpolate_errors():
    with pytest.raises(IncompatibleRuleError):
        interpolate_rules([(wmg_rule(POS, NEG1, 1.0), 0.5), (wmg_rule(linear(1), NEG1, 1.0), 0.5)])
    with pytest.raises(ValidationError):
        interpolate_rules([(wmg_rule(POS, NEG1, 1.0), 0.6), (wmg_rule(POS, NEG2, 1.0), 0.6)])
    with pytest.raises(IncompatibleRuleError):
        interpolate_rules([(wmg_rule(POS, NEG1, 1.0, interval=(0, 3)), 0.5), (wmg_rule(POS, NEG2, 1.0), 0.5)])


@pytest.mark.parametrize("sigma", [1e-9, 1e-6, 1e-3])
def test_optimal_weight_target_space_small_sigma(sigma):
    # The weight grows like 1/sigma^2 here; the target must still equal y*.
    ds = triangle()
    pos, neg, star = make_denoiser(ds, 0.1), make_denoiser(ds, 0.2), make_denoiser(ds, 0.0)
    rule = GuidanceRule(pos, (GuidanceTerm(neg, OptimalWeight(star)),))
    x = ds.points[1] + np.array([3e-4, -2e-4])
    y = guided_target(x, sigma, 0, rule)
    assert np.allclose(y, star.denoise(x, sigma), rtol=0, atol=1e-12)
