import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from abstention.losses import (
    EXPONENTIAL,
    LOGISTIC,
    abstention_loss,
    canonical_mu,
    check_cost,
    comp_sum_grad,
    comp_sum_loss,
    generic_surrogate,
    margin,
    predict_label,
    softmax,
    surrogate_grad,
    surrogate_loss,
    two_stage_grad,
    two_stage_loss,
)

MUS = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0]

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def scores_strategy(min_n=2, max_n=5):
    return st.integers(min_n, max_n).flatmap(lambda n: arrays(np.float64, n + 1, elements=finite))


def mp_comp_sum(s, y, mu):
    """High-precision reference for the comp-sum loss."""
    with mp.workdps(40):
        s = [mp.mpf(float(v)) for v in s]
        total = mp.fsum(mp.e ** (v - s[y]) for v in s)
        if mu == 1:
            return mp.log(total)
        return (total ** (1 - mp.mpf(mu)) - 1) / (1 - mp.mpf(mu))


# ----------------------------------------------------------------------
# Cost, mu and margin functions
# ----------------------------------------------------------------------


@pytest.mark.parametrize("c", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_cost_outside_open_interval_is_rejected(c):
    with pytest.raises(ValueError):
        check_cost(c)


def test_mu_snaps_to_special_values():
    assert canonical_mu(1 + 5e-13) == 1.0
    assert canonical_mu(2 - 5e-13) == 2.0
    assert canonical_mu(1 + 1e-9) != 1.0
    with pytest.raises(ValueError):
        canonical_mu(-0.1)


@pytest.mark.parametrize("phi", [EXPONENTIAL, LOGISTIC])
def test_margin_functions_dominate_indicator_and_vanish(phi):
    t = np.linspace(-20, 20, 4001)
    v = phi(t)
    assert np.all(np.diff(v) < 0)
    assert np.all(v[t <= 0] >= 1.0)
    assert phi(50.0) < 1e-12


def test_margin_aliases():
    assert margin("exp") is EXPONENTIAL
    assert margin("logistic") is LOGISTIC
    with pytest.raises(ValueError):
        margin("hinge")


# ----------------------------------------------------------------------
# Decision rule and target loss
# ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "scores, expected",
    [((2.0, 1.0, 0.5), 0), ((1.0, 1.0, 1.0), 2), ((0.3, 0.7, 0.5), 1)],
)
def test_predict_label_examples(scores, expected):
    assert predict_label(scores) == expected


def test_predict_label_ties_go_to_smallest_index():
    assert predict_label((1.0, 3.0, 3.0, 0.0)) == 1


@pytest.mark.parametrize(
    "scores, y, expected",
    [((2.0, 1.0, 0.5), 0, 0.0), ((0.1, 0.1, 0.9), 0, 0.2), ((0.1, 0.9, 0.2), 0, 1.0)],
)
def test_abstention_loss_examples(scores, y, expected):
    assert abstention_loss(scores, y, 0.2) == expected


def test_abstention_loss_rejects_bad_label():
    with pytest.raises(ValueError):
        abstention_loss((0.1, 0.2, 0.3), 2, 0.2)


@settings(max_examples=200, deadline=None)
@given(scores_strategy(), st.floats(0.01, 0.99), st.floats(0.01, 100.0))
def test_decision_is_invariant_to_positive_scaling(s, c, alpha):
    assert predict_label(s) == predict_label(alpha * s)
    y = 0
    assert abstention_loss(s, y, c) in (0.0, c, 1.0)


# ----------------------------------------------------------------------
# Comp-sum family
# ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "mu, scores, expected",
    [
        (1.0, (0, 0, 0), math.log(3)),
        (2.0, (0, 0, 0), 2 / 3),
        (0.0, (0, 0, 0), 2.0),
    ],
)
def test_comp_sum_trivial_values(mu, scores, expected):
    assert comp_sum_loss(scores, 0, mu) == pytest.approx(expected, abs=1e-15)


def test_comp_sum_half_against_high_precision():
    ref = float(2 * (mp.sqrt(1 + 2 * mp.e ** -1) - 1))
    assert ref == pytest.approx(0.63496404707, abs=1e-11)
    assert comp_sum_loss((1, 0, 0), 0, 0.5) == pytest.approx(ref, rel=1e-14)


def test_comp_sum_large_scores_do_not_overflow():
    s = np.array([500.0, -500.0, 0.0])
    for mu in MUS:
        v = comp_sum_loss(s, 1, mu)
        assert np.isfinite(v) or mu < 1
    assert comp_sum_loss(s, 1, 1.0) == pytest.approx(1000.0)
    assert comp_sum_loss(s, 0, 0.0) == pytest.approx(float(mp_comp_sum(s, 0, 0)), abs=1e-12)


@pytest.mark.parametrize("mu", MUS + [0.25, 1.2, 4.0])
def test_comp_sum_matches_mpmath(mu):
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = rng.uniform(-5, 5, size=rng.integers(3, 7))
        y = int(rng.integers(s.size))
        ref = float(mp_comp_sum(s, y, mu))
        assert comp_sum_loss(s, y, mu) == pytest.approx(ref, rel=1e-12, abs=1e-14)


def test_surrogate_examples():
    assert surrogate_loss((0, 0, 0), 0, 0.5, 1.0) == pytest.approx(1.5 * math.log(3), abs=1e-15)
    assert surrogate_loss((0, 0, 0), 0, 0.5, 2.0) == pytest.approx(1.0, abs=1e-15)
    ref = float(mp_comp_sum((3, 0, -3), 0, 1) + mp.mpf("0.8") * mp_comp_sum((3, 0, -3), 2, 1))
    assert ref == pytest.approx(4.89170237434, abs=1e-10)
    assert surrogate_loss((3, 0, -3), 0, 0.2, 1.0) == pytest.approx(ref, rel=1e-13)


def test_generic_surrogate_reproduces_l_mu_bit_exactly():
    rng = np.random.default_rng(0)
    s = rng.uniform(-5, 5, size=(1000, 4))
    y = rng.integers(0, 3, size=1000)
    base = lambda sc, lab: comp_sum_loss(sc, lab, 1.0)
    assert np.array_equal(generic_surrogate(base, s, y, 0.3), surrogate_loss(s, y, 0.3, 1.0))
    assert np.all(generic_surrogate(lambda sc, lab: np.zeros(len(lab)), s, y, 0.3) == 0.0)
    l2 = lambda sc, lab: comp_sum_loss(sc, lab, 2.0)
    assert generic_surrogate(l2, (0, 0, 0), 0, 0.5) == pytest.approx(1.0)


@settings(max_examples=300, deadline=None)
@given(scores_strategy(), st.floats(-50, 50), st.sampled_from(MUS))
def test_comp_sum_translation_invariant(s, alpha, mu):
    y = 0
    assert abs(comp_sum_loss(s + alpha, y, mu) - comp_sum_loss(s, y, mu)) <= 1e-12 * max(1.0, comp_sum_loss(s, y, mu))


@settings(max_examples=300, deadline=None)
@given(scores_strategy(), st.floats(0, 4), st.floats(0, 4))
def test_comp_sum_decreasing_in_mu(s, m1, m2):
    lo, hi = sorted((m1, m2))
    assert comp_sum_loss(s, 0, lo) >= comp_sum_loss(s, 0, hi) - 1e-12
    assert comp_sum_loss(s, 0, hi) >= 0.0


def test_softmax_examples():
    np.testing.assert_allclose(softmax((0, 0, 0)), [1 / 3] * 3, atol=1e-15)
    out = softmax((1000.0, 0.0, 0.0))
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0)
    np.testing.assert_allclose(softmax((math.log(2), 0, 0)), [0.5, 0.25, 0.25], atol=1e-15)


# ----------------------------------------------------------------------
# Gradients
# ----------------------------------------------------------------------


def test_surrogate_grad_examples():
    g = surrogate_grad((0, 0, 0), 0, 0.5, 1.0)
    assert g[0] == pytest.approx(-0.5, abs=1e-15)
    assert comp_sum_grad((0, 0, 0), 0, 2.0)[0] == pytest.approx(-2 / 9, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(scores_strategy(), st.sampled_from(MUS), st.floats(0.01, 0.99))
def test_surrogate_grad_sums_to_zero(s, mu, c):
    g = surrogate_grad(s, 0, c, mu)
    assert abs(g.sum()) <= 1e-10 * max(1.0, np.abs(g).max())


def test_two_stage_examples():
    e = math.e
    # correct prediction: only the cost term remains
    assert two_stage_loss((1.0, 0.0), 0.0, 0, 0.2) == pytest.approx(0.2 / e, abs=1e-15)
    # wrong prediction with r < M: Phi(r - M) = e, c * Phi(M - r) = 0.2 / e
    assert two_stage_loss((1.0, 0.0), 0.0, 1, 0.2) == pytest.approx(e + 0.2 / e, abs=1e-15)
    assert two_stage_grad((1.0, 0.0), 0.0, 0, 0.2) == pytest.approx(0.2 / e, abs=1e-15)
    assert two_stage_grad((1.0, 0.0), 1.0, 1, 0.5) == pytest.approx(-0.5, abs=1e-15)


def test_two_stage_wrong_term_vanishes_far_from_threshold():
    c = 0.3
    v = two_stage_loss((1.0, 0.0), 51.0, 1, c)
    assert v - c * math.exp(50.0) < 1e-12 * math.exp(50.0)
    assert EXPONENTIAL(50.0) < 1e-12
    assert abs(two_stage_grad((1.0, 0.0), -60.0, 0, c)) < 1e-12


@settings(max_examples=300, deadline=None)
@given(
    arrays(np.float64, 3, elements=finite),
    finite,
    st.integers(0, 2),
    st.floats(0.01, 0.99),
    st.sampled_from([EXPONENTIAL, LOGISTIC]),
)
def test_two_stage_loss_upper_bounds_abstention_loss(pred, r, y, c, phi):
    composite = np.append(pred, r)
    assert two_stage_loss(pred, r, y, c, phi) >= abstention_loss(composite, y, c) - 1e-12


def test_batched_calls_match_rows():
    rng = np.random.default_rng(1)
    s = rng.normal(size=(20, 5))
    y = rng.integers(0, 4, size=20)
    batch = surrogate_loss(s, y, 0.4, 1.5)
    rows = [surrogate_loss(s[i], y[i], 0.4, 1.5) for i in range(20)]
    np.testing.assert_array_equal(batch, rows)
