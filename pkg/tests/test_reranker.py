import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlurerank.hypotheses import EmptyInputError, Hypothesis
from nlurerank.maxent import DegenerateTrainingError
from nlurerank.reranker import (
    ContractViolation,
    DomainTrainingSet,
    LossConfig,
    Objective,
    OptimizerSettings,
    Scheme,
    ShapeError,
    WeightVector,
    ece_loss,
    esemer_loss,
    gradient_descent,
    hypothesis_softmax,
    score,
    top_hypothesis,
    train,
)

H = 1e-6
mp.mp.dps = 40


# High-precision reference losses written straight from the definitions. Central
# differences on these (step H) are free of float64 cancellation, so they stay
# a valid oracle even where the gradient is tiny relative to the loss.


def mp_scores(theta, L):
    bias = theta[3] if len(theta) == 4 else 0
    return [sum(theta[j] * mp.mpf(float(row[j])) for j in range(3)) + bias for row in L]


def mp_softmax(s):
    z = [mp.exp(v) for v in s]
    tot = mp.fsum(z)
    return [v / tot for v in z]


def mp_expected_semer(theta, L, err):
    p = mp_softmax(mp_scores(theta, L))
    return mp.fsum(pi * mp.mpf(float(e)) for pi, e in zip(p, err))


def mp_expected_ce(theta, L, ies):
    s = mp_scores(theta, L)
    p = mp_softmax(s)
    out = []
    for pi, si, y in zip(p, s, ies):
        r = 1 / (1 + mp.exp(-si))
        out.append(pi * -((1 - int(y)) * mp.log(r) + int(y) * mp.log(1 - r)))
    return mp.fsum(out)


def mp_grad(f, theta):
    theta = [mp.mpf(float(t)) for t in theta]
    g = []
    for k in range(len(theta)):
        up = list(theta)
        dn = list(theta)
        up[k] += H
        dn[k] -= H
        g.append(float((f(up) - f(dn)) / (2 * H)))
    return np.array(g)


def rel_err(a, b):
    # a gradient whose true value is exactly zero (e.g. equal SemER on every
    # hypothesis) comes back as rounding noise; norms below 1e-10 count as zero
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)


def wv(theta):
    theta = np.asarray(theta, dtype=float)
    return WeightVector(theta[:3], float(theta[3]) if len(theta) == 4 else None)


# --- score ------------------------------------------------------------------


def test_uniform_weights_give_log_of_product():
    l = np.log([0.6, 0.9, 0.8])
    assert score(WeightVector(np.ones(3)), l) == pytest.approx(math.log(0.432), abs=1e-12)


def test_zero_weights():
    assert score(WeightVector(np.zeros(3)), np.array([-3.0, -1.0, -7.0])) == 0.0


def test_single_coordinate():
    assert score(WeightVector(np.array([2.0, 0, 0])), np.array([-1.0, -5.0, -9.0])) == -2.0


def test_bias_added():
    assert score(WeightVector(np.ones(3), bias=0.5), np.zeros(3)) == 0.5


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        score(WeightVector(np.ones(3)), np.zeros(4))
    with pytest.raises(ShapeError):
        WeightVector(np.ones(2))


# --- softmax ----------------------------------------------------------------


def test_softmax_equal_scores():
    np.testing.assert_allclose(hypothesis_softmax([0.3, 0.3]), [0.5, 0.5], atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(hypothesis_softmax([0.0, math.log(3)]), [0.25, 0.75], atol=1e-15)


def test_softmax_extreme_scores_are_stable():
    p = hypothesis_softmax([-1000.0, 0.0])
    e = mp.exp(-1000)
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(float(e / (1 + e)), abs=1e-300)
    assert p[1] == 1.0


def test_softmax_empty():
    with pytest.raises(EmptyInputError):
        hypothesis_softmax([])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.floats(-100, 100),
)
def test_softmax_sums_to_one_and_is_shift_invariant(scores, c):
    p = hypothesis_softmax(scores)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p > 0)
    np.testing.assert_allclose(hypothesis_softmax(np.array(scores) + c), p, atol=1e-12)


# --- expected SemER ---------------------------------------------------------


def test_esemer_constant_target():
    rng = np.random.default_rng(0)
    L = -rng.exponential(size=(5, 3))
    loss, grad = esemer_loss(WeightVector(np.ones(3)), L, [0.5] * 5, 0.25)
    assert loss == pytest.approx(0.125)
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


def test_esemer_single_hypothesis():
    loss, grad = esemer_loss(WeightVector(np.array([0.3, 2.0, -1.0])), [[-1.0, -2.0, -0.5]], [0.5], 0.1)
    assert loss == pytest.approx(0.05)
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


def test_esemer_rejects_out_of_domain():
    with pytest.raises(ContractViolation):
        esemer_loss(WeightVector(np.ones(3)), [[-1.0, -1.0, -1.0]], [1.0], 1.0, in_domain=False)


def test_esemer_shift_invariant():
    rng = np.random.default_rng(1)
    L = -rng.exponential(size=(4, 3))
    err = [0.0, 0.5, 1.0, 1.5]
    a, _ = esemer_loss(WeightVector(np.ones(3), bias=0.0), L, err, 1.0)
    b, _ = esemer_loss(WeightVector(np.ones(3), bias=7.0), L, err, 1.0)
    assert a == pytest.approx(b, abs=1e-12)


def random_instance(rng, n_hyp, use_bias):
    L = -rng.exponential(scale=2.0, size=(n_hyp, 3))
    theta = rng.normal(1.0, 1.0, size=4 if use_bias else 3)
    return L, theta


@pytest.mark.parametrize("use_bias", [False, True])
def test_esemer_gradient_matches_finite_differences(use_bias):
    rng = np.random.default_rng(2)
    for _ in range(100):
        L, theta = random_instance(rng, 4, use_bias)
        err = rng.choice([0.0, 0.5, 1.0, 1.5, 2.0], size=4)
        lam = 1.0 / rng.integers(1, 50)
        f, g = esemer_loss(wv(theta), L, err, lam)
        assert f == pytest.approx(lam * float(mp_expected_semer(list(theta), L, err)), rel=1e-12)
        fd = lam * mp_grad(lambda t: mp_expected_semer(t, L, err), theta)
        assert rel_err(g, fd) < 1e-5


# --- expected cross-entropy -------------------------------------------------


@pytest.mark.parametrize("ie_value", [0, 1])
def test_ce_single_hypothesis_at_zero_score(ie_value):
    loss, _ = ece_loss(WeightVector(np.zeros(3)), [[-1.0, -2.0, -3.0]], [ie_value], 0.2)
    assert loss == pytest.approx(0.2 * math.log(2))


def test_ce_printed_sign_is_negation():
    L = [[-1.0, -2.0, -3.0], [-0.1, -0.2, -0.3]]
    w = WeightVector(np.array([0.5, 1.0, 2.0]), bias=0.3)
    a, ga = ece_loss(w, L, [0, 1], 1.0)
    b, gb = ece_loss(w, L, [0, 1], 1.0, sign="printed")
    assert b == -a
    np.testing.assert_array_equal(gb, -ga)


def test_ce_empty():
    with pytest.raises(EmptyInputError):
        ece_loss(WeightVector(np.ones(3)), np.zeros((0, 3)), [], 1.0)


@pytest.mark.parametrize("use_bias", [False, True])
def test_ce_gradient_matches_finite_differences(use_bias):
    rng = np.random.default_rng(3)
    for _ in range(100):
        L, theta = random_instance(rng, 5, use_bias)
        ies = rng.integers(0, 2, size=5)
        lam = 1.0 / rng.integers(1, 50)
        f, g = ece_loss(wv(theta), L, ies, lam)
        assert f == pytest.approx(lam * float(mp_expected_ce(list(theta), L, ies)), rel=1e-12)
        fd = lam * mp_grad(lambda t: mp_expected_ce(t, L, ies), theta)
        assert rel_err(g, fd) < 1e-5


# --- batched objective ------------------------------------------------------


def random_training_set(rng, n_utt=6):
    sizes = rng.integers(1, 6, size=n_utt)
    n = int(sizes.sum())
    in_domain = rng.random(n_utt) < 0.6
    in_domain[0] = True
    semer = rng.choice([0.0, 0.5, 1.0, 2.0], size=n)
    ie = (semer > 0).astype(float)
    # out-of-domain utterances only have wrong hypotheses
    seg = np.repeat(np.arange(n_utt), sizes)
    semer[~in_domain[seg]] = np.maximum(semer[~in_domain[seg]], 1.0)
    ie[~in_domain[seg]] = 1.0
    return DomainTrainingSet(
        "D",
        -rng.exponential(scale=2.0, size=(n, 3)),
        np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64),
        semer,
        ie,
        in_domain,
    )


def test_objective_equals_sum_of_per_utterance_losses():
    rng = np.random.default_rng(4)
    data = random_training_set(rng, 8)
    theta = np.array([0.7, 1.3, 0.4, -0.2])
    obj = Objective(data, LossConfig(autoscale=False), 1.0, 1.0)
    f, g = obj(theta)
    bounds = np.append(data.starts, len(data.L))
    f_ref, g_ref = 0.0, np.zeros(4)
    for k in range(data.n_utterances):
        sl = slice(bounds[k], bounds[k + 1])
        if data.in_domain[k]:
            v, gv = esemer_loss(wv(theta), data.L[sl], data.semer[sl], data.lam1)
            f_ref += v
            g_ref += gv
        v, gv = ece_loss(wv(theta), data.L[sl], data.ie[sl], data.lam2)
        f_ref += v
        g_ref += gv
    assert f == pytest.approx(f_ref, rel=1e-12)
    np.testing.assert_allclose(g, g_ref, rtol=1e-10, atol=1e-14)


def mp_objective(data, k1, k2, l2, theta_ref):
    """Reference for the batched objective, autoscaled at ``theta_ref``."""
    bounds = np.append(data.starts, len(data.L))
    groups = [slice(bounds[k], bounds[k + 1]) for k in range(data.n_utterances)]
    lam1 = mp.mpf(1) / int(data.in_domain.sum())
    lam2 = mp.mpf(1) / data.n_utterances

    def parts(t):
        S = lam1 * mp.fsum(
            mp_expected_semer(t, data.L[g], data.semer[g]) for g, d in zip(groups, data.in_domain) if d
        )
        C = lam2 * mp.fsum(mp_expected_ce(t, data.L[g], data.ie[g]) for g in groups)
        return S, C

    S0, C0 = parts([mp.mpf(float(v)) for v in theta_ref])
    # a term that is exactly zero at the reference point is left unscaled
    S0 = S0 or mp.mpf(1)
    C0 = C0 or mp.mpf(1)

    def f(t):
        S, C = parts(t)
        reg = mp.fsum((t[j] - (1 if j < 3 else 0)) ** 2 for j in range(len(t)))
        return k1 * S / S0 + k2 * C / C0 + mp.mpf(l2) / 2 * reg

    return f


@pytest.mark.parametrize("k1, k2", [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.3, 2.0)])
def test_combined_objective_gradient_matches_finite_differences(k1, k2):
    rng = np.random.default_rng(5)
    for _ in range(100):
        data = random_training_set(rng)
        obj = Objective(data, LossConfig(l2=0.01), k1, k2)
        theta_ref = rng.normal(1.0, 1.0, size=4)
        obj.calibrate_scale(theta_ref)
        theta = rng.normal(1.0, 1.0, size=4)
        f, g = obj(theta)
        ref = mp_objective(data, k1, k2, 0.01, theta_ref)
        assert f == pytest.approx(float(ref([mp.mpf(float(v)) for v in theta])), rel=1e-10)
        assert rel_err(g, mp_grad(ref, theta)) < 1e-5


# --- training ---------------------------------------------------------------


def test_baseline_is_uniform_and_untrained():
    rng = np.random.default_rng(6)
    w = train(Scheme.BASELINE, random_training_set(rng))
    np.testing.assert_array_equal(w.w, [1.0, 1.0, 1.0])
    assert w.bias is None


def test_baseline_ranks_by_summed_log_probs():
    rng = np.random.default_rng(7)
    L = -rng.exponential(size=(4, 3))
    hyps = [Hypothesis("Books", f"I{i}", (), L[i], i) for i in range(4)]
    top = top_hypothesis(WeightVector.uniform(), hyps)
    assert top.index == int(np.argmax(L.sum(axis=1)))


def test_r1_needs_in_domain_utterances():
    rng = np.random.default_rng(8)
    data = random_training_set(rng)
    data.in_domain[:] = False
    with pytest.raises(DegenerateTrainingError):
        train(Scheme.R1, data)


def test_r3_without_ce_term_equals_r1():
    rng = np.random.default_rng(9)
    data = random_training_set(rng, 20)
    cfg = LossConfig(k1=1.0, k2=0.0)
    r1 = train(Scheme.R1, data, cfg)
    r3 = train(Scheme.R3, data, cfg)
    np.testing.assert_allclose(r3.theta, r1.theta, atol=1e-6)


def test_training_is_deterministic():
    rng = np.random.default_rng(10)
    data = random_training_set(rng, 30)
    a = train(Scheme.R3, data)
    b = train(Scheme.R3, data)
    assert a.theta.tobytes() == b.theta.tobytes()


def test_descent_never_increases_objective():
    rng = np.random.default_rng(11)
    data = random_training_set(rng, 30)
    obj = Objective(data, LossConfig(), 1.0, 1.0)
    theta0 = np.array([1.0, 1.0, 1.0, 0.0])
    obj.calibrate_scale(theta0)
    _, history, _, _ = gradient_descent(obj, theta0, OptimizerSettings(max_iter=500))
    assert np.all(np.diff(history) <= 0)


def test_free_scores_concentrate_on_lowest_semer():
    # identity features make each weight the free score of one hypothesis
    err = np.array([1.0, 0.0, 0.5, 2.0])
    L = np.vstack([np.eye(3), [[0.0, 0.0, 0.0]]])

    def fun(theta):
        return esemer_loss(WeightVector(theta), L, err, 1.0)

    theta, history, _, _ = gradient_descent(fun, np.zeros(3), OptimizerSettings(max_iter=5000, tol=1e-12))
    p = hypothesis_softmax(L @ theta)
    assert int(np.argmax(p)) == 1
    assert p[1] > 0.99
    assert np.all(np.diff(history) <= 0)


def make_ic_informative_set(rng, n):
    """Correct hypothesis always has the best IC score; NER score is misleading noise."""
    L, semer, starts = [], [], []
    for _ in range(n):
        starts.append(len(L))
        correct = rng.integers(4)
        ic = -rng.uniform(1.0, 3.0, size=4)
        ic[correct] = -rng.uniform(0.0, 0.5)
        ner = -rng.exponential(2.0, size=4)
        for i in range(4):
            L.append([-0.1, ic[i], ner[i]])
            semer.append(0.0 if i == correct else 0.5)
    semer = np.array(semer)
    return DomainTrainingSet(
        "D", np.array(L), np.array(starts, dtype=np.int64), semer, (semer > 0).astype(float), np.ones(n, dtype=bool)
    )


def top1_ie(w, data):
    s = score(w, data.L)
    bounds = np.append(data.starts, len(data.L))
    wrong = [data.ie[a + int(np.argmax(s[a:b]))] for a, b in zip(bounds[:-1], bounds[1:])]
    return float(np.mean(wrong))


def test_r2_learns_to_trust_informative_component():
    rng = np.random.default_rng(12)
    train_set = make_ic_informative_set(rng, 300)
    held_out = make_ic_informative_set(rng, 300)
    w = train(Scheme.R2, train_set)
    assert top1_ie(w, held_out) < top1_ie(WeightVector.uniform(), held_out)
    assert w.w[1] > w.w[2]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_positive_rescaling_keeps_top(seed, c):
    rng = np.random.default_rng(seed)
    L = -rng.exponential(size=(6, 3))
    w = WeightVector(rng.uniform(0.1, 3, size=3))
    hyps = [Hypothesis("D", "I", (), L[i], i) for i in range(6)]
    a = top_hypothesis(w, hyps).index
    b = top_hypothesis(WeightVector(c * w.w), hyps).index
    s = score(w, L)
    # exact ties can flip only through rounding; skip those
    if np.sort(s)[-1] - np.sort(s)[-2] > 1e-9:
        assert a == b


def test_top_hypothesis_tie_break_and_empty():
    hyps = [Hypothesis("D", "I", (), np.array([-1.0, 0, 0]), 0), Hypothesis("D", "J", (), np.array([0.0, 0, 0]), 1)]
    assert top_hypothesis(WeightVector.uniform(), hyps).index == 1
    tied = [Hypothesis("D", "I", (), np.zeros(3), 0), Hypothesis("D", "J", (), np.zeros(3), 1)]
    assert top_hypothesis(WeightVector.uniform(), tied).index == 0
    with pytest.raises(EmptyInputError):
        top_hypothesis(WeightVector.uniform(), [])


def make_inverted_set(rng, n):
    """NER scores favour the wrong hypothesis, so an unconstrained fit wants a negative NER weight."""
    L, semer, starts = [], [], []
    for _ in range(n):
        starts.append(len(L))
        ner = -rng.exponential(1.0, size=3)
        correct = int(np.argmin(ner))
        for i in range(3):
            L.append([-0.2, -1.0, ner[i]])
            semer.append(0.0 if i == correct else 1.0)
    semer = np.array(semer)
    return DomainTrainingSet(
        "D", np.array(L), np.array(starts, dtype=np.int64), semer, (semer > 0).astype(float), np.ones(n, dtype=bool)
    )


def test_nonnegative_projection():
    data = make_inverted_set(np.random.default_rng(13), 100)
    free = train(Scheme.R1, data, LossConfig(nonnegative=False, l2=0.01))
    kept = train(Scheme.R1, data, LossConfig(nonnegative=True, l2=0.01))
    assert free.w[2] < 0
    assert np.all(kept.w >= 0)
    assert kept.w[2] == 0.0
