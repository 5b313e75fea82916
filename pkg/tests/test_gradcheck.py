import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adadpo import gradcheck as gc
from adadpo.losses import ADAPTIVE_METHODS, BASE_METHODS, METHODS, LossSpec, PairLogProbs, is_clamped

LN = math.log
WORKED = PairLogProbs(LN(0.10), LN(0.02), LN(0.05), LN(0.05), 1, 1)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_dpo_prob_gradient_worked_pair():
    g = gc.grads_wrt_probs(WORKED, LossSpec("DPO", beta=0.1))
    delta = 0.1 * LN(5.0)
    assert g.dP_w == pytest.approx(-sigmoid(-delta) * 0.1 / 0.10, rel=1e-12)
    assert g.dP_w == pytest.approx(-0.45985, abs=1e-5)
    assert g.dP_l == pytest.approx(sigmoid(-delta) * 0.1 / 0.02, rel=1e-12)
    assert abs(g.dP_w) / abs(g.dP_l) == pytest.approx(0.2, abs=1e-12)
    assert not g.overflow


def test_dpo_symmetric_point_ratio_one():
    lp = PairLogProbs(-2.0, -2.0, -3.0, -3.0, 2, 2)
    rep = gc.balance_report(lp, LossSpec("DPO"))
    assert rep.ratio_P == pytest.approx(1.0, abs=1e-15)
    assert rep.ratio_x == pytest.approx(1.0, abs=1e-15)


def test_prob_gradient_overflow_is_flagged():
    lp = PairLogProbs(-800.0, -790.0, -1.0, -1.0, 1, 1)
    g = gc.grads_wrt_probs(lp, LossSpec("DPO"))
    assert g.overflow
    # the log-space ratio P_l / P_w is still available
    rep = gc.balance_report(lp, LossSpec("DPO"), fd=False)
    assert rep.ratio_P == pytest.approx(math.exp(10.0), rel=1e-9)


def test_worked_pair_report():
    rep = gc.balance_report(WORKED, LossSpec("DPO", beta=0.1))
    assert rep.ratio_P == pytest.approx(0.2, abs=1e-12)
    assert rep.ratio_x == pytest.approx(0.2, abs=1e-12)
    assert rep.fd_max_rel_err < 1e-9
    d = rep.to_dict()
    assert set(d) >= {"ratio_P", "ratio_x", "grad_logp_w", "grad_logp_l", "fd_max_rel_err"}
    json.dumps(d)


@settings(max_examples=300)
@given(
    st.floats(-50, -0.1), st.floats(-50, -0.1), st.floats(-50, -0.1), st.floats(-50, -0.1),
    st.integers(1, 64), st.integers(1, 64),
)
def test_dpo_ratios_are_closed_form(w, l, rw, rl, nw, nl):
    lp = PairLogProbs(w, l, rw, rl, nw, nl)
    rep = gc.balance_report(lp, LossSpec("DPO"), fd=False)
    assert rep.ratio_x == pytest.approx(math.exp((l - rl) - (w - rw)), rel=1e-9)
    assert rep.ratio_P == pytest.approx(math.exp(l - w), rel=1e-9)
    assert rep.ratio_P > 0 and rep.ratio_x > 0


@settings(max_examples=300)
@given(
    st.floats(-50, -0.1), st.floats(-50, -0.1), st.floats(-50, -0.1), st.floats(-50, -0.1),
    st.integers(1, 64), st.integers(1, 64),
)
def test_adadpo_ratio_space_balance(w, l, rw, rl, nw, nl):
    lp = PairLogProbs(w, l, rw, rl, nw, nl)
    spec = LossSpec("AdaDPO", ceiling_C=math.inf)
    rep = gc.balance_report(lp, spec, fd=False)
    assert not rep.clamped
    if rep.underflow:
        return
    assert rep.ratio_x == pytest.approx(1.0, abs=1e-9)
    # P-space balance holds only up to the reference ratio
    assert rep.ratio_P == pytest.approx(math.exp(rl - rw), rel=1e-9)


@settings(max_examples=300)
@given(st.floats(-50, -0.1), st.floats(-50, -0.1), st.floats(-50, -0.1), st.floats(-50, -0.1))
def test_adadpo_policy_space_balance(w, l, rw, rl):
    lp = PairLogProbs(w, l, rw, rl, 1, 1)
    spec = LossSpec("AdaDPO", balance_space="policy")
    rep = gc.balance_report(lp, spec, fd=False)
    if not rep.clamped:
        assert rep.ratio_P == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("method", ADAPTIVE_METHODS)
def test_every_adaptive_method_balances_its_space(method):
    spec = LossSpec(method, beta=0.1)
    worst = 0.0
    n = 0
    for lp in gc.sample_pairs(300, seed=9):
        if is_clamped(lp, spec):
            continue
        n += 1
        worst = max(worst, abs(gc.balanced_ratio(lp, spec) - 1.0))
    assert n > 50
    assert worst < 1e-9


def test_stable_balance_is_per_token():
    spec = LossSpec("StableAdaDPO", beta=0.1)
    lp = PairLogProbs(-10.0, -30.0, -12.0, -28.0, 10, 20)
    gw, gl = gc.grads_wrt_logprobs(lp, spec)
    # per-token gradient in z = x**(1/len): (g / len) * len / z
    x_w = math.exp(lp.log_x_w / 10)
    x_l = math.exp(lp.log_x_l / 20)
    assert abs(gw / x_w) / abs(gl / x_l) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("method", BASE_METHODS)
def test_base_methods_match_closed_form_ratio(method):
    spec = LossSpec(method, beta=0.1)
    for lp in gc.sample_pairs(200, seed=4):
        assert gc.balanced_ratio(lp, spec) == pytest.approx(gc.closed_form_ratio(lp, spec), rel=1e-9)


def test_closed_form_ratio_hand_values():
    lp = PairLogProbs(LN(0.5), LN(0.25), LN(0.5), LN(0.5), 2, 3)
    assert gc.closed_form_ratio(lp, LossSpec("CPO")) == pytest.approx(0.5)
    assert gc.closed_form_ratio(lp, LossSpec("SimPO")) == pytest.approx(0.75)
    assert gc.closed_form_ratio(lp, LossSpec("ORPO")) == pytest.approx(0.25 * 0.75 / (0.5 * 0.5))
    assert gc.closed_form_ratio(lp, LossSpec("DPO")) == pytest.approx(0.5)


@pytest.mark.parametrize("method", METHODS)
def test_finite_difference_oracle(method):
    spec = LossSpec(method, beta=0.1)
    worst = max(gc.fd_error(lp, spec) for lp in gc.sample_pairs(100, seed=12))
    assert 0.0 <= worst < gc.FD_TOL


def test_fd_oracle_catches_a_wrong_gradient():
    lp = PairLogProbs(-2.0, -3.0, -2.5, -2.5, 1, 1)
    spec = LossSpec("DPO", beta=0.1)
    fw, fl = gc.fd_grads(lp, spec)
    gw, gl = gc.grads_wrt_logprobs(lp, spec)
    assert gc.rel_err(gw, fw) < 1e-9
    assert gc.rel_err(1.001 * gw, fw) > 1e-4


def test_rel_err():
    assert gc.rel_err(0.0, 0.0) == 0.0
    assert gc.rel_err(1.0, 2.0) == 0.5


def test_sweep_rejects_empty():
    with pytest.raises(ValueError):
        gc.random_balance_sweep(0, 0, LossSpec("AdaDPO"))


def test_sweep_unbounded_ceiling():
    # without a ceiling beta_w reaches ~e^100 and some pairs' gradients vanish in
    # double precision; those are counted apart and every other pair balances
    s = gc.random_balance_sweep(1000, 0, LossSpec("AdaDPO", ceiling_C=math.inf), fd=False)
    assert s["clamp_rate"] == 0.0
    assert s["n_unclamped"] == 1000
    assert 0 < s["n_underflow"] < 1000
    assert s["max_deviation"] < 1e-9
    assert gc.sweep_passes(s)


@pytest.mark.parametrize("method", METHODS)
def test_default_ceiling_has_no_underflow(method):
    s = gc.random_balance_sweep(300, 0, LossSpec(method), fd=False)
    assert s["n_underflow"] == 0


def test_underflow_classification():
    assert gc.underflowed(0.0, 1.0)
    assert gc.underflowed(1.0, 5e-324)
    assert not gc.underflowed(1e-300, -1e-300)
    lp = PairLogProbs(-0.1, -50.0, -50.0, -0.1, 1, 1)
    rep = gc.balance_report(lp, LossSpec("AdaDPO", ceiling_C=math.inf), fd=False)
    assert rep.grad_logp_w == 0.0 and rep.underflow


def test_nan_fails_the_sweep_check():
    s = {"fd_max_rel_err": None, "balance_asserted": True, "max_deviation": math.nan}
    assert not gc.sweep_passes(s)


def test_sweep_dpo_baseline_reports_raw_deviation():
    samples = gc.sample_pairs(500, seed=2)
    s = gc.random_balance_sweep(500, 2, LossSpec("DPO"), fd=False, samples=samples)
    expected = max(abs(math.exp(lp.log_x_l - lp.log_x_w) - 1.0) for lp in samples)
    assert s["max_deviation"] == pytest.approx(expected, rel=1e-9)
    assert not s["balance_asserted"]
    assert s["max_rel_err_vs_closed_form"] < 1e-9
    assert gc.sweep_passes(s)


def test_sample_pairs_deterministic_and_in_range():
    a = gc.sample_pairs(200, seed=1)
    assert a == gc.sample_pairs(200, seed=1)
    assert a != gc.sample_pairs(200, seed=2)
    for lp in a:
        for v in (lp.logp_w_pol, lp.logp_l_pol, lp.logp_w_ref, lp.logp_l_ref):
            assert -50.0 <= v <= -0.1
        assert 1 <= lp.len_w <= 64 and 1 <= lp.len_l <= 64


def test_clamp_rate_non_increasing_in_ceiling():
    samples = gc.sample_pairs(400, seed=0)
    for method in ADAPTIVE_METHODS:
        rates = [
            gc.random_balance_sweep(400, 0, LossSpec(method, ceiling_C=C), fd=False, samples=samples)["clamp_rate"]
            for C in (1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 10.0)
        ]
        assert all(a >= b for a, b in zip(rates, rates[1:])), (method, rates)
        assert all(0.0 <= r <= 1.0 for r in rates)
