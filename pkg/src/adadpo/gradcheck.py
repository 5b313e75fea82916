"""Gradient-magnitude ratios and their verification.

Gradients with respect to probabilities are never formed by differentiating in
probability space: sequence probabilities underflow. Autodiff gives
``g = dL/dlog P`` and the chain rule ``dL/dP = g / P`` is applied in log space,
so ratios stay exact even where ``P`` itself is not representable.

The finite-difference oracle re-evaluates each loss from its closed form in
high-precision arithmetic (mpmath), independently of the tape, with the
adaptive coefficient held at its detached value. Central differences are taken
in log-probability space.
"""

import math
import sys
from dataclasses import asdict, dataclass
from typing import NamedTuple

import mpmath

from . import losses
from .losses import PairLogProbs, adaptive_coefficient, is_clamped, loss_and_grads
from .rng import SplitMix64

FD_STEP = 1e-6
# enough digits to resolve gradients ~1e-45 against O(100) loss values with h = 1e-6
FD_DIGITS = 90

BALANCE_TOL = 1e-9
FD_TOL = 1e-5


class ProbGrads(NamedTuple):
    dP_w: float
    dP_l: float
    overflow: bool


@dataclass
class BalanceReport:
    ratio_P: float
    ratio_x: float
    grad_logp_w: float
    grad_logp_l: float
    fd_max_rel_err: float
    balanced_ratio: float
    balance_space: str
    clamped: bool
    beta_w: float
    underflow: bool = False

    def to_dict(self):
        return asdict(self)


def _safe_exp(x):
    try:
        return math.exp(x), False
    except OverflowError:
        return math.inf, True


def grads_wrt_logprobs(lp, spec, sft=True):
    _, gw, gl = loss_and_grads(lp, spec, sft=sft)
    return gw, gl


def grads_wrt_probs(lp, spec):
    """(dL/dP_w, dL/dP_l, overflow) via dL/dP = dL/dlogP * exp(-log P)."""
    gw, gl = grads_wrt_logprobs(lp, spec)
    sw, ow = _safe_exp(-lp.logp_w_pol)
    sl, ol = _safe_exp(-lp.logp_l_pol)
    return ProbGrads(gw * sw, gl * sl, ow or ol)


def underflowed(gw, gl):
    """True when either gradient is zero or subnormal, so no ratio can be read from it.

    With a very large chosen coefficient the sigmoid factor shared by both
    gradients drops below the smallest normal double and the pair produces
    no usable update at all.
    """
    return min(abs(gw), abs(gl)) < sys.float_info.min


def _ratio(gw, gl, log_zw, log_zl):
    """|gw / zw| / |gl / zl| evaluated without forming z."""
    if gl == 0.0:
        return math.inf if gw != 0.0 else math.nan
    scale, _ = _safe_exp(log_zl - log_zw)
    return abs(gw) / abs(gl) * scale


def balance_space_name(spec):
    if spec.method == "StableAdaDPO":
        return "per-token " + ("P" if spec.balance_space == "policy" else "x")
    if spec.base in losses.REFERENCE_METHODS:
        space = "P" if spec.balance_space == "policy" and spec.adaptive else "x"
        a_w = spec.alpha_w if spec.adaptive else 1.0
        a_l = spec.alpha_l if spec.adaptive else 1.0
        if (a_w, a_l) != (1.0, 1.0):
            return f"{space}^alpha"
        return space
    if spec.base == "ORPO":
        return "P (odds term)"
    return "P"


def balance_log_coords(lp, spec):
    """Log coordinates (log z_w, log z_l) of the space the method balances.

    The balanced ratio is |dL/dz_w| / |dL/dz_l| written as
    |g_w / z_w| / |g_l / z_l| with g the log-probability gradients; for
    fractional exponents (the per-token variant) this is the per-token
    gradient, i.e. the gradient in z = x**alpha divided by the length.
    """
    w, l = lp.logp_w_pol, lp.logp_l_pol
    if spec.method == "StableAdaDPO":
        if spec.balance_space == "policy":
            return w / lp.len_w, l / lp.len_l
        return lp.log_x_w / lp.len_w, lp.log_x_l / lp.len_l
    if spec.base in losses.REFERENCE_METHODS:
        a_w = spec.alpha_w if spec.adaptive else 1.0
        a_l = spec.alpha_l if spec.adaptive else 1.0
        if spec.balance_space == "policy" and spec.adaptive:
            return a_w * w, a_l * l
        return a_w * lp.log_x_w, a_l * lp.log_x_l
    # CPO, SimPO and ORPO balance in P itself
    return w, l


def balanced_ratio(lp, spec):
    # ORPO's likelihood term is not part of the contrastive pair, so balance is
    # measured on the odds term alone
    gw, gl = grads_wrt_logprobs(lp, spec, sft=spec.base != "ORPO")
    zw, zl = balance_log_coords(lp, spec)
    return _ratio(gw, gl, zw, zl)


# --- high-precision oracle -------------------------------------------------


def _mp_log_sigmoid(x):
    return -mpmath.log1p(mpmath.exp(-x))


def oracle_loss(lp, spec, beta_w, logp_w=None, logp_l=None, sft=True):
    """Closed-form loss in mpmath with the chosen coefficient fixed at ``beta_w``."""
    mp = mpmath.mpf
    w = mp(lp.logp_w_pol) if logp_w is None else logp_w
    l = mp(lp.logp_l_pol) if logp_l is None else logp_l
    rw, rl = mp(lp.logp_w_ref), mp(lp.logp_l_ref)
    bw, bl = mp(beta_w), mp(spec.beta_base)
    base = spec.base
    if base in ("DPO", "RDPO", "IPO"):
        m = bw * (w - rw) - bl * (l - rl)
        if base == "RDPO":
            m -= mp(spec.len_penalty_alpha) * (lp.len_w - lp.len_l)
        if base == "IPO":
            return (m - 1 / (2 * mp(spec.tau))) ** 2
        return -_mp_log_sigmoid(m)
    if base == "SimPO":
        return -_mp_log_sigmoid(bw / lp.len_w * w - bl / lp.len_l * l - mp(spec.gamma))
    if base == "CPO":
        return -_mp_log_sigmoid(bw * w - bl * l)
    # ORPO: log-odds log(P / (1 - P))
    pw, pl = mpmath.exp(w), mpmath.exp(l)
    odds_w = w - mpmath.log(1 - pw)
    odds_l = l - mpmath.log(1 - pl)
    out = -_mp_log_sigmoid(bw * odds_w - bl * odds_l)
    return out - w if sft else out


def fd_grads(lp, spec, beta_w=None, h=FD_STEP, sft=True):
    """Central differences of the oracle loss in log-probability space."""
    if beta_w is None:
        beta_w = adaptive_coefficient(lp, spec)
    with mpmath.workdps(FD_DIGITS):
        w, l = mpmath.mpf(lp.logp_w_pol), mpmath.mpf(lp.logp_l_pol)
        hh = mpmath.mpf(h)

        def f(a, b):
            return oracle_loss(lp, spec, beta_w, a, b, sft=sft)

        gw = (f(w + hh, l) - f(w - hh, l)) / (2 * hh)
        gl = (f(w, l + hh) - f(w, l - hh)) / (2 * hh)
        return float(gw), float(gl)


def rel_err(a, b):
    denom = max(abs(a), abs(b))
    if denom == 0.0:
        return 0.0
    return abs(a - b) / denom


def fd_error(lp, spec, h=FD_STEP):
    gw, gl = grads_wrt_logprobs(lp, spec)
    fw, fl = fd_grads(lp, spec, h=h)
    return max(rel_err(gw, fw), rel_err(gl, fl))


def balance_report(lp, spec, fd=True):
    gw, gl = grads_wrt_logprobs(lp, spec)
    return BalanceReport(
        ratio_P=_ratio(gw, gl, lp.logp_w_pol, lp.logp_l_pol),
        ratio_x=_ratio(gw, gl, lp.log_x_w, lp.log_x_l),
        grad_logp_w=gw,
        grad_logp_l=gl,
        fd_max_rel_err=fd_error(lp, spec) if fd else math.nan,
        balanced_ratio=balanced_ratio(lp, spec),
        balance_space=balance_space_name(spec),
        clamped=is_clamped(lp, spec),
        beta_w=adaptive_coefficient(lp, spec),
        underflow=underflowed(gw, gl),
    )


def closed_form_ratio(lp, spec):
    """Gradient-magnitude ratio of a non-adaptive loss in its natural space.

    DPO, R-DPO, IPO: x_l / x_w.  CPO: P_l / P_w.
    SimPO: |y_l| P_l / (|y_w| P_w).  ORPO (odds term): P_l (1 - P_l) / (P_w (1 - P_w)).
    """
    base = spec.base
    if base in losses.REFERENCE_METHODS:
        return math.exp(lp.log_x_l - lp.log_x_w)
    w, l = lp.logp_w_pol, lp.logp_l_pol
    if base == "CPO":
        return math.exp(l - w)
    if base == "SimPO":
        return lp.len_l / lp.len_w * math.exp(l - w)
    return math.exp(l - w) * (-math.expm1(l)) / (-math.expm1(w))


# --- random sweeps ----------------------------------------------------------

LOGP_RANGE = (-50.0, -0.1)
LEN_RANGE = (1, 64)


def sample_pairs(n, seed, logp_range=LOGP_RANGE, len_range=LEN_RANGE):
    """Random PairLogProbs: log-probs uniform in ``logp_range``, lengths uniform."""
    rng = SplitMix64(seed)
    lo, hi = logp_range
    out = []
    for _ in range(n):
        vals = [rng.uniform(lo, hi) for _ in range(4)]
        lw, ll = rng.randint(*len_range), rng.randint(*len_range)
        out.append(PairLogProbs(*vals, lw, ll))
    return out


def _nanmax(a, b):
    # plain max() would silently drop a NaN second argument
    return math.nan if math.isnan(a) or math.isnan(b) else max(a, b)


def random_balance_sweep(n, seed, spec, fd=True, samples=None):
    """Balance and finite-difference summary over ``n`` seeded random pairs.

    ``max_deviation`` is max |balanced ratio - 1| over unclamped samples whose
    gradients did not underflow (those are counted in ``n_underflow``). A NaN
    ratio anywhere else makes ``max_deviation`` NaN. For non-adaptive methods
    nothing is balanced; their ratio is additionally checked against
    :func:`closed_form_ratio`.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if samples is None:
        samples = sample_pairs(n, seed)
    n_clamped = 0
    n_underflow = 0
    max_dev = 0.0
    max_formula_err = 0.0
    max_fd = 0.0
    for lp in samples:
        clamped = is_clamped(lp, spec)
        n_clamped += clamped
        gw, gl = grads_wrt_logprobs(lp, spec, sft=spec.base != "ORPO")
        if underflowed(gw, gl):
            n_underflow += 1
        else:
            ratio = balanced_ratio(lp, spec)
            if not clamped:
                max_dev = _nanmax(max_dev, abs(ratio - 1.0))
            if not spec.adaptive:
                max_formula_err = _nanmax(max_formula_err, rel_err(ratio, closed_form_ratio(lp, spec)))
        if fd:
            max_fd = _nanmax(max_fd, fd_error(lp, spec))
    summary = {
        "method": spec.method,
        "n": len(samples),
        "seed": seed,
        "ceiling_C": spec.ceiling_C,
        "balance_space": balance_space_name(spec),
        "clamp_rate": n_clamped / len(samples),
        "n_unclamped": len(samples) - n_clamped,
        "n_underflow": n_underflow,
        "max_deviation": max_dev,
        "fd_max_rel_err": max_fd if fd else None,
        "balance_asserted": spec.adaptive,
    }
    if not spec.adaptive:
        summary["max_rel_err_vs_closed_form"] = max_formula_err
    return summary


def sweep_passes(summary):
    # comparisons with NaN are False, so a NaN anywhere fails the check
    ok = summary["fd_max_rel_err"] is None or summary["fd_max_rel_err"] < FD_TOL
    if summary["balance_asserted"]:
        ok = ok and summary["max_deviation"] < BALANCE_TOL
    if "max_rel_err_vs_closed_form" in summary:
        ok = ok and summary["max_rel_err_vs_closed_form"] < BALANCE_TOL
    return ok
