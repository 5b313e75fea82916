"""Pairwise preference losses and their self-adaptive counterparts.

Every loss is a scalar function of the two policy log-probabilities of a
preference pair; reference log-probabilities and lengths are constants. The
adaptive variants replace the chosen-side coefficient ``beta`` with

    beta_w = k * beta_base * min(exp(log_ratio), C)

where ``log_ratio`` is a detached, method-specific log probability ratio. On a
tape the coefficient is built from the policy nodes and passed through
``stop_gradient`` so the mechanics match a framework implementation exactly.
"""

import math
from dataclasses import dataclass, field, fields, replace

from . import autodiff as ad

BASE_METHODS = ("DPO", "IPO", "SimPO", "RDPO", "CPO", "ORPO")
ADAPTIVE_METHODS = ("AdaDPO", "StableAdaDPO", "AdaIPO", "AdaSimPO", "AdaRDPO", "AdaCPO", "AdaORPO")
METHODS = BASE_METHODS + ADAPTIVE_METHODS

BASE_OF = {
    "AdaDPO": "DPO",
    "StableAdaDPO": "DPO",
    "AdaIPO": "IPO",
    "AdaSimPO": "SimPO",
    "AdaRDPO": "RDPO",
    "AdaCPO": "CPO",
    "AdaORPO": "ORPO",
}

# methods whose margin is built on policy/reference log-ratios
REFERENCE_METHODS = ("DPO", "IPO", "RDPO")

BALANCE_SPACES = ("ratio", "policy")


@dataclass(frozen=True)
class PairLogProbs:
    """Sequence log-probabilities of one preference pair.

    ``logp_*_pol`` are under the trainable policy, ``logp_*_ref`` under the
    frozen reference; lengths count response tokens only.
    """

    logp_w_pol: float
    logp_l_pol: float
    logp_w_ref: float
    logp_l_ref: float
    len_w: int
    len_l: int

    def __post_init__(self):
        for name in ("logp_w_pol", "logp_l_pol", "logp_w_ref", "logp_l_ref"):
            v = getattr(self, name)
            if not math.isfinite(v) or v > 0.0:
                raise ValueError(f"{name} must be finite and <= 0, got {v!r}")
        for name in ("len_w", "len_l"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def log_x_w(self):
        return self.logp_w_pol - self.logp_w_ref

    @property
    def log_x_l(self):
        return self.logp_l_pol - self.logp_l_ref


@dataclass(frozen=True)
class LossSpec:
    method: str
    beta: float = 0.1
    ceiling_C: float = 2.0
    balance_space: str = "ratio"
    alpha_w: float = 1.0
    alpha_l: float = 1.0
    gamma: float = 0.5
    tau: float = 0.5
    len_penalty_alpha: float = 0.01
    k: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta!r}")
        if not self.ceiling_C > 1:
            raise ValueError(f"ceiling_C must be > 1, got {self.ceiling_C!r}")
        if self.balance_space not in BALANCE_SPACES:
            raise ValueError(f"balance_space must be 'ratio' or 'policy', got {self.balance_space!r}")
        if self.alpha_w < 0 or self.alpha_l < 0:
            raise ValueError("alpha_w and alpha_l must be >= 0")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau!r}")
        if self.len_penalty_alpha < 0:
            raise ValueError("len_penalty_alpha must be >= 0")
        if not self.k > 0:
            raise ValueError(f"k must be > 0, got {self.k!r}")

    @property
    def adaptive(self):
        return self.method in ADAPTIVE_METHODS

    @property
    def base(self):
        return BASE_OF.get(self.method, self.method)

    @property
    def beta_base(self):
        """Coefficient on the rejected side (IPO has no beta, so it is 1)."""
        return 1.0 if self.base == "IPO" else self.beta

    def to_base(self):
        return replace(self, method=self.base)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown loss keys: {', '.join(unknown)}")
        return cls(**d)


def _log1mexp(x):
    return ad.log1mexp_value(x)


def adaptive_log_ratio(lp, spec):
    """Detached log of the raw adaptive ratio beta_w / (k * beta_base)."""
    w, l = lp.logp_w_pol, lp.logp_l_pol
    base = spec.base
    if spec.method == "StableAdaDPO":
        # term order and divisions exactly as in the length-normalized reference code
        lw, ll = float(lp.len_w), float(lp.len_l)
        if spec.balance_space == "policy":
            return w / lw - l / ll
        return w / lw - l / ll - lp.logp_w_ref / lw + lp.logp_l_ref / ll
    if base in REFERENCE_METHODS:
        if spec.balance_space == "policy":
            return spec.alpha_w * w - spec.alpha_l * l
        return spec.alpha_w * (w - lp.logp_w_ref) - spec.alpha_l * (l - lp.logp_l_ref)
    if base == "CPO":
        return spec.alpha_w * w - spec.alpha_l * l
    if base == "SimPO":
        return spec.alpha_w * (math.log(lp.len_w) + w) - spec.alpha_l * (math.log(lp.len_l) + l)
    if base == "ORPO":
        return spec.alpha_w * (w + _log1mexp(w)) - spec.alpha_l * (l + _log1mexp(l))
    raise ValueError(f"{spec.method} has no adaptive coefficient")


def _clamped_ratio(log_ratio, C):
    # one nat of headroom keeps exp() finite while still saturating to exactly C
    capped = min(log_ratio, math.log(C) + 1.0)
    try:
        r = math.exp(capped)
    except OverflowError:
        r = math.inf
    return min(r, C)


def adaptive_coefficient(lp, spec):
    """beta_w as a plain float. Non-adaptive methods return their fixed beta."""
    if not spec.adaptive:
        return spec.beta_base
    return spec.k * spec.beta_base * _clamped_ratio(adaptive_log_ratio(lp, spec), spec.ceiling_C)


def is_clamped(lp, spec):
    if not spec.adaptive:
        return False
    return _clamped_ratio(adaptive_log_ratio(lp, spec), spec.ceiling_C) >= spec.ceiling_C


def _coefficient_node(tape, lp, spec, w, l):
    """beta_w built on the tape from the policy nodes and then detached."""
    base = spec.base
    if spec.method == "StableAdaDPO":
        lw, ll = float(lp.len_w), float(lp.len_l)
        if spec.balance_space == "policy":
            lr = w / lw - l / ll
        else:
            lr = w / lw - l / ll - lp.logp_w_ref / lw + lp.logp_l_ref / ll
    elif base in REFERENCE_METHODS:
        if spec.balance_space == "policy":
            lr = spec.alpha_w * w - spec.alpha_l * l
        else:
            lr = spec.alpha_w * (w - lp.logp_w_ref) - spec.alpha_l * (l - lp.logp_l_ref)
    elif base == "CPO":
        lr = spec.alpha_w * w - spec.alpha_l * l
    elif base == "SimPO":
        lr = spec.alpha_w * (math.log(lp.len_w) + w) - spec.alpha_l * (math.log(lp.len_l) + l)
    else:
        lr = spec.alpha_w * (w + ad.log1mexp(w)) - spec.alpha_l * (l + ad.log1mexp(l))
    lr = ad.stop_gradient(lr)
    C = spec.ceiling_C
    ratio = ad.clamp_max(ad.exp(ad.clamp_max(lr, math.log(C) + 1.0)), C)
    return spec.k * spec.beta_base * ratio


def _margin(lp, spec, bw, bl, w, l):
    """Argument of the link function; works on floats and on nodes alike."""
    base = spec.base
    if base in REFERENCE_METHODS:
        m = bw * (w - lp.logp_w_ref) - bl * (l - lp.logp_l_ref)
        if base == "RDPO":
            m = m - spec.len_penalty_alpha * (lp.len_w - lp.len_l)
        return m
    if base == "SimPO":
        return (bw / lp.len_w) * w - (bl / lp.len_l) * l - spec.gamma
    if base == "CPO":
        return bw * w - bl * l
    raise AssertionError(base)


def loss(lp, spec, nodes=None, beta_w=None, sft=True):
    """Build the method's scalar loss on a tape and return its root node.

    ``nodes`` is an optional ``(w, l)`` pair of tape nodes standing for
    ``logp_w_pol`` and ``logp_l_pol``; by default fresh variables are created on
    a new tape. Passing ``beta_w`` injects the chosen-side coefficient as a
    plain constant instead of building it through ``stop_gradient``.
    ``sft=False`` drops ORPO's likelihood term, leaving the contrastive part.
    """
    if nodes is None:
        tape = ad.Tape()
        w, l = tape.var(lp.logp_w_pol), tape.var(lp.logp_l_pol)
    else:
        w, l = nodes
        tape = w.tape
    bl = spec.beta_base
    if beta_w is not None:
        bw = tape.const(beta_w)
    elif spec.adaptive:
        bw = _coefficient_node(tape, lp, spec, w, l)
    else:
        bw = tape.const(bl)

    base = spec.base
    if base == "ORPO":
        if lp.logp_w_pol == 0.0 or lp.logp_l_pol == 0.0:
            raise ad.DomainError("ORPO odds are undefined for a sequence of probability 1")
        odds_w = w - ad.log1mexp(w)
        odds_l = l - ad.log1mexp(l)
        out = -ad.log_sigmoid(bw * odds_w - bl * odds_l)
        if sft:
            out = out - w
        return out
    m = _margin(lp, spec, bw, bl, w, l)
    if base == "IPO":
        return (m - 1.0 / (2.0 * spec.tau)) ** 2
    return -ad.log_sigmoid(m)


def loss_value(lp, spec, beta_w=None, sft=True):
    return loss(lp, spec, beta_w=beta_w, sft=sft).value


def loss_and_grads(lp, spec, beta_w=None, sft=True):
    """(loss, dL/dlogp_w_pol, dL/dlogp_l_pol)."""
    tape = ad.Tape()
    w, l = tape.var(lp.logp_w_pol), tape.var(lp.logp_l_pol)
    root = loss(lp, spec, nodes=(w, l), beta_w=beta_w, sft=sft)
    grads = ad.backward(root)
    return root.value, grads[w], grads[l]


def implicit_rewards(lp, spec):
    """(r_w, r_l): the two coefficient-scaled terms of the method's margin."""
    bw = adaptive_coefficient(lp, spec)
    bl = spec.beta_base
    base = spec.base
    w, l = lp.logp_w_pol, lp.logp_l_pol
    if base in REFERENCE_METHODS:
        return bw * lp.log_x_w, bl * lp.log_x_l
    if base == "SimPO":
        return bw / lp.len_w * w, bl / lp.len_l * l
    if base == "CPO":
        return bw * w, bl * l
    return bw * (w - _log1mexp(w)), bl * (l - _log1mexp(l))
