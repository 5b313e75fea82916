"""Offline preference optimization of a tabular policy.

Each pair's loss is built on its own tape from the two policy log-probabilities;
the resulting dL/dlog P values are pushed onto the logits through the analytic
Jacobian of the sequence log-probability.
"""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import gradcheck
from .losses import PairLogProbs, adaptive_coefficient, implicit_rewards, is_clamped, loss_and_grads
from .policy import TabularPolicy, sequence_logprob, sequence_logprob_and_grad
from .rng import SplitMix64

METRIC_COLUMNS = (
    "step",
    "train_loss",
    "eval_loss",
    "reward_accuracy",
    "reward_margin_mean",
    "kl_margin_mean",
    "mean_beta_w_over_beta",
    "clamp_rate",
    "mean_abs_dPw",
    "mean_abs_dPl",
    "balance_ratio",
    "balance_max_dev",
)


class TrainingDivergence(RuntimeError):
    def __init__(self, step, batch, detail):
        super().__init__(f"non-finite {detail} at step {step} (batch {batch})")
        self.step = step
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 8
    shuffle: bool = True
    schedule: str = "constant"
    warmup_frac: float = 0.1

    def __post_init__(self):
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, epochs >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown train keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class StepMetrics:
    step: int
    train_loss: float
    eval_loss: float
    reward_accuracy: float
    reward_margin_mean: float
    kl_margin_mean: float
    mean_beta_w_over_beta: float
    clamp_rate: float
    mean_abs_dPw: float
    mean_abs_dPl: float
    # in-space balance: ratio of summed gradient magnitudes over unclamped pairs
    balance_ratio: float
    balance_max_dev: float

    def row(self):
        return [getattr(self, c) for c in METRIC_COLUMNS]

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    policy: TabularPolicy
    reference: TabularPolicy
    metrics: list


class SGD:
    def __init__(self, cfg):
        pass

    def step(self, params, grad, lr):
        params -= lr * grad


class Adam:
    def __init__(self, cfg):
        self.b1, self.b2, self.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grad, lr):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def learning_rate(cfg, step, total_steps):
    """Learning rate for 0-based ``step``; cosine decays to 0 after linear warmup."""
    if cfg.schedule == "constant" or total_steps == 0:
        return cfg.lr
    warmup = int(cfg.warmup_frac * total_steps)
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _reference_logprobs(reference, dataset):
    lr = reference.log_probs()
    return [
        (
            min(sequence_logprob(reference, p.prompt, p.chosen, lr), 0.0),
            min(sequence_logprob(reference, p.prompt, p.rejected, lr), 0.0),
        )
        for p in dataset.pairs
    ]


def _pair_lp(pair, w, l, ref):
    return PairLogProbs(min(w, 0.0), min(l, 0.0), ref[0], ref[1], len(pair.chosen), len(pair.rejected))


def _exp(x):
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def evaluate(policy, reference, eval_set, spec, step=0, train_loss=math.nan, ref_logps=None):
    """Metrics of ``policy`` on ``eval_set``; no parameters change.

    Reward accuracy counts strict wins r_w > r_l, so ties (all of them at
    initialization) are incorrect.
    """
    if len(eval_set) == 0:
        raise ValueError("eval set is empty")
    if ref_logps is None:
        ref_logps = _reference_logprobs(reference, eval_set)
    table = policy.log_probs()
    n = len(eval_set)
    loss_sum = margin_sum = kl_sum = coef_sum = 0.0
    correct = clamped = 0
    dpw_sum = dpl_sum = 0.0
    bal_w = bal_l = 0.0
    bal_dev = 0.0
    n_balanced = 0
    for pair, ref in zip(eval_set.pairs, ref_logps):
        w = sequence_logprob(policy, pair.prompt, pair.chosen, table)
        l = sequence_logprob(policy, pair.prompt, pair.rejected, table)
        lp = _pair_lp(pair, w, l, ref)
        L, gw, gl = loss_and_grads(lp, spec)
        loss_sum += L
        r_w, r_l = implicit_rewards(lp, spec)
        correct += r_w > r_l
        margin_sum += r_w - r_l
        kl_sum += spec.beta * (lp.log_x_w - lp.log_x_l)
        coef_sum += adaptive_coefficient(lp, spec) / spec.beta_base
        dpw_sum += abs(gw) * _exp(-lp.logp_w_pol)
        dpl_sum += abs(gl) * _exp(-lp.logp_l_pol)
        if is_clamped(lp, spec):
            clamped += 1
            continue
        if spec.base == "ORPO":
            gw, gl = gradcheck.grads_wrt_logprobs(lp, spec, sft=False)
        if gradcheck.underflowed(gw, gl):
            continue
        n_balanced += 1
        zw, zl = gradcheck.balance_log_coords(lp, spec)
        bal_w += abs(gw) * _exp(-zw)
        bal_l += abs(gl) * _exp(-zl)
        bal_dev = gradcheck._nanmax(bal_dev, abs(gradcheck._ratio(gw, gl, zw, zl) - 1.0))
    return StepMetrics(
        step=step,
        train_loss=train_loss,
        eval_loss=loss_sum / n,
        reward_accuracy=correct / n,
        reward_margin_mean=margin_sum / n,
        kl_margin_mean=kl_sum / n,
        mean_beta_w_over_beta=coef_sum / n,
        clamp_rate=clamped / n,
        mean_abs_dPw=dpw_sum / n,
        mean_abs_dPl=dpl_sum / n,
        balance_ratio=bal_w / bal_l if n_balanced and bal_l > 0 else math.nan,
        balance_max_dev=bal_dev if n_balanced else math.nan,
    )


def _dataset_loss(policy, dataset, spec, ref_logps):
    table = policy.log_probs()
    total = 0.0
    for pair, ref in zip(dataset.pairs, ref_logps):
        w = sequence_logprob(policy, pair.prompt, pair.chosen, table)
        l = sequence_logprob(policy, pair.prompt, pair.rejected, table)
        total += loss_and_grads(_pair_lp(pair, w, l, ref), spec)[0]
    return total / len(dataset)


def train(dataset, spec, cfg, eval_set=None, reference=None, context_order=1, callback=None):
    """Train a fresh policy, warm-started from ``reference``, on ``dataset``.

    The reference defaults to a uniform policy (zero logits). Metrics are
    recorded at step 0, every ``cfg.eval_every`` optimizer steps and at the
    final step; ``train_loss`` is the mean batch loss since the previous
    record (the full training loss at step 0).
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if eval_set is None:
        eval_set = dataset
    if reference is None:
        reference = TabularPolicy(dataset.vocab_size, context_order)
    policy = reference.copy()
    ref_checksum = reference.checksum()

    train_ref = _reference_logprobs(reference, dataset)
    eval_ref = _reference_logprobs(reference, eval_set)
    opt = Adam(cfg) if cfg.optimizer == "adam" else SGD(cfg)
    rng = SplitMix64(cfg.seed)
    order = list(range(len(dataset)))
    n_batches = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches

    def record(step, train_loss):
        m = evaluate(policy, reference, eval_set, spec, step, train_loss, eval_ref)
        metrics.append(m)
        if callback is not None:
            callback(m)

    metrics = []
    record(0, _dataset_loss(policy, dataset, spec, train_ref))
    window = []
    step = 0
    for _ in range(cfg.epochs):
        if cfg.shuffle:
            rng.shuffle(order)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            table = policy.log_probs()
            grad = np.zeros_like(policy.logits)
            batch_loss = 0.0
            for i in idx:
                pair = dataset.pairs[i]
                w, dw = sequence_logprob_and_grad(policy, pair.prompt, pair.chosen, table)
                l, dl = sequence_logprob_and_grad(policy, pair.prompt, pair.rejected, table)
                if not (math.isfinite(w) and math.isfinite(l)):
                    raise TrainingDivergence(step + 1, b, "log-probability")
                L, gw, gl = loss_and_grads(_pair_lp(pair, w, l, train_ref[i]), spec)
                if not (math.isfinite(L) and math.isfinite(gw) and math.isfinite(gl)):
                    raise TrainingDivergence(step + 1, b, "loss")
                batch_loss += L
                grad += gw * dw + gl * dl
            grad /= len(idx)
            opt.step(policy.logits, grad, learning_rate(cfg, step, total_steps))
            step += 1
            if not np.all(np.isfinite(policy.logits)):
                raise TrainingDivergence(step, b, "parameters")
            window.append(batch_loss / len(idx))
            if step % cfg.eval_every == 0 or step == total_steps:
                record(step, sum(window) / len(window))
                window = []
    if reference.checksum() != ref_checksum:
        raise AssertionError("reference policy was modified during training")
    return TrainResult(policy, reference, metrics)
