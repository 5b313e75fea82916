"""Tabular softmax policies over a small vocabulary.

A policy holds one row of logits per conditioning context. With
``context_order=0`` there is a single row; with ``context_order=1`` row ``t``
is used after token ``t`` and the extra last row is the start context, used
when neither the prompt nor the response supplies a previous token.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .losses import PairLogProbs


class TabularPolicy:
    def __init__(self, vocab_size, context_order=1, logits=None):
        if vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if context_order not in (0, 1):
            raise ValueError(f"context_order must be 0 or 1, got {context_order!r}")
        self.vocab_size = int(vocab_size)
        self.context_order = int(context_order)
        shape = (self.num_contexts, self.vocab_size)
        if logits is None:
            logits = np.zeros(shape)
        logits = np.array(logits, dtype=np.float64)
        if logits.shape != shape:
            raise ValueError(f"logits must have shape {shape}, got {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        self.logits = logits

    @property
    def num_contexts(self):
        return 1 if self.context_order == 0 else self.vocab_size + 1

    @property
    def start_context(self):
        return 0 if self.context_order == 0 else self.vocab_size

    def copy(self):
        return TabularPolicy(self.vocab_size, self.context_order, self.logits.copy())

    def log_probs(self):
        """Row-wise log-softmax of the logits."""
        # diverged logits may overflow here; the trainer checks for non-finite results
        with np.errstate(over="ignore", invalid="ignore"):
            z = self.logits - self.logits.max(axis=1, keepdims=True)
            return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def contexts(self, prompt, response):
        """Context row used for each response position."""
        if self.context_order == 0:
            return [0] * len(response)
        prev = prompt[-1] if len(prompt) else self.start_context
        ctx = [prev]
        ctx.extend(response[:-1])
        return ctx

    def checksum(self):
        return hashlib.sha256(self.logits.tobytes()).hexdigest()

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size,
            "context_order": self.context_order,
            "logits": self.logits.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        logits = np.asarray(d["logits"], dtype=np.float64)
        n_ctx = 1 if d["context_order"] == 0 else d["vocab_size"] + 1
        if logits.ndim == 1:
            logits = logits.reshape(n_ctx, d["vocab_size"])
        return cls(d["vocab_size"], d["context_order"], logits)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _check_tokens(policy, prompt, response):
    if len(response) == 0:
        raise ValueError("response must be non-empty")
    for t in list(prompt) + list(response):
        if not 0 <= t < policy.vocab_size:
            raise ValueError(f"token {t} outside vocabulary of size {policy.vocab_size}")


def sequence_logprob(policy, prompt, response, log_probs=None):
    """log pi(response | prompt) as a float."""
    _check_tokens(policy, prompt, response)
    lp = policy.log_probs() if log_probs is None else log_probs
    return float(sum(lp[c, t] for c, t in zip(policy.contexts(prompt, response), response)))


def sequence_logprob_and_grad(policy, prompt, response, log_probs=None):
    """(log-prob, d log-prob / d logits) with the gradient as a dense array.

    Each position contributes ``onehot(token) - softmax(row)`` to its context row.
    """
    _check_tokens(policy, prompt, response)
    lp = policy.log_probs() if log_probs is None else log_probs
    probs = np.exp(lp)
    grad = np.zeros_like(policy.logits)
    total = 0.0
    for c, t in zip(policy.contexts(prompt, response), response):
        total += lp[c, t]
        grad[c] -= probs[c]
        grad[c, t] += 1.0
    return float(total), grad


def logit_nodes(tape, policy):
    """Every logit as a tape variable, shaped like ``policy.logits``."""
    return [[tape.var(v) for v in row] for row in policy.logits]


def sequence_logprob_node(policy, prompt, response, nodes):
    """The same quantity built on a tape from ``logit_nodes`` (slow, for checks)."""
    _check_tokens(policy, prompt, response)
    cache = {}
    total = None
    for c, t in zip(policy.contexts(prompt, response), response):
        if c not in cache:
            row = nodes[c]
            m = max(n.value for n in row)
            s = ad.exp(row[0] - m)
            for n in row[1:]:
                s = s + ad.exp(n - m)
            cache[c] = ad.log(s) + m
        term = nodes[c][t] - cache[c]
        total = term if total is None else total + term
    return total


def pair_logprobs(policy, reference, pair):
    lp = policy.log_probs()
    lr = reference.log_probs()
    return PairLogProbs(
        logp_w_pol=min(sequence_logprob(policy, pair.prompt, pair.chosen, lp), 0.0),
        logp_l_pol=min(sequence_logprob(policy, pair.prompt, pair.rejected, lp), 0.0),
        logp_w_ref=min(sequence_logprob(reference, pair.prompt, pair.chosen, lr), 0.0),
        logp_l_ref=min(sequence_logprob(reference, pair.prompt, pair.rejected, lr), 0.0),
        len_w=len(pair.chosen),
        len_l=len(pair.rejected),
    )


def kl_margin(policy, reference, pair, beta):
    """Fixed-beta log-ratio margin, beta * [(log P_w - log R_w) - (log P_l - log R_l)]."""
    lp = pair_logprobs(policy, reference, pair)
    return beta * (lp.log_x_w - lp.log_x_l)
