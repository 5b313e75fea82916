"""Self-adaptive pairwise preference losses with exact stop-gradient coefficients."""

from .autodiff import Tape, backward, stop_gradient
from .data import Dataset, PreferencePair, generate
from .gradcheck import balance_report, grads_wrt_probs, random_balance_sweep
from .losses import LossSpec, PairLogProbs, adaptive_coefficient, implicit_rewards, loss
from .policy import TabularPolicy, pair_logprobs, sequence_logprob
from .trainer import StepMetrics, TrainConfig, evaluate, train

__version__ = "0.1.0"
