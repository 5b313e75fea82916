"""Synthetic preference data with a planted rule, plus the JSONL file format.

File layout: the first line is a header object
``{"format": "adadpo-preferences", "version": 1, "vocab_size": V, "split": "train"}``
and every following line is one pair ``{"prompt": [...], "chosen": [...], "rejected": [...]}``.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .rng import SplitMix64

FORMAT_NAME = "adadpo-preferences"
FORMAT_VERSION = 1
SPLITS = ("train", "eval")


class DatasetFormatError(ValueError):
    """Malformed or invalid dataset file; the message names the offending line."""


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple
    chosen: tuple
    rejected: tuple

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "chosen", tuple(int(t) for t in self.chosen))
        object.__setattr__(self, "rejected", tuple(int(t) for t in self.rejected))
        if not self.chosen or not self.rejected:
            raise ValueError("chosen and rejected responses must be non-empty")
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected responses must differ")

    def check_vocab(self, vocab_size):
        for name in ("prompt", "chosen", "rejected"):
            for t in getattr(self, name):
                if not 0 <= t < vocab_size:
                    raise ValueError(f"{name} token {t} outside vocabulary of size {vocab_size}")


@dataclass
class Dataset:
    vocab_size: int
    pairs: list = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        for p in self.pairs:
            p.check_vocab(self.vocab_size)

    def __len__(self):
        return len(self.pairs)


def _response(rng, vocab_size, lo, hi):
    n = rng.randint(lo, hi)
    return tuple(rng.randbelow(vocab_size) for _ in range(n))


def generate(seed, n_pairs, vocab_size, len_range, good_token, prompt_len=1, split="train"):
    """Pairs whose chosen response holds more copies of ``good_token``.

    Both responses are drawn independently (length uniform in ``len_range``,
    tokens uniform over the vocabulary). If the good-token counts tie, the
    second response is redrawn until they differ.
    """
    lo, hi = len_range
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range {len_range!r}")
    if not 0 <= good_token < vocab_size:
        raise ValueError(f"good_token {good_token} outside vocabulary of size {vocab_size}")
    if n_pairs < 0 or prompt_len < 0:
        raise ValueError("n_pairs and prompt_len must be >= 0")

    rng = SplitMix64(seed)
    pairs = []
    for _ in range(n_pairs):
        prompt = tuple(rng.randbelow(vocab_size) for _ in range(prompt_len))
        a = _response(rng, vocab_size, lo, hi)
        b = _response(rng, vocab_size, lo, hi)
        for _ in range(100_000):
            if a.count(good_token) != b.count(good_token):
                break
            b = _response(rng, vocab_size, lo, hi)
        else:
            raise RuntimeError("could not draw a non-tied pair")
        if a.count(good_token) > b.count(good_token):
            pairs.append(PreferencePair(prompt, a, b))
        else:
            pairs.append(PreferencePair(prompt, b, a))
    return Dataset(vocab_size, pairs, split)


def dumps(ds):
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "vocab_size": ds.vocab_size, "split": ds.split}
    lines = [json.dumps(header)]
    for p in ds.pairs:
        lines.append(json.dumps({"prompt": list(p.prompt), "chosen": list(p.chosen), "rejected": list(p.rejected)}))
    return "\n".join(lines) + "\n"


def save(ds, path):
    Path(path).write_text(dumps(ds), encoding="utf-8")


def _tokens(obj, key, lineno):
    v = obj.get(key)
    if not isinstance(v, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in v):
        raise DatasetFormatError(f"line {lineno}: field {key!r} must be a list of integers")
    return v


def loads(text, source="<string>"):
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError(f"{source}: line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{source}: line 1: invalid JSON ({e.msg})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{source}: line 1: not a {FORMAT_NAME} header")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{source}: line 1: unsupported version {header.get('version')!r}")
    vocab_size = header.get("vocab_size")
    if not isinstance(vocab_size, int) or vocab_size < 1:
        raise DatasetFormatError(f"{source}: line 1: vocab_size must be a positive integer")
    split = header.get("split")
    if split not in SPLITS:
        raise DatasetFormatError(f"{source}: line 1: split must be one of {SPLITS}")

    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"{source}: line {lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(obj, dict):
            raise DatasetFormatError(f"{source}: line {lineno}: expected an object")
        extra = set(obj) - {"prompt", "chosen", "rejected"}
        if extra:
            raise DatasetFormatError(f"{source}: line {lineno}: unexpected fields {sorted(extra)}")
        try:
            pair = PreferencePair(
                _tokens(obj, "prompt", lineno), _tokens(obj, "chosen", lineno), _tokens(obj, "rejected", lineno)
            )
            pair.check_vocab(vocab_size)
        except DatasetFormatError:
            raise
        except ValueError as e:
            raise DatasetFormatError(f"{source}: line {lineno}: {e}") from None
        pairs.append(pair)
    return Dataset(vocab_size, pairs, split)


def load(path):
    path = Path(path)
    return loads(path.read_text(encoding="utf-8"), source=str(path))
