"""JSON experiment configs (schema version 1). Unknown keys are errors."""

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import data
from .losses import METHODS, LossSpec
from .policy import TabularPolicy
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenerateParams:
    seed: int = 0
    n_pairs: int = 512
    n_eval: int = 128
    vocab_size: int = 8
    len_range: tuple = (2, 6)
    good_token: int = 0
    prompt_len: int = 1

    def build(self):
        """(train, eval) datasets; eval pairs are the tail of one generated stream."""
        ds = data.generate(
            self.seed, self.n_pairs + self.n_eval, self.vocab_size, tuple(self.len_range), self.good_token, self.prompt_len
        )
        train = data.Dataset(self.vocab_size, ds.pairs[: self.n_pairs], "train")
        if self.n_eval == 0:
            return train, None
        return train, data.Dataset(self.vocab_size, ds.pairs[self.n_pairs :], "eval")


@dataclass(frozen=True)
class DatasetSource:
    generate: GenerateParams = None
    train_path: Path = None
    eval_path: Path = None

    def load(self):
        if self.generate is not None:
            return self.generate.build()
        for p in (self.train_path, self.eval_path):
            if p is not None and not p.is_file():
                raise ConfigError(f"dataset file not found: {p}")
        try:
            train = data.load(self.train_path)
            ev = data.load(self.eval_path) if self.eval_path is not None else None
        except data.DatasetFormatError as e:
            raise ConfigError(str(e)) from None
        if ev is not None and ev.vocab_size != train.vocab_size:
            raise ConfigError("train and eval datasets have different vocab sizes")
        return train, ev


@dataclass(frozen=True)
class PolicyParams:
    context_order: int = 1
    reference: Path = None

    def reference_policy(self, vocab_size):
        if self.reference is None:
            return TabularPolicy(vocab_size, self.context_order)
        if not self.reference.is_file():
            raise ConfigError(f"reference checkpoint not found: {self.reference}")
        ref = TabularPolicy.load(self.reference)
        if ref.vocab_size != vocab_size or ref.context_order != self.context_order:
            raise ConfigError("reference checkpoint does not match vocab_size/context_order")
        return ref


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSource
    policy: PolicyParams
    loss: LossSpec
    train: TrainConfig


@dataclass(frozen=True)
class SweepConfig:
    dataset: DatasetSource
    policy: PolicyParams
    loss: dict
    train: dict
    lrs: list
    betas: list
    methods: list
    seed: int = 0


def _check_keys(d, allowed, where, required=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise ConfigError(f"missing keys in {where}: {', '.join(missing)}")


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def _dataset(d, base):
    _check_keys(d, ("generate", "train", "eval"), "dataset")
    if "generate" in d:
        if "train" in d or "eval" in d:
            raise ConfigError("dataset: give either 'generate' or file paths, not both")
        g = d["generate"]
        _check_keys(g, [f.name for f in fields(GenerateParams)], "dataset.generate")
        g = dict(g)
        if "len_range" in g:
            g["len_range"] = tuple(g["len_range"])
        try:
            params = GenerateParams(**g)
        except TypeError as e:
            raise ConfigError(f"dataset.generate: {e}") from None
        return DatasetSource(generate=params)
    if "train" not in d:
        raise ConfigError("dataset needs 'generate' or 'train'")
    ev = _resolve(base, d["eval"]) if "eval" in d else None
    return DatasetSource(train_path=_resolve(base, d["train"]), eval_path=ev)


def _policy(d, base):
    _check_keys(d, ("context_order", "reference"), "policy")
    ref = _resolve(base, d["reference"]) if "reference" in d else None
    return PolicyParams(d.get("context_order", 1), ref)


def _header(raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if raw.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: 'version' must be {SCHEMA_VERSION}")


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def parse_experiment(raw, base=Path(".")):
    _header(raw, "config")
    _check_keys(raw, ("version", "dataset", "policy", "loss", "train"), "config", required=("dataset", "loss"))
    try:
        return ExperimentConfig(
            dataset=_dataset(raw["dataset"], base),
            policy=_policy(raw.get("policy", {}), base),
            loss=LossSpec.from_dict(raw["loss"]),
            train=TrainConfig.from_dict(raw.get("train", {})),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_experiment(path):
    path = Path(path)
    return parse_experiment(read_json(path), path.parent)


def parse_sweep(raw, base=Path(".")):
    _header(raw, "config")
    _check_keys(
        raw,
        ("version", "dataset", "policy", "loss", "train", "lrs", "betas", "methods", "seed"),
        "config",
        required=("dataset", "lrs", "betas", "methods"),
    )
    for key in ("lrs", "betas", "methods"):
        if not isinstance(raw[key], list) or not raw[key]:
            raise ConfigError(f"'{key}' must be a non-empty list")
    for m in raw["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    loss = dict(raw.get("loss", {}))
    train = dict(raw.get("train", {}))
    if "method" in loss or "beta" in loss:
        raise ConfigError("sweep 'loss' must not set method or beta; use 'methods' and 'betas'")
    if "lr" in train or "seed" in train:
        raise ConfigError("sweep 'train' must not set lr or seed; use 'lrs' and top-level 'seed'")
    try:
        # validate once with the first grid point so typos fail before any cell runs
        LossSpec.from_dict({**loss, "method": raw["methods"][0], "beta": raw["betas"][0]})
        TrainConfig.from_dict({**train, "lr": raw["lrs"][0]})
        return SweepConfig(
            dataset=_dataset(raw["dataset"], base),
            policy=_policy(raw.get("policy", {}), base),
            loss=loss,
            train=train,
            lrs=list(raw["lrs"]),
            betas=list(raw["betas"]),
            methods=list(raw["methods"]),
            seed=raw.get("seed", 0),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_sweep(path):
    path = Path(path)
    return parse_sweep(read_json(path), path.parent)
