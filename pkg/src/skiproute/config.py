"""Experiment files: one INI holding model, task, training, and sampler knobs.

Flat key = value pairs grouped into sections. Unknown sections or keys are
rejected outright so a typo cannot silently fall back to a default; absent
sections simply keep every default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .data import TaskSpec
from .errors import ConfigError
from .model import ModelConfig, SamplerConfig
from .training import TrainConfig


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    lora_alpha: float = 32.0
    dropout: float = 0.1

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"adapter rank must be positive, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    task: TaskSpec
    train: TrainConfig
    sampler: SamplerConfig
    lora: LoraConfig


_SCHEMA = {
    "model": (ModelConfig, {
        "n_layers": int, "d_model": int, "n_heads": int, "d_ff": int,
        "vocab_size": int, "max_seq": int}),
    "task": (TaskSpec, {
        "kind": str, "min_len": int, "max_len": int, "n_train": int,
        "n_val": int, "n_test": int, "seed": int}),
    "train": (TrainConfig, {
        "lam": float, "alpha": float, "lr_min": float, "lr_max": float,
        "schedule": str, "accum_steps": int, "patience": int,
        "max_epochs": int, "batch_size": int, "max_seq": int,
        "eval_every": int, "seed": int, "phase2_divisor": float}),
    "sampler": (SamplerConfig, {
        "mode": str, "top_k": int, "temperature": float}),
    "lora": (LoraConfig, {
        "rank": int, "lora_alpha": float, "dropout": float}),
}

DEFAULT_CONFIG = """\
[model]
n_layers = 12
d_model = 64
n_heads = 4
d_ff = 256
vocab_size = 260
max_seq = 256

[task]
kind = copy
min_len = 3
max_len = 8
n_train = 256
n_val = 64
n_test = 64
seed = 0

[train]
lam = 0.01
alpha = 0.0
lr_min = 1e-4
lr_max = 3e-4
schedule = cosine
accum_steps = 5
patience = 4
max_epochs = 50
batch_size = 16
max_seq = 256
eval_every = 50
seed = 0
phase2_divisor = 3.0

[sampler]
mode = greedy
top_k = 10
temperature = 0.8

[lora]
rank = 8
lora_alpha = 32.0
dropout = 0.1
"""


def parse_experiment(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed experiment file: {e}")

    built = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
    for section, (cls, casts) in _SCHEMA.items():
        kwargs = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in casts:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                try:
                    kwargs[key] = casts[key](raw)
                except ValueError:
                    raise ConfigError(
                        f"[{section}] {key} = {raw!r} is not a valid "
                        f"{casts[key].__name__}")
        try:
            built[section] = cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"[{section}] is incomplete: {e}")
    return ExperimentConfig(model=built["model"], task=built["task"],
                            train=built["train"], sampler=built["sampler"],
                            lora=built["lora"])


def load_experiment(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_experiment(fh.read())


def write_default_config(path: str) -> None:
    with open(path, "w") as fh:
        fh.write(DEFAULT_CONFIG)
