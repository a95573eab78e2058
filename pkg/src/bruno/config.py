"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Values are typed by the matching :class:`ExperimentConfig` field.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from .flow import PreprocessConfig
from .model import BrunoModel
from .train import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class ExperimentConfig:
    # data: "synthetic" or "idx"
    data: str = "synthetic"
    images: str = ""
    labels: str = ""
    rotate: bool = False
    synth_rho: float = 0.5
    synth_dims: int = 4
    synth_classes: int = 200
    synth_per_class: int = 20
    synth_spacing: float = 0.0
    data_seed: int = 0
    # model
    depth: int = 6
    hidden: int = 128
    mode: str = "student_t"
    weightnorm: bool = True
    # "auto" picks logit for integer pixels and none for real-valued data
    preprocess: str = "auto"
    alpha: float = 1e-6
    init_nu: float = 1000.0
    init_v: float = 1.0
    init_rho: float = 0.1
    # training
    batch_size: int = 32
    seq_len: int = 20
    learning_rate: float = 1e-3
    process_lr_factor: float = 0.1
    iterations: int = 1000
    seed: int = 0
    decay: float = 0.9
    eps: float = 1e-8
    halve_every: int = 0
    train_nu: bool = True
    data_init: bool = False
    checkpoint_every: int = 0

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def build_model(self, dataset):
        kind = self.preprocess
        if kind == "auto":
            kind = "logit" if np.issubdtype(dataset.items.dtype, np.integer) else "none"
        return BrunoModel(
            dataset.dim,
            depth=self.depth,
            hidden=self.hidden,
            mode=self.mode,
            preprocess=PreprocessConfig(alpha=self.alpha, kind=kind),
            weightnorm=self.weightnorm,
            seed=self.seed,
            nu=self.init_nu,
            v=self.init_v,
            rho=self.init_rho,
        )


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def coerce(key, text):
    """Convert the string ``text`` to the type of config field ``key``."""
    if key not in FIELD_TYPES:
        raise KeyError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    if kind in (bool, "bool"):
        low = text.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text.strip()


def parse_config(text, base=None):
    """Parse config text, applying its settings on top of ``base`` (default: defaults)."""
    values = asdict(base) if base is not None else {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, value)
    return ExperimentConfig(**values)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config):
    return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(config).items())


def load_config(path, base=None):
    with open(path) as fh:
        return parse_config(fh.read(), base)


def apply_overrides(config, overrides):
    """Apply ``{key: string value}`` overrides (e.g. from ``--key value`` flags)."""
    values = asdict(config)
    for key, text in overrides.items():
        values[key] = coerce(key, text)
    return ExperimentConfig(**values)
