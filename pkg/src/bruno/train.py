"""Generative training: RMSProp on the per-step predictive log-likelihood."""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import check_class_sizes, sample_sequence
from .errors import Diverged, NonFinite
from .flow import weightnorm_init
from .model import PROCESS_KEYS, sequence_backward, sequence_log_likelihood


@dataclass
class TrainConfig:
    batch_size: int = 32
    seq_len: int = 20
    learning_rate: float = 1e-3
    process_lr_factor: float = 0.1
    iterations: int = 1000
    seed: int = 0
    decay: float = 0.9
    eps: float = 1e-8
    # learning rate is halved every ``halve_every`` steps; 0 means ceil(iterations / 3)
    halve_every: int = 0
    train_nu: bool = True
    data_init: bool = False

    def __post_init__(self):
        if self.seq_len < 2:
            raise ValueError("seq_len must be at least 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")

    @property
    def halving_period(self):
        if self.halve_every > 0:
            return self.halve_every
        return max(1, math.ceil(self.iterations / 3))

    def lr_at(self, iteration):
        return self.learning_rate * 0.5 ** (iteration // self.halving_period)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


class RMSProp:
    """RMSProp with one squared-gradient accumulator per parameter array."""

    def __init__(self, decay=0.9, eps=1e-8):
        self.decay = decay
        self.eps = eps
        self.mean_square = {}

    def step(self, params, grads, lrs):
        """Descend ``grads`` in place; ``lrs`` maps each name to its learning rate."""
        for name in sorted(grads):
            g = grads[name]
            ms = self.mean_square.get(name)
            if ms is None:
                ms = self.mean_square[name] = np.zeros_like(g)
            ms *= self.decay
            ms += (1.0 - self.decay) * g * g
            params[name] -= lrs[name] * g / (np.sqrt(ms) + self.eps)


def batch_loss_and_grads(model, x_batch, with_grads=True):
    """Mean negative log-likelihood per step and dimension, and its gradients."""
    batch, length, dim = x_batch.shape
    scale = 1.0 / (batch * length * dim)
    if not with_grads:
        _, total = sequence_log_likelihood(model, x_batch)
        return -float(total.sum()) * scale, None
    _, total, cache = sequence_log_likelihood(model, x_batch, keep=True)
    loss = -float(total.sum()) * scale
    grads = sequence_backward(model, cache, np.full((batch, length), -scale))
    return loss, grads


class Trainer:
    """Holds everything needed to resume training: model, optimiser, RNG and step count."""

    def __init__(self, model, dataset, config, rng=None, optimizer=None, iteration=0):
        self.model = model
        self.dataset = dataset
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.optimizer = optimizer if optimizer is not None else RMSProp(config.decay, config.eps)
        self.iteration = iteration
        self.trace = []
        check_class_sizes(dataset, config.seq_len)

    def next_batch(self):
        idx = np.stack(
            [sample_sequence(self.dataset, self.config.seq_len, self.rng) for _ in range(self.config.batch_size)]
        )
        return self.model.prepare(self.dataset.items[idx], self.rng)

    def step(self):
        cfg = self.config
        x = self.next_batch()
        if self.iteration == 0 and cfg.data_init and self.model.flow.weightnorm:
            weightnorm_init(self.model.flow, x.reshape(-1, self.model.dim))
        try:
            loss, grads = batch_loss_and_grads(self.model, x)
        except NonFinite as err:
            raise Diverged(f"iteration {self.iteration}: {err}", self.trace + [float("nan")]) from err
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise Diverged(f"non-finite loss or gradient at iteration {self.iteration}", self.trace + [loss])
        if not cfg.train_nu:
            grads.pop("process.nu")
        lr = cfg.lr_at(self.iteration)
        lrs = {name: lr * cfg.process_lr_factor if name in PROCESS_KEYS else lr for name in grads}
        self.optimizer.step(self.model.parameters(), grads, lrs)
        self.iteration += 1
        self.trace.append(loss)
        return loss

    def run(self, iterations=None, callback=None):
        """Run until ``iterations`` total steps (default: the config's count)."""
        target = self.config.iterations if iterations is None else iterations
        while self.iteration < target:
            loss = self.step()
            if callback is not None:
                callback(self.iteration, loss)
        return self.trace


def train(model, dataset, config, callback=None):
    """Train ``model`` in place; returns ``(model, loss_trace)``."""
    trainer = Trainer(model, dataset, config)
    trace = trainer.run(callback=callback)
    return model, np.array(trace)
