"""Tasks built on conditional densities: few-shot learning, anomaly scores, latent analysis."""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .data import check_class_sizes
from .errors import Diverged, InsufficientData
from .flow import flow_forward
from .model import BrunoModel, PROCESS_KEYS, sequence_backward, sequence_log_likelihood
from .process import Mode, run_recurrence
from .train import RMSProp, Trainer


# --------------------------------------------------------------------------
# few-shot classification

@dataclass
class Episode:
    """``support[i]`` holds ``n`` items of candidate class ``i``; ``query`` belongs to class ``target``."""

    support: np.ndarray
    query: np.ndarray
    target: int
    classes: tuple = ()

    def __post_init__(self):
        self.support = np.asarray(self.support)
        self.query = np.asarray(self.query)
        if self.support.ndim != 3:
            raise ValueError("support must have shape (k, n, D)")
        if self.query.shape != self.support.shape[2:]:
            raise ValueError("query dimension does not match the support items")
        if not 0 <= self.target < self.support.shape[0]:
            raise ValueError("target is not a valid class index")

    @property
    def k(self):
        return self.support.shape[0]

    @property
    def n(self):
        return self.support.shape[1]


def episode_rng(seed, index):
    """Independent stream per episode, so results do not depend on evaluation order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def sample_episode(dataset, n, k, rng):
    """Draw an ``n``-shot ``k``-way episode with the target at a random position.

    The ``k - 1`` decoy classes are distinct from each other and from the
    target class.
    """
    classes = np.array(sorted(dataset.class_index))
    if k > classes.size:
        raise InsufficientData(f"{k}-way episodes need {k} classes, dataset has {classes.size}")
    chosen = classes[rng.choice(classes.size, size=k, replace=False)]
    target = int(rng.integers(k))
    support = []
    for i, c in enumerate(chosen):
        pool = dataset.class_index[int(c)]
        need = n + 1 if i == target else n
        if pool.size < need:
            raise InsufficientData(f"class {c} has {pool.size} items, {need} needed")
        picked = pool[rng.choice(pool.size, size=need, replace=False)]
        if i == target:
            query = dataset.items[picked[-1]]
            picked = picked[:-1]
        support.append(dataset.items[picked])
    return Episode(np.stack(support), query, target, tuple(int(c) for c in chosen))


def prepare_episode(model, episode, rng=None):
    """Map raw episode items into flow inputs (dequantisation noise drawn from ``rng``)."""
    return replace(episode, support=model.prepare(episode.support, rng), query=model.prepare(episode.query, rng))


def _episode_sequences(episode):
    k, n, dim = episode.support.shape
    query = np.broadcast_to(episode.query, (k, 1, dim))
    return np.concatenate([episode.support, query], axis=1)


def class_log_densities(model, episode):
    """``log p(query | support_i)`` for every candidate class of a prepared episode."""
    per_step, _ = sequence_log_likelihood(model, _episode_sequences(episode))
    return per_step[:, -1]


def few_shot_classify(model, episode):
    """Index of the class under which the query is most likely (ties -> lowest index)."""
    return int(np.argmax(class_log_densities(model, episode)))


def few_shot_eval(model, dataset, n, k, episodes, seed, return_hits=False):
    """Mean accuracy over ``episodes`` sampled episodes."""
    check_class_sizes(dataset, n + 1)
    hits = np.zeros(episodes, dtype=bool)
    for i in range(episodes):
        rng = episode_rng(seed, i)
        ep = prepare_episode(model, sample_episode(dataset, n, k, rng), rng)
        hits[i] = few_shot_classify(model, ep) == ep.target
    acc = float(hits.mean()) if episodes else float("nan")
    return (acc, hits) if return_hits else acc


def accuracy_ci(accuracy, episodes, level=0.95):
    """Half-width of the normal-approximation binomial confidence interval."""
    z = stats.norm.ppf(0.5 + level / 2)
    return float(z * math.sqrt(max(accuracy * (1 - accuracy), 0.0) / episodes))


def chance_interval(k, episodes, level=0.99):
    """Central binomial interval of accuracies a chance-level classifier produces."""
    lo, hi = stats.binom.interval(level, episodes, 1.0 / k)
    return lo / episodes, hi / episodes


# --------------------------------------------------------------------------
# discriminative fine-tuning

def episode_cross_entropy(scores, target):
    """Softmax cross-entropy; equal scores give exactly ``log k``."""
    shifted = np.asarray(scores, dtype=float) - np.max(scores)
    return float(np.log(np.sum(np.exp(shifted))) - shifted[target])


def episode_loss_and_grads(model, episodes):
    """Mean cross-entropy over prepared episodes and its parameter gradients."""
    seqs = np.concatenate([_episode_sequences(ep) for ep in episodes])
    per_step, _, cache = sequence_log_likelihood(model, seqs, keep=True)
    k = episodes[0].k
    step_grads = np.zeros_like(per_step)
    loss = 0.0
    for j, ep in enumerate(episodes):
        scores = per_step[j * k:(j + 1) * k, -1]
        loss += episode_cross_entropy(scores, ep.target)
        probs = np.exp(scores - scores.max())
        probs /= probs.sum()
        probs[ep.target] -= 1.0
        step_grads[j * k:(j + 1) * k, -1] = probs / len(episodes)
    return loss / len(episodes), sequence_backward(model, cache, step_grads)


@dataclass
class FinetuneConfig:
    iterations: int = 500
    episodes_per_step: int = 8
    learning_rate: float = 1e-4
    process_lr_factor: float = 1.0
    seed: int = 0
    decay: float = 0.9
    eps: float = 1e-8


def discriminative_finetune(model, dataset, n, k, config, callback=None):
    """Fine-tune on fixed ``n``-shot ``k``-way episodes; returns ``(model, loss_trace)``."""
    check_class_sizes(dataset, n + 1)
    rng = np.random.default_rng(config.seed)
    opt = RMSProp(config.decay, config.eps)
    trace = []
    for it in range(config.iterations):
        batch = [prepare_episode(model, sample_episode(dataset, n, k, rng), rng) for _ in range(config.episodes_per_step)]
        loss, grads = episode_loss_and_grads(model, batch)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise Diverged(f"non-finite fine-tuning loss at iteration {it}", trace + [loss])
        if model.mode is Mode.GAUSSIAN:
            grads.pop("process.nu")
        lrs = {
            name: config.learning_rate * (config.process_lr_factor if name in PROCESS_KEYS else 1.0)
            for name in grads
        }
        opt.step(model.parameters(), grads, lrs)
        trace.append(loss)
        if callback is not None:
            callback(it + 1, loss)
    return model, np.array(trace)


# --------------------------------------------------------------------------
# anomaly scores

@dataclass
class ScoreTrace:
    scores: np.ndarray
    threshold: float = None
    flags: np.ndarray = field(default=None)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.threshold is not None:
            self.flags = self.scores < self.threshold
        else:
            self.flags = np.zeros(self.scores.shape, dtype=bool)

    def __len__(self):
        return self.scores.size

    def ranks(self):
        """Rank of each item, 0 for the lowest (most anomalous) score."""
        return np.argsort(np.argsort(self.scores, kind="stable"), kind="stable")


def anomaly_score(model, stream, threshold=None):
    """``log p(x_n | x_{<n}) - log p(x_n)`` for each item of a prepared stream.

    Both densities share the flow Jacobian, so the ratio is evaluated in
    latent space only.
    """
    stream = np.asarray(stream, dtype=float).reshape(-1, model.dim)
    z, _ = flow_forward(model.flow, stream)
    params = model.process_params()
    conditional, _ = run_recurrence(params, z[None])
    prior, _ = run_recurrence(params, z[:, None, :])
    return ScoreTrace((conditional[0] - prior[:, 0]).sum(axis=1), threshold)


def anomaly_score_xspace(model, stream):
    """The same ratio computed from full observation-space densities (for checking)."""
    stream = np.asarray(stream, dtype=float).reshape(-1, model.dim)
    conditional, _ = sequence_log_likelihood(model, stream)
    marginal, _ = sequence_log_likelihood(model, stream[:, None, :])
    return conditional - marginal[:, 0]


# --------------------------------------------------------------------------
# latent analysis

DEFAULT_EPS_GRID = (1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.2, 0.5, 0.9)


@dataclass
class LatentTable:
    correlation: np.ndarray
    nu: np.ndarray
    v: np.ndarray
    eps_grid: tuple
    counts: np.ndarray

    def rows(self):
        return [(d, self.correlation[d], self.nu[d], self.v[d]) for d in range(self.correlation.size)]


def latent_analysis(model, eps_grid=DEFAULT_EPS_GRID):
    """Per-dimension ``rho/v``, ``nu`` and ``v``, plus how many dimensions exceed each ``eps``."""
    p = model.process_params()
    corr = p.rho / p.v
    counts = np.array([int(np.sum(corr > e)) for e in eps_grid])
    return LatentTable(corr, np.asarray(p.nu, dtype=float), p.v, tuple(eps_grid), counts)


def write_latent_csv(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", "rho_over_v", "nu", "v"])
        for d, c, nu, v in table.rows():
            w.writerow([d, repr(float(c)), repr(float(nu)), repr(float(v))])


# --------------------------------------------------------------------------
# Student-t vs Gaussian training comparison

STABILITY_SETTINGS = {
    # no weight norm, per-dimension initial correlations from U(0.1, 0.95)
    "no_weightnorm": dict(weightnorm=False, rho_range=(0.1, 0.95), lr_scale=1.0),
    # weight norm, correlations 0.1, twice the default learning rate
    "high_lr": dict(weightnorm=True, rho_range=(0.1, 0.1), lr_scale=2.0),
    # weight norm, correlations 0.95
    "high_rho": dict(weightnorm=True, rho_range=(0.95, 0.95), lr_scale=1.0),
    # weight norm, correlations 0.1, default learning rate
    "default": dict(weightnorm=True, rho_range=(0.1, 0.1), lr_scale=1.0),
}


def stability_run(dataset, setting, config, depth=2, hidden=32, preprocess=None, seed=0):
    """Train a Student-t and a Gaussian model from identical starts.

    Returns ``{"student_t": (trace, diverged), "gaussian": (trace, diverged)}``;
    a divergence ends that trace rather than raising.
    """
    opts = STABILITY_SETTINGS[setting]
    lo, hi = opts["rho_range"]
    rho = np.random.default_rng(seed).uniform(lo, hi, size=dataset.dim)
    cfg = replace(config, learning_rate=config.learning_rate * opts["lr_scale"])
    out = {}
    for mode in (Mode.STUDENT_T, Mode.GAUSSIAN):
        model = BrunoModel(
            dataset.dim, depth=depth, hidden=hidden, mode=mode, preprocess=preprocess,
            weightnorm=opts["weightnorm"], seed=seed, rho=rho,
        )
        trainer = Trainer(model, dataset, cfg)
        try:
            trainer.run()
            out[mode.value] = (np.array(trainer.trace), False)
        except Diverged as err:
            out[mode.value] = (np.array(err.trace), True)
    return out


def write_trace_csv(path, trace, diverged=False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(trace, start=1):
            w.writerow([i, repr(float(loss))])
        if diverged:
            w.writerow(["diverged", ""])


def write_stability_csvs(results, out_dir, setting):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for mode, (trace, diverged) in results.items():
        path = out_dir / f"{setting}_{mode}.csv"
        write_trace_csv(path, trace, diverged)
        paths[mode] = path
    return paths
