"""The composed model: a coupling flow with one exchangeable process per latent dimension."""

import numpy as np
from scipy.special import expit

from .flow import FlowStack, PreprocessConfig, flow_backward, flow_forward, flow_inverse
from .process import (
    Mode,
    PredictiveState,
    ProcessParams,
    batched_prior_state,
    final_state,
    mvt_log_pdf_oracle,
    predictive_moments,
    recurrence_backward,
    run_recurrence,
    sample_predictive,
)

V_FLOOR = 1e-6
NU_FLOOR = 1e-6
# cap on rho / v so that rho < v survives rounding for huge raw values
RHO_FRAC_MAX = 1.0 - 1e-9
PROCESS_KEYS = ("process.nu", "process.v", "process.rho")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


class BrunoModel:
    """Flow ``x -> z`` plus ``D`` independent exchangeable processes on ``z``.

    Process parameters are stored unconstrained and decoded as
    ``nu = 2 + NU_FLOOR + softplus(r_nu)``, ``v = softplus(r_v) + V_FLOOR`` and
    ``rho = v * min(sigmoid(r_rho), RHO_FRAC_MAX)``, so any raw values give
    ``nu > 2`` and ``0 <= rho < v`` even after rounding. The process mean is fixed at zero.
    """

    def __init__(
        self,
        dim,
        depth=6,
        hidden=128,
        mode=Mode.STUDENT_T,
        preprocess=None,
        weightnorm=True,
        seed=0,
        nu=1000.0,
        v=1.0,
        rho=0.1,
    ):
        self.dim = dim
        self.mode = Mode(mode)
        self.flow = FlowStack(
            dim,
            depth=depth,
            hidden=hidden,
            preprocess=preprocess if preprocess is not None else PreprocessConfig(),
            weightnorm=weightnorm,
            rng=np.random.default_rng(seed),
        )
        self.raw = {"nu": np.zeros(dim), "v": np.zeros(dim), "rho": np.zeros(dim)}
        self.set_process_params(nu=nu, v=v, rho=rho)

    @property
    def depth(self):
        return self.flow.depth

    @property
    def hidden(self):
        return self.flow.hidden

    def set_process_params(self, nu=None, v=None, rho=None):
        """Set decoded parameters.

        ``rho`` may be exactly 0 (stored as ``-inf``). Changing ``v`` alone
        keeps the ratio ``rho / v``.
        """
        if nu is not None:
            nu = np.broadcast_to(np.asarray(nu, dtype=float), (self.dim,))
            if np.any(nu <= 2.0 + NU_FLOOR):
                raise ValueError("nu must exceed 2")
            self.raw["nu"][...] = softplus_inverse(nu - 2.0 - NU_FLOOR)
        if v is not None:
            v = np.broadcast_to(np.asarray(v, dtype=float), (self.dim,))
            if np.any(v <= V_FLOOR):
                raise ValueError(f"v must exceed {V_FLOOR}")
            self.raw["v"][...] = softplus_inverse(v - V_FLOOR)
        if rho is not None:
            cur_v = self.process_params().v
            frac = np.broadcast_to(np.asarray(rho, dtype=float), (self.dim,)) / cur_v
            if np.any(frac < 0) or np.any(frac > RHO_FRAC_MAX):
                raise ValueError("rho must satisfy 0 <= rho < v")
            with np.errstate(divide="ignore"):
                self.raw["rho"][...] = np.log(frac) - np.log1p(-frac)

    def process_params(self):
        nu = 2.0 + NU_FLOOR + softplus(self.raw["nu"])
        v = softplus(self.raw["v"]) + V_FLOOR
        rho = v * np.minimum(expit(self.raw["rho"]), RHO_FRAC_MAX)
        return ProcessParams(nu=nu, mu=np.zeros(self.dim), v=v, rho=rho, mode=self.mode)

    def parameters(self):
        """All trainable arrays by name (live views)."""
        params = dict(self.flow.parameters())
        params.update({f"process.{k}": a for k, a in self.raw.items()})
        return params

    def hyperparameters(self):
        pre = self.flow.preprocess
        return {
            "dim": self.dim,
            "depth": self.flow.depth,
            "hidden": self.flow.hidden,
            "mode": self.mode.value,
            "weightnorm": self.flow.weightnorm,
            "alpha": pre.alpha,
            "num_levels": pre.num_levels,
            "dequantize": pre.dequantize,
            "preprocess": pre.kind,
        }

    @classmethod
    def from_hyperparameters(cls, hp):
        pre = PreprocessConfig(
            alpha=hp["alpha"], num_levels=hp["num_levels"], dequantize=hp["dequantize"], kind=hp["preprocess"]
        )
        return cls(
            hp["dim"],
            depth=hp["depth"],
            hidden=hp["hidden"],
            mode=hp["mode"],
            preprocess=pre,
            weightnorm=hp["weightnorm"],
        )

    def prepare(self, items, rng=None):
        """Turn raw dataset items into flow inputs.

        Integer pixels are dequantised with ``rng`` (or mapped to bin centres
        when ``rng`` is None or dequantisation is off) and scaled to [0, 1).
        Real-valued items pass through unchanged.
        """
        items = np.asarray(items)
        pre = self.flow.preprocess
        if not np.issubdtype(items.dtype, np.integer):
            return items.astype(float)
        if pre.dequantize and rng is not None:
            return (items + rng.random(items.shape)) / pre.num_levels
        return (items + 0.5) / pre.num_levels


def _as_batch(x_seq, dim):
    x = np.asarray(x_seq, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != dim:
        raise ValueError(f"expected (N, {dim}) or (B, N, {dim}), got {np.shape(x_seq)}")
    return x, single


class SequenceCache:
    def __init__(self, x, z, states, flow_cache, params):
        self.x, self.z, self.states, self.flow_cache, self.params = x, z, states, flow_cache, params


def sequence_log_likelihood(model, x_seq, keep=False):
    """Per-step ``log p(x_{n+1} | x_{1:n})`` and their sum.

    ``x_seq`` is ``(N, D)`` or a batch ``(B, N, D)`` of preprocessed
    observations. Returns ``(per_step, total)`` with shapes ``(N,)``/scalar or
    ``(B, N)``/``(B,)``; with ``keep=True`` a cache for
    :func:`sequence_backward` is appended.
    """
    x, single = _as_batch(x_seq, model.dim)
    batch, length, dim = x.shape
    flat = x.reshape(batch * length, dim)
    if keep:
        z, logdet, fcache = flow_forward(model.flow, flat, keep=True)
    else:
        z, logdet = flow_forward(model.flow, flat)
    z = z.reshape(batch, length, dim)
    params = model.process_params()
    logp, states = run_recurrence(params, z)
    per_step = logp.sum(axis=2) + logdet.reshape(batch, length)
    total = per_step.sum(axis=1)
    if single:
        per_step, total = per_step[0], float(total[0])
    if keep:
        return per_step, total, SequenceCache(x, z, states, fcache, params)
    return per_step, total


def sequence_backward(model, cache, step_grads):
    """Gradients of ``sum(step_grads * per_step)`` for every model parameter.

    ``step_grads`` has the shape of ``per_step``. Gradients flow through the
    process recurrence into the latents and the process parameters, and from
    the latents and the log-determinant into the flow.
    """
    batch, length, dim = cache.z.shape
    w = np.asarray(step_grads, dtype=float).reshape(batch, length)
    params = cache.params
    grad_logp = np.broadcast_to(w[:, :, None], (batch, length, dim))
    gz, gnu, gv, grho = recurrence_backward(params, cache.states, cache.z, grad_logp)
    grads = flow_backward(model.flow, cache.flow_cache, gz.reshape(batch * length, dim), w.reshape(-1))

    raw = model.raw
    sig_rho = np.minimum(expit(raw["rho"]), RHO_FRAC_MAX)
    live = expit(raw["rho"]) < RHO_FRAC_MAX
    if model.mode is Mode.GAUSSIAN:
        gnu = np.zeros(dim)
    grads["process.nu"] = gnu * expit(raw["nu"])
    grads["process.v"] = (gv + grho * sig_rho) * expit(raw["v"])
    grads["process.rho"] = np.where(live, grho * params.v * sig_rho * (1.0 - sig_rho), 0.0)
    return grads


def joint_log_likelihood_naive(model, x_seq):
    """Joint log-likelihood from the closed-form joint density of each latent dimension."""
    x = np.asarray(x_seq, dtype=float)
    z, logdet = flow_forward(model.flow, x)
    p = model.process_params()
    total = float(logdet.sum())
    for d in range(model.dim):
        pd = ProcessParams(nu=float(p.nu[d]), mu=0.0, v=float(p.v[d]), rho=float(p.rho[d]), mode=p.mode)
        total += mvt_log_pdf_oracle(pd, z[:, d])
    return total


def condition(model, x_obs):
    """Process state (batch of one) after observing the rows of ``x_obs``."""
    params = model.process_params()
    x_obs = np.asarray(x_obs, dtype=float).reshape(-1, model.dim)
    if x_obs.shape[0] == 0:
        return params, batched_prior_state(params, 1, model.dim)
    z, _ = flow_forward(model.flow, x_obs)
    return params, final_state(params, z[None])


def conditional_moments(model, x_obs):
    """Per-dimension latent predictive moments given ``x_obs``."""
    params, state = condition(model, x_obs)
    mom = predictive_moments(params, state)
    return type(mom)(dof=mom.dof, mean=mom.mean[0], variance=np.broadcast_to(mom.variance, (1, model.dim))[0])


def sample_conditional(model, x_obs, count, rng, return_latent=False):
    """Draw ``count`` samples from ``p(x | x_obs)``; ``x_obs`` may be empty."""
    params, state = condition(model, x_obs)
    state = PredictiveState(
        n=state.n, mu_n=state.mu_n[0], v_n=state.v_n, beta_n=state.beta_n[0], s_n=state.s_n[0]
    )
    z = sample_predictive(params, state, rng, size=(count, model.dim))
    x = flow_inverse(model.flow, z)
    if return_latent:
        return x, z
    return x
