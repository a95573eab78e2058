"""Quick oracle-equivalence and gradient checks, run by ``bruno selftest``."""

import numpy as np

from .flow import FlowStack, PreprocessConfig, flow_forward, flow_inverse
from .model import BrunoModel, joint_log_likelihood_naive, sequence_backward, sequence_log_likelihood
from .process import (
    Mode,
    conditional_oracle,
    make_params,
    predictive_log_density,
    predictive_moments,
    prior_state,
    update_state,
)


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def check_recurrence(rng, cases=200):
    """Recurrent predictive moments against explicit covariance inversion."""
    worst = 0.0
    for _ in range(cases):
        v = rng.uniform(0.2, 3.0)
        p = make_params(rng.uniform(2.5, 50.0), rng.normal(), v, v * rng.uniform(0.0, 0.95))
        n = int(rng.integers(1, 33))
        z = p.mu + np.sqrt(v) * rng.standard_normal(n)
        state = prior_state(p)
        for zi in z:
            state = update_state(p, state, zi)
        got = predictive_moments(p, state)
        want = conditional_oracle(p, z)
        worst = max(worst, _rel(got.mean, want.mean), _rel(got.variance, want.variance), _rel(state.beta_n, want.beta))
    return worst < 1e-9, f"max relative error {worst:.2e}"


def check_telescoping(rng, cases=20):
    """Per-step log densities of a random model sum to its closed-form joint."""
    worst = 0.0
    for i in range(cases):
        model = BrunoModel(4, depth=2, hidden=8, preprocess=PreprocessConfig(kind="none"), seed=i, nu=6.0, rho=0.4)
        for arr in model.flow.parameters().values():
            arr += 0.1 * rng.standard_normal(arr.shape)
        x = rng.standard_normal((int(rng.integers(1, 12)), 4))
        _, total = sequence_log_likelihood(model, x)
        worst = max(worst, abs(total - joint_log_likelihood_naive(model, x)))
    return worst < 1e-6, f"max abs gap {worst:.2e}"


def check_flow(rng):
    """Round trip and log-determinant against a numeric Jacobian."""
    stack = FlowStack(6, depth=4, hidden=8, preprocess=PreprocessConfig(kind="none"), rng=rng)
    for arr in stack.parameters().values():
        arr += 0.1 * rng.standard_normal(arr.shape)
    x = rng.standard_normal((1, 6))
    z, logdet = flow_forward(stack, x)
    roundtrip = np.abs(flow_inverse(stack, z) - x).max()
    h = 1e-6
    jac = np.empty((6, 6))
    for j in range(6):
        e = np.zeros((1, 6))
        e[0, j] = h
        jac[:, j] = (flow_forward(stack, x + e)[0] - flow_forward(stack, x - e)[0])[0] / (2 * h)
    gap = abs(np.linalg.slogdet(jac)[1] - logdet[0])
    return roundtrip < 1e-10 and gap < 1e-4, f"round trip {roundtrip:.1e}, logdet gap {gap:.1e}"


def check_gradients(rng):
    """Analytic gradients of the sequence likelihood against central differences."""
    model = BrunoModel(4, depth=2, hidden=6, preprocess=PreprocessConfig(kind="none"), seed=1, nu=6.0, rho=0.3)
    for arr in model.flow.parameters().values():
        arr += 0.1 * rng.standard_normal(arr.shape)
    x = rng.standard_normal((2, 5, 4))
    w = rng.standard_normal((2, 5))
    _, _, cache = sequence_log_likelihood(model, x, keep=True)
    grads = sequence_backward(model, cache, w)
    worst = 0.0
    h = 1e-5
    for name, arr in model.parameters().items():
        flat = arr.reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        vals = []
        for step in (h, -h):
            flat[i] = old + step
            vals.append(float((w * sequence_log_likelihood(model, x)[0]).sum()))
        flat[i] = old
        numeric = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, abs(grads[name].reshape(-1)[i] - numeric) / max(abs(numeric), 1e-3))
    return worst < 1e-3, f"max relative gradient error {worst:.1e}"


def check_gp_limit(rng):
    """Large-nu Student-t predictive matches the Gaussian-mode one."""
    tp = make_params(1e6, 0.0, 1.0, 0.3)
    gp = make_params(1e6, 0.0, 1.0, 0.3, Mode.GAUSSIAN)
    s_t, s_g = prior_state(tp), prior_state(gp)
    for zi in rng.standard_normal(8):
        s_t, s_g = update_state(tp, s_t, zi), update_state(gp, s_g, zi)
    m = predictive_moments(gp, s_g)
    grid = m.mean + np.sqrt(m.variance) * np.linspace(-4, 4, 101)
    gap = max(abs(predictive_log_density(tp, s_t, z) - predictive_log_density(gp, s_g, z)) for z in grid)
    return gap < 1e-4, f"max log-density gap {gap:.1e}"


CHECKS = (
    ("recurrence vs explicit inversion", check_recurrence),
    ("telescoping vs joint density", check_telescoping),
    ("flow inverse and log-determinant", check_flow),
    ("gradients vs finite differences", check_gradients),
    ("Gaussian limit", check_gp_limit),
)


def run_selftest(seed=0, out=print):
    ok = True
    for name, fn in CHECKS:
        passed, detail = fn(np.random.default_rng(seed))
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return ok
