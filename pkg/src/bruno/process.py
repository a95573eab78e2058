"""Exchangeable Student-t and Gaussian processes over scalars.

Every latent dimension of the model carries one of these processes. The
covariance of ``n`` observations is ``v`` on the diagonal and ``rho`` off it,
which gives closed forms for the inverse and the determinant and lets the
one-step predictive distribution be updated in O(1) per observation.

The multivariate t used here is variance-parameterised: its covariance is
``K`` itself (not ``nu / (nu - 2) * K``), so ``(nu - 2)`` appears wherever the
textbook density has ``nu``.

All functions broadcast, so the fields of ``ProcessParams`` and
``PredictiveState`` may be scalars or arrays of per-dimension values.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import digamma, gammaln

from .errors import ConstraintViolation, DomainError, NonFinite

_LOG_PI = np.log(np.pi)
_LOG_2PI = np.log(2.0 * np.pi)
_MIN_GAP = 1e-12


class Mode(str, Enum):
    STUDENT_T = "student_t"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class ProcessParams:
    nu: object
    mu: object
    v: object
    rho: object
    mode: Mode = Mode.STUDENT_T


@dataclass(frozen=True)
class PredictiveState:
    """Sufficient statistics after ``n`` observations.

    ``v_n`` is the unscaled conditional variance, ``beta_n`` the Hotelling
    statistic of the centred observations and ``s_n`` their running sum.
    """

    n: int
    mu_n: object
    v_n: object
    beta_n: object
    s_n: object


@dataclass(frozen=True)
class PredictiveMoments:
    dof: object
    mean: object
    variance: object


@dataclass(frozen=True)
class OracleMoments(PredictiveMoments):
    beta: object = 0.0
    v_tilde: object = 0.0


def _value(x):
    arr = np.asarray(x, dtype=float)
    return float(arr) if arr.ndim == 0 else arr


def make_params(nu, mu, v, rho, mode=Mode.STUDENT_T):
    """Validate and pack process parameters.

    Raises ConstraintViolation unless ``v > 0``, ``0 <= rho < v`` and, for the
    Student-t mode, ``nu > 2``.
    """
    mode = Mode(mode)
    nu, mu, v, rho = (_value(a) for a in (nu, mu, v, rho))
    if not np.all(np.isfinite(mu)):
        raise ConstraintViolation("mu must be finite")
    if not np.all(v > 0):
        raise ConstraintViolation(f"v must be positive, got {v}")
    if not np.all(rho >= 0):
        raise ConstraintViolation(f"rho must be non-negative, got {rho}")
    if not np.all(rho < v):
        raise ConstraintViolation(f"rho must be strictly below v (rho={rho}, v={v})")
    if mode is Mode.STUDENT_T and not np.all(nu > 2):
        raise ConstraintViolation(f"nu must exceed 2 in Student-t mode, got {nu}")
    return ProcessParams(nu=nu, mu=mu, v=v, rho=rho, mode=mode)


def prior_state(params):
    """State before any observation: the prior itself."""
    zero = np.zeros_like(np.asarray(params.mu, dtype=float))
    zero = _value(zero)
    return PredictiveState(n=0, mu_n=params.mu, v_n=params.v, beta_n=zero, s_n=zero)


def inverse_entries(v, rho, n):
    """Diagonal and off-diagonal entries of the inverse n x n exchangeable covariance."""
    gap = np.maximum(v - rho, _MIN_GAP)
    den = gap * (v + rho * (n - 1))
    return (v + rho * (n - 2)) / den, -rho / den


def _inverse_entries_grad(v, rho, n):
    """Partials of the inverse entries with respect to v and rho.

    Returns ``(da_dv, da_drho, db_dv, db_drho)``.
    """
    gap = v - rho
    r = v + rho * (n - 1)
    u = v + rho * (n - 2)
    den = gap * r
    dden_dv = r + gap
    dden_drho = gap * (n - 1) - r
    den2 = den * den
    da_dv = (den - u * dden_dv) / den2
    da_drho = ((n - 2) * den - u * dden_drho) / den2
    db_dv = rho * dden_dv / den2
    db_drho = (rho * dden_drho - den) / den2
    return da_dv, da_drho, db_dv, db_drho


def update_state(params, state, z):
    """Condition the predictive distribution on one more observation ``z``."""
    if not np.all(np.isfinite(z)):
        raise NonFinite("observation must be finite")
    v, rho = params.v, params.rho
    n = state.n
    m = n + 1
    d = rho / (v + rho * n)
    mu_next = (1.0 - d) * state.mu_n + d * z
    v_next = (1.0 - d) * state.v_n + d * (v - rho)

    zc = z - params.mu
    s_next = state.s_n + zc
    a_m, b_m = inverse_entries(v, rho, m)
    _, b_n = inverse_entries(v, rho, n)
    # b_n multiplies s_n = 0 at n = 0, so its value there is irrelevant.
    beta_next = state.beta_n + (a_m - b_m) * zc * zc + b_m * s_next * s_next - b_n * state.s_n * state.s_n
    return PredictiveState(
        n=m, mu_n=_value(mu_next), v_n=_value(v_next), beta_n=_value(beta_next), s_n=_value(s_next)
    )


def predictive_moments(params, state):
    dof = params.nu + state.n
    if params.mode is Mode.GAUSSIAN:
        variance = state.v_n
    else:
        variance = state.v_n * (params.nu + state.beta_n - 2.0) / (params.nu + state.n - 2.0)
    return PredictiveMoments(dof=_value(dof), mean=state.mu_n, variance=_value(variance))


def univariate_t_log_pdf(dof, mean, variance, z):
    """Log-density of the variance-parameterised univariate t."""
    dof = np.asarray(dof, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(dof <= 2):
        raise DomainError(f"degrees of freedom must exceed 2, got {dof}")
    if np.any(variance <= 0):
        raise DomainError(f"variance must be positive, got {variance}")
    k = dof - 2.0
    q = (z - mean) ** 2 / (k * variance)
    out = (
        gammaln(0.5 * (dof + 1.0))
        - gammaln(0.5 * dof)
        - 0.5 * (np.log(k * variance) + _LOG_PI)
        - 0.5 * (dof + 1.0) * np.log1p(q)
    )
    return _value(out)


def gaussian_log_pdf(mean, variance, z):
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0):
        raise DomainError(f"variance must be positive, got {variance}")
    return _value(-0.5 * (_LOG_2PI + np.log(variance)) - 0.5 * (z - mean) ** 2 / variance)


def predictive_log_density(params, state, z):
    """log p(z_{n+1} = z | z_1..z_n)."""
    mom = predictive_moments(params, state)
    if params.mode is Mode.GAUSSIAN:
        return gaussian_log_pdf(mom.mean, mom.variance, z)
    return univariate_t_log_pdf(mom.dof, mom.mean, mom.variance, z)


def student_t_variates(dof, mean, variance, rng, size=None):
    """Polar sampler for the variance-parameterised t.

    A point uniform in the unit disc is formed from two uniforms: ``r`` is the
    larger of the two and the angle is ``2*pi*c/r`` for the smaller ``c``.
    Draws with ``r == 0`` are redrawn.
    """
    dof = np.asarray(dof, dtype=float)
    shape = np.broadcast_shapes(dof.shape, np.shape(mean), np.shape(variance))
    if size is not None:
        shape = np.broadcast_shapes(shape, tuple(np.atleast_1d(size)))
    a = rng.random(shape)
    b = rng.random(shape)
    r = np.maximum(a, b)
    bad = r == 0.0
    while np.any(bad):
        a[bad] = rng.random(int(bad.sum()))
        b[bad] = rng.random(int(bad.sum()))
        r = np.maximum(a, b)
        bad = r == 0.0
    c = np.minimum(a, b)
    alpha = 2.0 * np.pi * c / r
    # r * sqrt(nu / r^2 * (r^(-4/nu) - 1)), written without the 1/r^2
    t = np.cos(alpha) * np.sqrt(dof * np.expm1(-4.0 / dof * np.log(r)))
    sigma = np.sqrt(variance * (dof - 2.0) / dof)
    return _value(mean + sigma * t)


def sample_predictive(params, state, rng, size=None):
    """Draw from p(z_{n+1} | z_1..z_n)."""
    mom = predictive_moments(params, state)
    if params.mode is Mode.GAUSSIAN:
        shape = np.broadcast_shapes(np.shape(mom.mean), np.shape(mom.variance))
        if size is not None:
            shape = np.broadcast_shapes(shape, tuple(np.atleast_1d(size)))
        return _value(mom.mean + np.sqrt(mom.variance) * rng.standard_normal(shape))
    return student_t_variates(mom.dof, mom.mean, mom.variance, rng, size)


def _check_params(params):
    try:
        make_params(params.nu, params.mu, params.v, params.rho, params.mode)
    except ConstraintViolation as exc:
        raise DomainError(str(exc)) from exc


def mvt_log_pdf_oracle(params, z_vec):
    """Joint log-density of a whole sequence from the closed-form inverse and determinant.

    Scalar parameters only. Used to check the recurrence.
    """
    _check_params(params)
    z = np.asarray(z_vec, dtype=float)
    if z.ndim != 1 or z.size < 1:
        raise DomainError("z_vec must be a non-empty 1-d sequence")
    n = z.size
    v, rho, nu = params.v, params.rho, params.nu
    a, b = inverse_entries(v, rho, n)
    zc = z - params.mu
    beta = (a - b) * np.dot(zc, zc) + b * zc.sum() ** 2
    logdet = (n - 1) * np.log(v - rho) + np.log(v + (n - 1) * rho)
    if params.mode is Mode.GAUSSIAN:
        return float(-0.5 * (n * _LOG_2PI + logdet + beta))
    return float(
        gammaln(0.5 * (nu + n))
        - gammaln(0.5 * nu)
        - 0.5 * n * (np.log(nu - 2.0) + _LOG_PI)
        - 0.5 * logdet
        - 0.5 * (nu + n) * np.log1p(beta / (nu - 2.0))
    )


def conditional_oracle(params, z_obs):
    """Predictive moments of the next value by explicit matrix algebra.

    Builds the covariance of the observed block, inverts it with a general
    dense solver and applies the block-conditioning formulas directly.
    Test oracle only: cost is cubic in ``len(z_obs)``.
    """
    _check_params(params)
    z = np.asarray(z_obs, dtype=float)
    if z.ndim != 1 or z.size < 1:
        raise DomainError("z_obs must be a non-empty 1-d sequence")
    n = z.size
    v, rho, nu = params.v, params.rho, params.nu
    k_aa = np.full((n, n), rho) + np.eye(n) * (v - rho)
    k_ba = np.full(n, rho)
    k_aa_inv = np.linalg.inv(k_aa)
    zc = z - params.mu
    w = k_ba @ k_aa_inv
    mean = params.mu + w @ zc
    beta = zc @ k_aa_inv @ zc
    v_tilde = v - w @ k_ba
    if params.mode is Mode.GAUSSIAN:
        variance = v_tilde
    else:
        variance = (nu + beta - 2.0) / (nu + n - 2.0) * v_tilde
    return OracleMoments(
        dof=float(nu + n), mean=float(mean), variance=float(variance), beta=float(beta), v_tilde=float(v_tilde)
    )


# ---------------------------------------------------------------------------
# Batched recurrence with reverse-mode gradients (used by the model).


def batched_prior_state(params, batch, dim):
    """Prior state with ``(batch, dim)`` statistics and a ``(dim,)`` variance."""
    return PredictiveState(
        n=0,
        mu_n=np.broadcast_to(np.asarray(params.mu, dtype=float), (batch, dim)).copy(),
        v_n=np.broadcast_to(np.asarray(params.v, dtype=float), (dim,)).copy(),
        beta_n=np.zeros((batch, dim)),
        s_n=np.zeros((batch, dim)),
    )


def run_recurrence(params, z):
    """Per-step predictive log-densities for a batch of sequences.

    ``z`` has shape ``(B, N, D)`` and the parameters broadcast against ``D``.
    Returns ``(logp, states)`` where ``logp[b, n, d]`` is
    ``log p(z[b, n, d] | z[b, :n, d])`` and ``states[n]`` is the state
    before observation ``n``; pass ``states`` to :func:`recurrence_backward`.
    """
    z = np.asarray(z, dtype=float)
    batch, length, dim = z.shape
    if not np.all(np.isfinite(z)):
        raise NonFinite("observations must be finite")
    _check_params(params)
    # Everything that depends only on the step index is computed up front;
    # the loop then carries the same updates as update_state/predictive_log_density.
    nu = np.broadcast_to(np.asarray(params.nu, dtype=float), (dim,))
    v = np.broadcast_to(np.asarray(params.v, dtype=float), (dim,))
    rho = np.broadcast_to(np.asarray(params.rho, dtype=float), (dim,))
    mu0 = np.broadcast_to(np.asarray(params.mu, dtype=float), (dim,))
    steps = np.arange(length, dtype=float)[:, None]
    d = rho / (v + rho * steps)
    a_m, b_m = inverse_entries(v, rho, steps + 1.0)
    _, b_n = inverse_entries(v, rho, steps)
    gaussian = params.mode is Mode.GAUSSIAN
    if not gaussian:
        dof = nu + steps
        k = dof - 2.0
        log_norm = gammaln(0.5 * (dof + 1.0)) - gammaln(0.5 * dof) - 0.5 * _LOG_PI

    state = batched_prior_state(params, batch, dim)
    mu_n, v_n, beta_n, s_n = state.mu_n, state.v_n, state.beta_n, state.s_n
    logp = np.empty_like(z)
    states = []
    for i in range(length):
        states.append(state)
        zi = z[:, i, :]
        sq = (zi - mu_n) ** 2
        if gaussian:
            logp[:, i, :] = -0.5 * (_LOG_2PI + np.log(v_n)) - 0.5 * sq / v_n
        else:
            variance = v_n * (nu + beta_n - 2.0) / k[i]
            logp[:, i, :] = log_norm[i] - 0.5 * np.log(k[i] * variance) - 0.5 * (dof[i] + 1.0) * np.log1p(
                sq / (k[i] * variance)
            )
        zc = zi - mu0
        s_next = s_n + zc
        beta_n = beta_n + (a_m[i] - b_m[i]) * zc * zc + b_m[i] * s_next * s_next - b_n[i] * s_n * s_n
        mu_n = (1.0 - d[i]) * mu_n + d[i] * zi
        v_n = (1.0 - d[i]) * v_n + d[i] * (v - rho)
        s_n = s_next
        state = PredictiveState(n=i + 1, mu_n=mu_n, v_n=v_n, beta_n=beta_n, s_n=s_n)
    return logp, states


def final_state(params, z):
    """State after conditioning on every element of ``z`` (shape ``(B, N, D)``)."""
    z = np.asarray(z, dtype=float)
    batch, length, dim = z.shape
    state = batched_prior_state(params, batch, dim)
    for i in range(length):
        state = update_state(params, state, z[:, i, :])
    return state


def recurrence_backward(params, states, z, grad_logp):
    """Reverse-mode pass through :func:`run_recurrence`.

    ``grad_logp`` has the shape of ``logp``. Returns
    ``(grad_z, grad_nu, grad_v, grad_rho)`` with parameter gradients summed
    over the batch. The mean ``mu`` is treated as a constant.
    """
    z = np.asarray(z, dtype=float)
    grad_logp = np.asarray(grad_logp, dtype=float)
    batch, length, dim = z.shape
    nu = np.broadcast_to(np.asarray(params.nu, dtype=float), (dim,))
    v = np.broadcast_to(np.asarray(params.v, dtype=float), (dim,))
    rho = np.broadcast_to(np.asarray(params.rho, dtype=float), (dim,))
    student = params.mode is Mode.STUDENT_T

    grad_z = np.zeros_like(z)
    g_nu = np.zeros(dim)
    g_v = np.zeros(dim)
    g_rho = np.zeros(dim)
    # adjoints of the state after the current step
    g_mu = np.zeros((batch, dim))
    g_vt = np.zeros(dim)
    g_beta = np.zeros((batch, dim))
    g_s = np.zeros((batch, dim))

    for i in range(length - 1, -1, -1):
        st = states[i]
        n = st.n
        zi = z[:, i, :]
        mu_n, vt_n, beta_n, s_n = st.mu_n, st.v_n, st.beta_n, st.s_n

        # -- state update n -> n+1
        m = n + 1
        denom = v + rho * n
        d = rho / denom
        zc = zi - params.mu
        s_next = s_n + zc
        a_m, b_m = inverse_entries(v, rho, m)
        _, b_n = inverse_entries(v, rho, n)
        e = a_m - b_m

        gz = d * g_mu
        g_d = np.sum(g_mu * (zi - mu_n), axis=0) + g_vt * ((v - rho) - vt_n)
        new_g_mu = (1.0 - d) * g_mu
        new_g_vt = (1.0 - d) * g_vt
        g_v += g_vt * d
        g_rho -= g_vt * d
        g_zc = g_s + g_beta * (2.0 * e * zc + 2.0 * b_m * s_next)
        gz += g_zc
        new_g_s = g_s + g_beta * (2.0 * b_m * s_next - 2.0 * b_n * s_n)
        new_g_beta = g_beta.copy()
        g_e = np.sum(g_beta * zc * zc, axis=0)
        g_bm = np.sum(g_beta * s_next * s_next, axis=0)
        g_bn = -np.sum(g_beta * s_n * s_n, axis=0)
        g_v += g_d * (-rho / denom**2)
        g_rho += g_d * (v / denom**2)
        da_dv, da_drho, db_dv, db_drho = _inverse_entries_grad(v, rho, m)
        g_v += g_e * (da_dv - db_dv) + g_bm * db_dv
        g_rho += g_e * (da_drho - db_drho) + g_bm * db_drho
        if n > 0:
            _, _, dbn_dv, dbn_drho = _inverse_entries_grad(v, rho, n)
            g_v += g_bn * dbn_dv
            g_rho += g_bn * dbn_drho

        # -- predictive log-density at step n
        gl = grad_logp[:, i, :]
        delta = zi - mu_n
        if student:
            k = nu + n - 2.0
            c = nu + beta_n - 2.0
            var = vt_n * c / k
            dof = nu + n
            kv = k * var
            q = delta * delta / kv
            g_dlp = -(dof + 1.0) * delta / (kv + delta * delta)
            gz += gl * g_dlp
            new_g_mu -= gl * g_dlp
            g_var = gl * (0.5 / var) * ((dof + 1.0) * q / (1.0 + q) - 1.0)
            g_dof = gl * (
                0.5 * digamma(0.5 * (dof + 1.0))
                - 0.5 * digamma(0.5 * dof)
                - 0.5 / k
                - 0.5 * np.log1p(q)
                + 0.5 * (dof + 1.0) * q / (k * (1.0 + q))
            )
            g_nu += np.sum(g_dof, axis=0)
            new_g_vt += np.sum(g_var * c / k, axis=0)
            new_g_beta += g_var * vt_n / k
            g_nu += np.sum(g_var * vt_n * (k - c) / (k * k), axis=0)
        else:
            g_dlp = -delta / vt_n
            gz += gl * g_dlp
            new_g_mu -= gl * g_dlp
            new_g_vt += np.sum(gl * (-0.5 / vt_n + 0.5 * delta * delta / (vt_n * vt_n)), axis=0)

        grad_z[:, i, :] = gz
        g_mu, g_vt, g_beta, g_s = new_g_mu, new_g_vt, new_g_beta, new_g_s

    # prior state: mu_0 = mu (constant), v_0 = v, beta_0 = s_0 = 0
    g_v += g_vt
    return grad_z, g_nu, g_v, g_rho
