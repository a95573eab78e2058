"""Invertible preprocessing and affine coupling layers with hand-written gradients.

A flow maps an observation ``x`` (shape ``(B, D)``) to a latent ``z`` of the
same shape and reports ``log|det dz/dx|`` per row. Each coupling layer copies
one half of the coordinates and applies an elementwise affine map to the other
half. The scale and shift are computed from the copied half by a small dense
network: two ELU layers shared by a tanh scale head and a linear shift head.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DegenerateBatch, NonFinite, RangeError, ShapeMismatch

_EPS_STD = 1e-12


@dataclass
class PreprocessConfig:
    """Input preprocessing.

    ``kind="logit"`` is for pixel data scaled to [0, 1); ``kind="none"`` passes
    real-valued data straight to the coupling layers.
    """

    alpha: float = 1e-6
    num_levels: int = 256
    dequantize: bool = True
    kind: str = "logit"

    def __post_init__(self):
        if not 0.0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        if self.kind not in ("logit", "none"):
            raise ValueError(f"unknown preprocessing kind {self.kind!r}")
        if self.num_levels < 1:
            raise ValueError("num_levels must be positive")


def dequantize(x_int, rng, num_levels=256):
    """Add U[0, 1) noise to integer levels and rescale to [0, 1)."""
    x = np.asarray(x_int)
    if np.any(x < 0) or np.any(x >= num_levels):
        raise RangeError(f"values must lie in [0, {num_levels})")
    u = rng.random(x.shape)
    return (x + u) / num_levels


def logit_forward(config, x):
    """Returns ``(y, logdet)`` for ``y = logit(alpha + (1 - 2 alpha) x)``; logdet is summed over the last axis."""
    x = np.asarray(x, dtype=float)
    a = config.alpha
    p = a + (1.0 - 2.0 * a) * x
    y = np.log(p) - np.log1p(-p)
    logdet = np.sum(np.log1p(-2.0 * a) - np.log(p) - np.log1p(-p), axis=-1)
    return y, logdet


def logit_inverse(config, y):
    """Inverse of :func:`logit_forward`.

    Latents beyond ``logit(alpha)`` / ``logit(1 - alpha)`` have no preimage in
    [0, 1]; they are clamped so outputs always stay in range.
    """
    a = config.alpha
    p = expit(np.asarray(y, dtype=float))
    return np.clip((p - a) / (1.0 - 2.0 * a), 0.0, 1.0)


def elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _elu_grad(a):
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


class Dense:
    """Affine layer ``x @ W + b``; with weight norm ``W = g * V / ||V||`` column-wise."""

    def __init__(self, n_in, n_out, rng, weightnorm=True, zero=False):
        self.n_in, self.n_out = n_in, n_out
        self.weightnorm = weightnorm
        if weightnorm:
            self.params = {
                "v": rng.normal(0.0, 0.05, size=(n_in, n_out)),
                "g": np.zeros(n_out) if zero else np.ones(n_out),
                "b": np.zeros(n_out),
            }
        else:
            scale = 0.0 if zero else 1.0 / np.sqrt(max(n_in, 1))
            self.params = {
                "w": rng.normal(0.0, 1.0, size=(n_in, n_out)) * scale,
                "b": np.zeros(n_out),
            }

    def weight(self):
        if not self.weightnorm:
            return self.params["w"]
        v = self.params["v"]
        norm = np.sqrt(np.sum(v * v, axis=0))
        return v * (self.params["g"] / norm)

    def __call__(self, x):
        return x @ self.weight() + self.params["b"]

    def backward(self, x, grad_out):
        """Parameter grads and the input grad for upstream ``grad_out``."""
        w = self.weight()
        grad_w = x.T @ grad_out
        grads = {"b": grad_out.sum(axis=0)}
        if self.weightnorm:
            v, g = self.params["v"], self.params["g"]
            norm = np.sqrt(np.sum(v * v, axis=0))
            grad_g = np.sum(grad_w * v, axis=0) / norm
            grads["g"] = grad_g
            grads["v"] = (g / norm) * (grad_w - v * (grad_g / norm))
        else:
            grads["w"] = grad_w
        return grads, grad_out @ w.T


class CouplingLayer:
    """Affine coupling: ``y[trans] = x[trans] * exp(s(x[pass])) + t(x[pass])``."""

    def __init__(self, dim, hidden, transform_mask, rng, weightnorm=True):
        mask = np.asarray(transform_mask, dtype=bool)
        if mask.shape != (dim,):
            raise ShapeMismatch(f"mask must have shape ({dim},)")
        self.dim = dim
        self.hidden = hidden
        self.mask = mask
        self.trans_idx = np.flatnonzero(mask)
        self.pass_idx = np.flatnonzero(~mask)
        self.weightnorm = weightnorm
        n_pass, n_trans = self.pass_idx.size, self.trans_idx.size
        self.trunk1 = Dense(n_pass, hidden, rng, weightnorm)
        self.trunk2 = Dense(hidden, hidden, rng, weightnorm)
        # zero heads: the layer starts as the identity
        self.s_head = Dense(hidden, n_trans, rng, weightnorm, zero=True)
        self.t_head = Dense(hidden, n_trans, rng, weightnorm, zero=True)

    def dense_layers(self):
        return {"trunk1": self.trunk1, "trunk2": self.trunk2, "s": self.s_head, "t": self.t_head}

    def scale_shift(self, x_pass):
        """Returns ``(s, t, activations)`` for the copied half."""
        a1 = self.trunk1(x_pass)
        h1 = elu(a1)
        a2 = self.trunk2(h1)
        h2 = elu(a2)
        s = np.tanh(self.s_head(h2))
        t = self.t_head(h2)
        return s, t, (x_pass, a1, h1, a2, h2)


@dataclass
class _LayerCache:
    x: np.ndarray
    s: np.ndarray
    acts: tuple


def coupling_forward(layer, x, keep=False):
    """Returns ``(y, logdet)``, plus a cache for :func:`coupling_backward` if ``keep``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.dim:
        raise ShapeMismatch(f"expected last dimension {layer.dim}, got {x.shape[-1]}")
    s, t, acts = layer.scale_shift(x[:, layer.pass_idx])
    y = x.copy()
    y[:, layer.trans_idx] = x[:, layer.trans_idx] * np.exp(s) + t
    logdet = s.sum(axis=1)
    if keep:
        return y, logdet, _LayerCache(x=x, s=s, acts=acts)
    return y, logdet


def coupling_inverse(layer, y):
    y = np.asarray(y, dtype=float)
    s, t, _ = layer.scale_shift(y[:, layer.pass_idx])
    x = y.copy()
    x[:, layer.trans_idx] = (y[:, layer.trans_idx] - t) * np.exp(-s)
    return x


def coupling_backward(layer, cache, grad_y, grad_logdet):
    """Reverse pass of one coupling layer. Returns ``(param_grads, grad_x)``."""
    x, s = cache.x, cache.s
    x_pass, a1, h1, a2, h2 = cache.acts
    if grad_y.shape != x.shape or grad_logdet.shape != (x.shape[0],):
        raise ShapeMismatch("upstream gradients do not match the cached forward pass")
    trans, pas = layer.trans_idx, layer.pass_idx
    es = np.exp(s)
    gy_t = grad_y[:, trans]
    grad_x = grad_y.copy()
    grad_x[:, trans] = gy_t * es
    g_s = gy_t * x[:, trans] * es + grad_logdet[:, None]
    g_pre_s = g_s * (1.0 - s * s)
    grads = {}
    gs_params, gh2_s = layer.s_head.backward(h2, g_pre_s)
    gt_params, gh2_t = layer.t_head.backward(h2, gy_t)
    g_a2 = (gh2_s + gh2_t) * _elu_grad(a2)
    g2_params, gh1 = layer.trunk2.backward(h1, g_a2)
    g_a1 = gh1 * _elu_grad(a1)
    g1_params, g_xpass = layer.trunk1.backward(x_pass, g_a1)
    grad_x[:, pas] += g_xpass
    for name, sub in (("trunk1", g1_params), ("trunk2", g2_params), ("s", gs_params), ("t", gt_params)):
        for key, val in sub.items():
            grads[f"{name}.{key}"] = val
    return grads, grad_x


class FlowStack:
    """Preprocessing followed by coupling layers with alternating halves."""

    def __init__(self, dim, depth=6, hidden=128, preprocess=None, weightnorm=True, rng=None):
        if dim < 2:
            raise ValueError("a coupling flow needs at least two dimensions")
        rng = np.random.default_rng(rng)
        self.dim = dim
        self.depth = depth
        self.hidden = hidden
        self.weightnorm = weightnorm
        self.preprocess = preprocess if preprocess is not None else PreprocessConfig()
        odd = np.arange(dim) % 2 == 1
        self.layers = [
            CouplingLayer(dim, hidden, odd if i % 2 == 0 else ~odd, rng, weightnorm) for i in range(depth)
        ]

    def parameters(self):
        """Flat ``{name: array}`` view; arrays are the live parameters."""
        out = {}
        for i, layer in enumerate(self.layers):
            for lname, dense in layer.dense_layers().items():
                for key, arr in dense.params.items():
                    out[f"layers.{i}.{lname}.{key}"] = arr
        return out


@dataclass
class FlowCache:
    layers: list = field(default_factory=list)
    batch: int = 0


def preprocess_forward(config, x):
    if config.kind == "logit":
        return logit_forward(config, x)
    x = np.asarray(x, dtype=float)
    return x.copy(), np.zeros(x.shape[:-1])


def preprocess_inverse(config, y):
    if config.kind == "logit":
        return logit_inverse(config, y)
    return np.asarray(y, dtype=float).copy()


def flow_forward(stack, x, keep=False):
    """Map observations to latents: returns ``(z, logdet)`` (and a cache if ``keep``)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != stack.dim:
        raise ShapeMismatch(f"expected shape (B, {stack.dim}), got {x.shape}")
    h, logdet = preprocess_forward(stack.preprocess, x)
    cache = FlowCache(batch=x.shape[0])
    for layer in stack.layers:
        if keep:
            h, ld, lc = coupling_forward(layer, h, keep=True)
            cache.layers.append(lc)
        else:
            h, ld = coupling_forward(layer, h)
        logdet = logdet + ld
    if keep:
        return h, logdet, cache
    return h, logdet


def flow_inverse(stack, z):
    h = np.asarray(z, dtype=float)
    for layer in reversed(stack.layers):
        h = coupling_inverse(layer, h)
    return preprocess_inverse(stack.preprocess, h)


def flow_backward(stack, cache, grad_z, grad_logdet):
    """Gradients of ``sum(grad_z * z) + sum(grad_logdet * logdet)`` for every flow parameter.

    ``cache`` comes from ``flow_forward(stack, x, keep=True)``. Keys match
    :meth:`FlowStack.parameters`. Preprocessing has no parameters, so the pass
    stops at its output.
    """
    grad_z = np.asarray(grad_z, dtype=float)
    grad_logdet = np.asarray(grad_logdet, dtype=float)
    if len(cache.layers) != len(stack.layers):
        raise ShapeMismatch("cache was produced by a different stack")
    if grad_z.shape != (cache.batch, stack.dim) or grad_logdet.shape != (cache.batch,):
        raise ShapeMismatch("upstream gradients do not match the cached batch")
    if not (np.all(np.isfinite(grad_z)) and np.all(np.isfinite(grad_logdet))):
        raise NonFinite("non-finite upstream gradient")
    grads = {}
    g = grad_z
    for i in range(len(stack.layers) - 1, -1, -1):
        layer_grads, g = coupling_backward(stack.layers[i], cache.layers[i], g, grad_logdet)
        for key, val in layer_grads.items():
            grads[f"layers.{i}.{key}"] = val
    return grads


def weightnorm_init(stack, data_batch):
    """Data-dependent init of weight-normalised layers.

    For every dense layer, in forward order, the magnitude and bias are set so
    that its pre-activations over ``data_batch`` have zero mean and unit
    variance; the direction is left alone, so repeating the call is a no-op.
    Units with zero variance get magnitude 1 and a ``DegenerateBatch`` warning.
    """
    if not stack.weightnorm:
        raise ValueError("weightnorm_init requires a weight-normalised stack")
    h, _ = preprocess_forward(stack.preprocess, np.asarray(data_batch, dtype=float))
    degenerate = 0
    for layer in stack.layers:
        x = h[:, layer.pass_idx]
        for dense, act in ((layer.trunk1, elu), (layer.trunk2, elu)):
            x, bad = _init_dense(dense, x)
            degenerate += bad
            x = act(x)
        for head in (layer.s_head, layer.t_head):
            _, bad = _init_dense(head, x)
            degenerate += bad
        h, _ = coupling_forward(layer, h)
    if degenerate:
        warnings.warn(f"{degenerate} units had zero variance on the init batch", DegenerateBatch, stacklevel=2)
    return stack


def _init_dense(dense, x):
    v = dense.params["v"]
    pre = x @ (v / np.sqrt(np.sum(v * v, axis=0)))
    mean = pre.mean(axis=0)
    std = pre.std(axis=0)
    bad = std < _EPS_STD
    safe = np.where(bad, 1.0, std)
    dense.params["g"][...] = 1.0 / safe
    dense.params["b"][...] = -mean / safe
    return dense(x), int(bad.sum())
