import math
import warnings

import numpy as np
import pytest

from bruno.errors import DegenerateBatch, RangeError, ShapeMismatch
from bruno.flow import (
    FlowStack,
    PreprocessConfig,
    coupling_forward,
    coupling_inverse,
    dequantize,
    flow_backward,
    flow_forward,
    flow_inverse,
    logit_forward,
    logit_inverse,
    weightnorm_init,
)


def randomize(stack, rng, scale=0.3):
    """Move every parameter off its init so no layer is the identity."""
    for arr in stack.parameters().values():
        arr += rng.normal(0.0, scale, size=arr.shape)
    return stack


def numeric_jacobian(fn, x, h=1e-6):
    d = x.size
    jac = np.empty((d, d))
    for j in range(d):
        xp, xm = x.copy(), x.copy()
        xp[0, j] += h
        xm[0, j] -= h
        jac[:, j] = (fn(xp)[0] - fn(xm)[0]) / (2 * h)
    return jac


# -- dequantisation and logit ----------------------------------------------------------


def test_dequantize_bounds_and_determinism():
    x = np.array([[0, 255, 17]])
    a = dequantize(x, np.random.default_rng(0))
    b = dequantize(x, np.random.default_rng(0))
    assert np.array_equal(a, b)
    assert 0 <= a[0, 0] < 1 / 256
    assert 255 / 256 <= a[0, 1] < 1
    assert np.all((a >= 0) & (a < 1))


def test_dequantize_zero_noise_lower_boundary():
    class ZeroRng:
        def random(self, shape):
            return np.zeros(shape)

    assert dequantize(np.array([0]), ZeroRng())[0] == 0.0


@pytest.mark.parametrize("bad", [-1, 256, 300])
def test_dequantize_range(bad):
    with pytest.raises(RangeError):
        dequantize(np.array([bad]), np.random.default_rng(0))


def test_logit_midpoint():
    y, _ = logit_forward(PreprocessConfig(alpha=1e-6), np.array([[0.5]]))
    assert y[0, 0] == 0.0


def test_logit_round_trip():
    cfg = PreprocessConfig(alpha=1e-6)
    x = np.linspace(0, 1, 1001, endpoint=False)[None, :]
    y, _ = logit_forward(cfg, x)
    assert np.max(np.abs(logit_inverse(cfg, y) - x)) < 1e-10


def test_logit_logdet_at_half():
    # d/dx logit(x) = 1/(x(1-x)) = 4 at 0.5; alpha -> 0
    cfg = PreprocessConfig(alpha=1e-12)
    _, ld = logit_forward(cfg, np.array([[0.5]]))
    assert ld[0] == pytest.approx(math.log(4.0), abs=1e-10)
    cfg = PreprocessConfig(alpha=1e-6)
    x = np.array([[0.3]])
    h = 1e-7
    num = (logit_forward(cfg, x + h)[0] - logit_forward(cfg, x - h)[0]) / (2 * h)
    assert logit_forward(cfg, x)[1][0] == pytest.approx(math.log(num[0, 0]), abs=1e-6)


def test_logit_inverse_range():
    cfg = PreprocessConfig(alpha=1e-3)
    x = logit_inverse(cfg, np.array([-1e3, -50.0, 0.0, 50.0, 1e3]))
    lo, hi = -cfg.alpha / (1 - 2 * cfg.alpha), (1 - cfg.alpha) / (1 - 2 * cfg.alpha)
    assert np.all((x >= lo) & (x <= hi))


def test_preprocess_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(alpha=0.5)
    with pytest.raises(ValueError):
        PreprocessConfig(kind="sigmoid")


# -- coupling layers ---------------------------------------------------------------------


def test_initial_layer_is_identity():
    stack = FlowStack(4, depth=1, hidden=8, rng=0)
    x = np.random.default_rng(1).normal(size=(5, 4))
    y, ld = coupling_forward(stack.layers[0], x)
    assert np.array_equal(y, x) and np.all(ld == 0)


def test_coupling_round_trip():
    rng = np.random.default_rng(2)
    stack = randomize(FlowStack(6, depth=1, hidden=16, rng=0), rng)
    x = rng.normal(size=(10, 6))
    y, _ = coupling_forward(stack.layers[0], x)
    assert np.max(np.abs(coupling_inverse(stack.layers[0], y) - x)) < 1e-8


@pytest.mark.parametrize("weightnorm", [True, False])
def test_coupling_logdet_matches_numeric_jacobian(weightnorm):
    rng = np.random.default_rng(3)
    stack = randomize(FlowStack(4, depth=1, hidden=16, weightnorm=weightnorm, rng=1), rng)
    layer = stack.layers[0]
    x = rng.normal(size=(1, 4))
    jac = numeric_jacobian(lambda a: coupling_forward(layer, a)[0], x)
    _, ld = coupling_forward(layer, x)
    assert ld[0] == pytest.approx(np.linalg.slogdet(jac)[1], abs=1e-4)


def test_masks_alternate_and_partition():
    stack = FlowStack(7, depth=4, hidden=4, rng=0)
    for i, layer in enumerate(stack.layers):
        assert set(layer.trans_idx) | set(layer.pass_idx) == set(range(7))
        assert not set(layer.trans_idx) & set(layer.pass_idx)
        if i:
            assert np.array_equal(layer.mask, ~stack.layers[i - 1].mask)


def test_scale_shift_ignore_transformed_half():
    rng = np.random.default_rng(4)
    layer = randomize(FlowStack(6, depth=1, hidden=8, rng=0), rng).layers[0]
    x = rng.normal(size=(3, 6))
    x2 = x.copy()
    x2[:, layer.trans_idx] += rng.normal(size=(3, layer.trans_idx.size))
    s1, t1, _ = layer.scale_shift(x[:, layer.pass_idx])
    s2, t2, _ = layer.scale_shift(x2[:, layer.pass_idx])
    assert np.array_equal(s1, s2) and np.array_equal(t1, t2)
    # and the backward pass sees no path from transformed inputs into s, t:
    _, ld, cache = coupling_forward(layer, x, keep=True)
    from bruno.flow import coupling_backward

    _, gx = coupling_backward(layer, cache, np.zeros_like(x), np.ones(3))
    assert np.all(gx[:, layer.trans_idx] == 0)


def test_logdet_bounded_per_layer():
    rng = np.random.default_rng(5)
    stack = randomize(FlowStack(6, depth=3, hidden=8, rng=0), rng, scale=5.0)
    h = rng.normal(size=(50, 6)) * 3
    for layer in stack.layers:
        h, ld = coupling_forward(layer, h)
        assert np.all(np.abs(ld) <= layer.trans_idx.size)


# -- stacks ------------------------------------------------------------------------------------


def test_identity_stack_equals_logit():
    stack = FlowStack(4, depth=1, hidden=8, rng=0)
    x = np.random.default_rng(0).random((3, 4))
    z, ld = flow_forward(stack, x)
    y, lld = logit_forward(stack.preprocess, x)
    assert np.array_equal(z, y) and np.array_equal(ld, lld)


def test_flow_round_trip_784():
    rng = np.random.default_rng(6)
    stack = randomize(FlowStack(784, depth=6, hidden=64, rng=0), rng, scale=0.05)
    x = rng.random((4, 784))
    z, _ = flow_forward(stack, x)
    assert np.max(np.abs(flow_inverse(stack, z) - x)) < 1e-6


@pytest.mark.parametrize("kind", ["logit", "none"])
def test_flow_logdet_matches_numeric_jacobian(kind):
    rng = np.random.default_rng(7)
    stack = randomize(FlowStack(6, depth=4, hidden=12, preprocess=PreprocessConfig(kind=kind), rng=0), rng)
    x = rng.uniform(0.1, 0.9, size=(1, 6))
    jac = numeric_jacobian(lambda a: flow_forward(stack, a)[0], x)
    _, ld = flow_forward(stack, x)
    assert ld[0] == pytest.approx(np.linalg.slogdet(jac)[1], abs=1e-4)


def _fd_objective(stack, x, gz, gld):
    z, ld = flow_forward(stack, x)
    return float(np.sum(gz * z) + np.sum(gld * ld))


@pytest.mark.parametrize("weightnorm", [True, False])
def test_flow_backward_matches_central_differences(weightnorm):
    rng = np.random.default_rng(8)
    stack = randomize(FlowStack(8, depth=2, hidden=6, weightnorm=weightnorm, rng=0), rng)
    x = rng.uniform(0.05, 0.95, size=(5, 8))
    gz = rng.normal(size=(5, 8))
    gld = rng.normal(size=5)
    _, _, cache = flow_forward(stack, x, keep=True)
    grads = flow_backward(stack, cache, gz, gld)
    params = stack.parameters()
    assert set(grads) == set(params)
    h = 1e-4
    for name, arr in params.items():
        flat = arr.reshape(-1)
        num = np.empty_like(flat)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = _fd_objective(stack, x, gz, gld)
            flat[i] = old - h
            fm = _fd_objective(stack, x, gz, gld)
            flat[i] = old
            num[i] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(grads[name].reshape(-1), num, rtol=1e-3, atol=1e-7, err_msg=name)


def test_flow_backward_zero_upstream():
    rng = np.random.default_rng(9)
    stack = randomize(FlowStack(8, depth=2, hidden=6, rng=0), rng)
    x = rng.random((4, 8))
    _, _, cache = flow_forward(stack, x, keep=True)
    grads = flow_backward(stack, cache, np.zeros((4, 8)), np.zeros(4))
    assert all(np.all(g == 0) for g in grads.values())


@pytest.mark.parametrize("weightnorm", [True, False])
def test_identity_stack_logdet_grad_wrt_scale_bias(weightnorm):
    stack = FlowStack(8, depth=2, hidden=6, weightnorm=weightnorm, rng=0)
    x = np.random.default_rng(1).random((3, 8))
    _, _, cache = flow_forward(stack, x, keep=True)
    grads = flow_backward(stack, cache, np.zeros((3, 8)), np.ones(3))
    for i, layer in enumerate(stack.layers):
        g = grads[f"layers.{i}.s.b"]
        # per example: one unit of tanh'(0) = 1 for each transformed dimension
        assert np.allclose(g, 3.0)
        assert g.sum() == pytest.approx(3 * layer.trans_idx.size)


def test_flow_backward_shape_checks():
    stack = FlowStack(4, depth=2, hidden=4, rng=0)
    _, _, cache = flow_forward(stack, np.full((2, 4), 0.5), keep=True)
    with pytest.raises(ShapeMismatch):
        flow_backward(stack, cache, np.zeros((3, 4)), np.zeros(3))
    other = FlowStack(4, depth=3, hidden=4, rng=0)
    with pytest.raises(ShapeMismatch):
        flow_backward(other, cache, np.zeros((2, 4)), np.zeros(2))


# -- weight-norm init ----------------------------------------------------------------------------


def _pre_activations(stack, batch):
    from bruno.flow import elu, preprocess_forward

    h, _ = preprocess_forward(stack.preprocess, batch)
    out = []
    for layer in stack.layers:
        a1 = layer.trunk1(h[:, layer.pass_idx])
        a2 = layer.trunk2(elu(a1))
        h2 = elu(a2)
        out += [a1, a2, layer.s_head(h2), layer.t_head(h2)]
        h, _ = coupling_forward(layer, h)
    return out


def test_weightnorm_init_standardises():
    rng = np.random.default_rng(10)
    stack = FlowStack(8, depth=3, hidden=16, rng=0)
    batch = rng.uniform(0.05, 0.95, size=(64, 8))
    weightnorm_init(stack, batch)
    for pre in _pre_activations(stack, batch):
        assert np.max(np.abs(pre.mean(axis=0))) < 1e-6
        assert np.max(np.abs(pre.std(axis=0) - 1)) < 1e-6


def test_weightnorm_init_idempotent():
    rng = np.random.default_rng(11)
    stack = FlowStack(8, depth=2, hidden=16, rng=0)
    batch = rng.uniform(0.05, 0.95, size=(64, 8))
    weightnorm_init(stack, batch)
    before = {k: v.copy() for k, v in stack.parameters().items()}
    weightnorm_init(stack, batch)
    for k, v in stack.parameters().items():
        assert np.allclose(v, before[k], atol=1e-6), k


def test_weightnorm_init_constant_batch():
    stack = FlowStack(4, depth=2, hidden=8, rng=0)
    with pytest.warns(DegenerateBatch):
        weightnorm_init(stack, np.full((16, 4), 0.5))
    for v in stack.parameters().values():
        assert np.all(np.isfinite(v))
    z, ld = flow_forward(stack, np.full((2, 4), 0.5))
    assert np.all(np.isfinite(z)) and np.all(np.isfinite(ld))


def test_weightnorm_init_requires_weightnorm():
    with pytest.raises(ValueError):
        weightnorm_init(FlowStack(4, depth=1, hidden=4, weightnorm=False, rng=0), np.full((4, 4), 0.5))
