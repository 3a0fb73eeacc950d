import math

import numpy as np
import pytest

from geln.dataset import LabelSchema
from geln.nn import (
    AdamState,
    BatchNorm1d,
    CosineSchedule,
    Linear,
    Sequential,
    Swish,
    adam_step,
    block_softmax,
    category_softmax_ce,
    grad_check,
    swish_backward,
    swish_forward,
)

SEEDS = range(20)
SCHEMA_53 = LabelSchema.from_pairs([("five", list("abcde")), ("three", list("xyz"))])


def _one_hot(rng, schema, B):
    y = np.zeros((B, schema.n_classes))
    for block, k in zip(schema.blocks, schema.sizes):
        y[np.arange(B), block.start + rng.integers(k, size=B)] = 1.0
    return y


def _layer_checks(layer, x, rng):
    """Check dx and every parameter gradient of ``layer`` for the probe loss sum(y * R)."""
    y, _ = layer.forward(x)
    R = rng.normal(size=y.shape)

    def loss_x(xx):
        return float((layer.forward(xx)[0] * R).sum())

    layer.zero_grad()
    y, cache = layer.forward(x)
    dx = layer.backward(R, cache)
    errors = [grad_check(loss_x, dx, x)]
    for name, p in layer.named_parameters().items():
        analytic = layer.named_grads()[name].copy()

        def loss_p(pp, p=p):
            saved = p.copy()
            p[...] = pp
            try:
                return loss_x(x)
            finally:
                p[...] = saved

        errors.append(grad_check(loss_p, analytic, p.copy()))
    return max(errors)


def test_linear_examples():
    rng = np.random.default_rng(0)
    lin = Linear(2, 2, rng)
    lin.params["W"][...] = np.eye(2)
    lin.params["b"][...] = [3.0, 4.0]
    y, _ = lin.forward(np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(y, [[4.0, 6.0]])
    lin.params["b"][...] = 0.0
    x = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(lin.forward(x)[0], x)
    with pytest.raises(ValueError):
        lin.forward(np.ones((1, 3)))


def test_linear_init_bounds():
    lin = Linear(30, 10, np.random.default_rng(1))
    assert np.abs(lin.params["W"]).max() <= math.sqrt(6 / 40)
    assert np.all(lin.params["b"] == 0)


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    assert _layer_checks(Linear(4, 2, rng), rng.normal(size=(3, 4)), rng) < 1e-6


def test_swish_values():
    y, cache = swish_forward(np.array([0.0, 20.0]))
    assert y[0] == 0.0
    assert abs(y[1] - 20.0) < 1e-7
    assert swish_backward(np.array([1.0, 0.0]), cache)[0] == 0.5
    big, _ = swish_forward(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(big))


@pytest.mark.parametrize("seed", SEEDS)
def test_swish_gradients(seed):
    rng = np.random.default_rng(seed)
    assert _layer_checks(Swish(), rng.normal(scale=3, size=(4, 5)), rng) < 1e-6


def test_batchnorm_normalizes():
    rng = np.random.default_rng(0)
    bn = BatchNorm1d(4)
    x = rng.normal(loc=3, scale=5, size=(64, 4))
    y, _ = bn.forward(x)
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-10)
    var = x.var(axis=0)
    np.testing.assert_allclose(y.var(axis=0), var / (var + bn.eps), atol=1e-8)
    np.testing.assert_allclose(y.var(axis=0), 1, atol=1e-5)


def test_batchnorm_constant_column_and_small_batch():
    bn = BatchNorm1d(2)
    x = np.array([[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]])
    y, _ = bn.forward(x)
    np.testing.assert_array_equal(y[:, 1], 0.0)
    with pytest.raises(ValueError):
        bn.forward(np.ones((1, 2)))
    bn.eval()
    assert bn.forward(np.ones((1, 2)))[0].shape == (1, 2)


def test_batchnorm_running_stats():
    rng = np.random.default_rng(4)
    bn = BatchNorm1d(3, momentum=0.1)
    x = rng.normal(size=(10, 3))
    bn.forward(x)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=0, ddof=1))
    cum = BatchNorm1d(3, momentum=None)
    batches = [rng.normal(size=(8, 3)) for _ in range(4)]
    for b in batches:
        cum.forward(b)
    np.testing.assert_allclose(cum.buffers["running_mean"], np.mean([b.mean(axis=0) for b in batches], axis=0))
    cum.reset_running_stats()
    assert np.all(cum.buffers["running_var"] == 1) and set(cum.num_batches.values()) == {0}


def test_batchnorm_streams_keep_separate_stats():
    rng = np.random.default_rng(5)
    bn = BatchNorm1d(2, momentum=None, streams=("a", "b"))
    xa, xb = rng.normal(size=(6, 2)), rng.normal(loc=10, size=(6, 2))
    bn.forward(xa, "a")
    bn.forward(xb, "b")
    np.testing.assert_allclose(bn.buffers["running_mean_a"], xa.mean(axis=0))
    np.testing.assert_allclose(bn.buffers["running_mean_b"], xb.mean(axis=0))
    assert set(bn.named_parameters()) == {"gamma", "beta"}
    bn.eval()
    ya, _ = bn.forward(xa, "a")
    np.testing.assert_allclose(ya.mean(axis=0), 0, atol=1e-10)
    with pytest.raises(ValueError):
        bn.forward(xa, "c")
    with pytest.raises(ValueError):
        BatchNorm1d(2).forward(xa, "a")


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_gradients(seed):
    rng = np.random.default_rng(seed)
    bn = BatchNorm1d(3)
    bn.params["gamma"][...] = rng.normal(size=3)
    bn.params["beta"][...] = rng.normal(size=3)
    assert _layer_checks(bn, rng.normal(size=(6, 3)), rng) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_batchnorm_eval_gradients(seed):
    rng = np.random.default_rng(seed)
    bn = BatchNorm1d(3)
    bn.forward(rng.normal(size=(8, 3)))
    bn.eval()
    assert _layer_checks(bn, rng.normal(size=(2, 3)), rng) < 1e-6


def test_sequential_chains_layers():
    rng = np.random.default_rng(2)
    net = Sequential(Linear(3, 4, rng), Swish(), BatchNorm1d(4), Linear(4, 2, rng))
    assert set(net.named_parameters()) == {"0.W", "0.b", "2.gamma", "2.beta", "3.W", "3.b"}
    assert _layer_checks(net, rng.normal(size=(5, 3)), rng) < 1e-5


def test_softmax_ce_uniform_and_margin():
    B = 3
    rng = np.random.default_rng(0)
    y = _one_hot(rng, SCHEMA_53, B)
    loss, probs, _ = category_softmax_ce(np.zeros((B, 8)), y, SCHEMA_53)
    assert loss == pytest.approx(math.log(5) + math.log(3), abs=1e-12)
    np.testing.assert_allclose(probs[:, :5], 0.2)
    loss, _, _ = category_softmax_ce(50.0 * y, y, SCHEMA_53)
    assert loss < 1e-9
    with pytest.raises(ValueError):
        category_softmax_ce(np.zeros((B, 7)), y[:, :7], SCHEMA_53)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_ce_gradients(seed):
    rng = np.random.default_rng(seed)
    y = _one_hot(rng, SCHEMA_53, 4)
    z = rng.normal(scale=2, size=(4, 8))
    _, probs, grad = category_softmax_ce(z, y, SCHEMA_53)
    np.testing.assert_allclose(grad, (probs - y) / 4)
    assert grad_check(lambda zz: category_softmax_ce(zz, y, SCHEMA_53)[0], grad, z) < 1e-6


def test_block_softmax_sums():
    rng = np.random.default_rng(1)
    p = block_softmax(rng.normal(scale=30, size=(10, 8)), SCHEMA_53)
    assert p.min() >= 0
    for block in SCHEMA_53.blocks:
        np.testing.assert_allclose(p[:, block].sum(axis=1), 1.0, atol=1e-9)


def test_adam_zero_grad_and_first_step():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    before = p["w"].copy()
    adam_step(p, {"w": np.zeros(3)}, AdamState(lr=0.01))
    np.testing.assert_array_equal(p["w"], before)
    g = np.array([5.0, -0.001, 1e3])
    adam_step(p, {"w": g}, AdamState(lr=0.01))
    delta = p["w"] - before
    np.testing.assert_array_equal(np.sign(delta), -np.sign(g))
    np.testing.assert_allclose(np.abs(delta), 0.01, rtol=1e-4)


def test_adam_deterministic_and_shape_check():
    rng = np.random.default_rng(0)
    g = {"w": rng.normal(size=(2, 3))}
    a, b = {"w": np.ones((2, 3))}, {"w": np.ones((2, 3))}
    sa, sb = AdamState(), AdamState()
    for _ in range(3):
        adam_step(a, g, sa)
        adam_step(b, g, sb)
    np.testing.assert_array_equal(a["w"], b["w"])
    assert sa.step == 3
    with pytest.raises(ValueError):
        adam_step(a, {"w": np.ones(3)}, sa)


def test_cosine_schedule():
    s = CosineSchedule(3e-4, 60, min_lr=1e-6)
    assert s(0) == 3e-4
    assert s(60) == 1e-6
    assert s(30) == pytest.approx((3e-4 + 1e-6) / 2)
    lrs = [s(e) for e in range(61)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_grad_check_sanity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=6)
    assert grad_check(lambda v: 0.5 * float(v @ v), lambda v: v, x) < 1e-9

    def swish_sum(v):
        return float(swish_forward(v)[0].sum())

    def swish_grad(v):
        return swish_backward(np.ones_like(v), swish_forward(v)[1])

    assert grad_check(swish_sum, swish_grad, x) < 1e-6
    big = np.full(4, 3.0)
    assert grad_check(lambda v: 0.5 * float(v @ v), 2 * big, big) == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ValueError):
        grad_check(lambda v: float("nan"), np.zeros(2), np.zeros(2))


def test_state_dict_round_trip():
    rng = np.random.default_rng(0)
    net = Sequential(Linear(3, 4, rng), BatchNorm1d(4))
    net.forward(rng.normal(size=(5, 3)))
    state = net.state_dict()
    assert "1.running_mean" in state
    other = Sequential(Linear(3, 4, np.random.default_rng(9)), BatchNorm1d(4))
    other.load_state_dict(state)
    for k, v in other.state_dict().items():
        np.testing.assert_array_equal(v, state[k])
    with pytest.raises(KeyError):
        other.load_state_dict({k: v for k, v in state.items() if k != "0.W"})
