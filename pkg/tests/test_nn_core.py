import json
import math

import numpy as np
import pytest

from cmit.nn_core import (
    Adam, CloudNorm, CloudNormConfig, LayerNorm, Linear, MultiHeadAttention, NonFiniteError,
    Params, ShapeError, UsageError, adam_step, cloud_norm_backward, cloud_norm_forward,
    layer_norm_forward, load_checkpoint, mse_loss, save_checkpoint, softmax,
)

from gradcheck import ALL_CHECKS

TOL = 1e-4


@pytest.mark.parametrize("name", sorted(ALL_CHECKS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(name, seed):
    errs = ALL_CHECKS[name](seed)
    assert max(errs.values()) <= TOL, errs


# ---- layer norm -----------------------------------------------------------

def test_layer_norm_constant_input_is_zero():
    y, _ = layer_norm_forward(np.full((1, 1, 5), 3.3), np.ones(5), np.zeros(5))
    assert np.all(y == 0)


def test_layer_norm_two_values():
    y, _ = layer_norm_forward(np.array([[[1.0, 3.0]]]), np.ones(2), np.zeros(2))
    np.testing.assert_allclose(y[0, 0], [-1, 1], atol=1e-5)


def test_layer_norm_moments():
    x = np.random.default_rng(0).normal(3, 7, size=(4, 6, 8))
    y, _ = layer_norm_forward(x, np.ones(8), np.zeros(8))
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-5)
    assert y.shape == x.shape


# ---- cloud norm -----------------------------------------------------------

def test_cloud_norm_constant_input_is_one():
    for stochastic in (False, True):
        u, _ = cloud_norm_forward(np.full((2, 3, 4), -1.5), CloudNormConfig(), rng_seed=1, stochastic=stochastic)
        assert np.all(u == 1.0)


def test_cloud_norm_two_point_hand_value():
    u, _ = cloud_norm_forward(np.array([[[0.0, 2.0]]]), CloudNormConfig())
    expected = math.exp(-0.5 / (math.sqrt(math.pi / 2) ** 2))
    np.testing.assert_allclose(u[0, 0], [expected, expected], rtol=1e-12)
    assert expected == pytest.approx(0.72738, abs=1e-5)


def test_cloud_norm_seeded_stochastic_is_reproducible():
    x = np.random.default_rng(2).normal(size=(3, 4, 8))
    a, _ = cloud_norm_forward(x, CloudNormConfig(), rng_seed=42, stochastic=True)
    b, _ = cloud_norm_forward(x, CloudNormConfig(), rng_seed=42, stochastic=True)
    c, _ = cloud_norm_forward(x, CloudNormConfig(), rng_seed=43, stochastic=True)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_cloud_norm_per_group_noise_shares_entropy():
    x = np.random.default_rng(2).normal(size=(3, 4, 8))
    _, cache = cloud_norm_forward(x, CloudNormConfig(per_group_noise=True), rng_seed=0, stochastic=True)
    assert np.all(cache.en_prime == cache.en_prime[..., :1])


@pytest.mark.parametrize("scale", [1e-6, 1.0, 1e4])
def test_cloud_norm_range(scale):
    x = np.random.default_rng(3).standard_cauchy(size=(4, 6, 8)) * scale
    u, _ = cloud_norm_forward(x, CloudNormConfig(noise_divisor=1.0), rng_seed=0, stochastic=True)
    assert u.shape == x.shape
    assert np.all(u > 0) and np.all(u <= 1)


def test_cloud_norm_output_strictly_positive_for_moderate_inputs():
    x = np.random.default_rng(3).normal(size=(4, 6, 8))
    u, _ = cloud_norm_forward(x, CloudNormConfig(), rng_seed=0, stochastic=True)
    assert np.all(u > 0) and np.all(u <= 1)


def test_cloud_norm_needs_two_features():
    with pytest.raises(ValueError):
        cloud_norm_forward(np.zeros((1, 1, 1)), CloudNormConfig())


def test_cloud_norm_backward_signs_and_zero():
    x = np.array([[[0.0, 1.0, 2.0]]])
    _, cache = cloud_norm_forward(x, CloudNormConfig())
    g = cloud_norm_backward(np.ones_like(x), cache)[0, 0]
    assert g[1] == 0.0          # x == Ex
    assert g[0] > 0 and g[2] < 0


def test_cloud_norm_backward_without_forward():
    with pytest.raises(UsageError):
        cloud_norm_backward(np.ones(3), None)
    layer = CloudNorm(Params(), "c", 4, CloudNormConfig(), np.random.default_rng(0))
    with pytest.raises(UsageError):
        layer.backward(np.ones((1, 1, 4)))


@pytest.mark.parametrize("bad", [dict(noise_divisor=0), dict(epsilon=0), dict(noise_divisor=-1)])
def test_cloud_norm_config_validation(bad):
    with pytest.raises(ValueError):
        CloudNormConfig(**bad)


def test_cloud_norm_layer_train_vs_eval_noise():
    x = np.random.default_rng(1).normal(size=(2, 3, 8))
    layer = CloudNorm(Params(), "c", 8, CloudNormConfig(), np.random.default_rng(0))
    e1, e2 = layer.forward(x), layer.forward(x)
    t1, t2 = layer.forward(x, training=True), layer.forward(x, training=True)
    assert np.array_equal(e1, e2)
    assert not np.array_equal(t1, t2)


# ---- softmax / loss / attention -------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3, rtol=1e-15)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(scale=30, size=(5, 7, 9))
    assert np.abs(softmax(x).sum(-1) - 1).max() <= 1e-12


def test_mse_zero_residual():
    y = np.arange(5.0)
    assert mse_loss(y, y)[0] == 0.0


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss(np.zeros(3), np.zeros(4))


def test_linear_shape_mismatch():
    lin = Linear(Params(), "l", 3, 2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        lin.forward(np.zeros((2, 4)))


def test_attention_single_position_is_value_path():
    rng = np.random.default_rng(0)
    p = Params()
    att = MultiHeadAttention(p, "a", 4, 2, rng)
    x = rng.normal(size=(3, 1, 4))
    v = x @ p.values["a.v.weight"] + p.values["a.v.bias"]
    expected = v @ p.values["a.o.weight"] + p.values["a.o.bias"]
    np.testing.assert_allclose(att.forward(x), expected, rtol=1e-12)


def test_attention_head_divisibility():
    with pytest.raises(ValueError):
        MultiHeadAttention(Params(), "a", 5, 2, np.random.default_rng(0))


# ---- adam -----------------------------------------------------------------

def _scalar_params(value):
    p = Params()
    p.add("w", np.array([value]))
    return p


def test_adam_zero_gradient_leaves_params():
    p = _scalar_params(1.0)
    opt = Adam(p)
    opt.step()
    assert p.values["w"][0] == 1.0


def test_adam_first_step():
    p = _scalar_params(1.0)
    p.grads["w"][:] = 1.0
    Adam(p, lr=0.001).step()
    assert p.values["w"][0] == pytest.approx(1 - 0.001 / (1 + 1e-8), abs=1e-15)


def _reference_adam(p, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_quadratic_bowl_matches_scalar_reference():
    p = _scalar_params(1.0)
    opt = Adam(p, lr=0.01)
    for _ in range(500):
        p.grads["w"][:] = 2 * p.values["w"]
        opt.step()
    assert abs(p.values["w"][0]) < 0.01
    assert p.values["w"][0] == pytest.approx(_reference_adam(1.0, 0.01, 500), abs=1e-12)


def test_adam_rejects_nonfinite_gradient():
    p = _scalar_params(1.0)
    p.grads["w"][:] = np.nan
    with pytest.raises(NonFiniteError, match="'w'"):
        Adam(p).step()


def test_adam_step_index_starts_at_one():
    p = _scalar_params(1.0)
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(1)}, {"w": np.zeros(1)}, 0)


# ---- params / checkpoints -------------------------------------------------

def test_params_grad_shapes_and_zeroing():
    p = Params()
    LayerNorm(p, "ln", 4)
    Linear(p, "l", 4, 3, np.random.default_rng(0))
    for k in p:
        assert p.grads[k].shape == p.values[k].shape
        p.grads[k] += 1
    p.zero_grad()
    assert all(not g.any() for g in p.grads.values())


def test_checkpoint_roundtrip_and_byte_stability(tmp_path):
    def make():
        p = Params()
        Linear(p, "l", 3, 2, np.random.default_rng(7))
        return p

    a, b = make(), make()
    save_checkpoint(tmp_path / "a.json", a, {"d": 3})
    save_checkpoint(tmp_path / "b.json", b, {"d": 3})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    doc = load_checkpoint(tmp_path / "a.json")
    assert doc["config"] == {"d": 3}
    assert [r["name"] for r in doc["params"]] == ["l.weight", "l.bias"]
    for k, v in a.values.items():
        assert np.array_equal(doc["arrays"][k], v)
    json.loads((tmp_path / "a.json").read_text())


def test_gradient_checker_detects_a_wrong_backward():
    from gradcheck import _check_layer

    class Broken(Linear):
        def backward(self, dy):
            dx = super().backward(dy)
            self.p.grads[self.b] *= 1.01       # 1% error in a bias gradient
            return dx

    rng = np.random.default_rng(0)
    p = Params()
    layer = Broken(p, "lin", 4, 3, rng)
    errs = _check_layer(layer, p, rng.standard_normal((2, 3, 4)), rng)
    assert errs["lin.bias"] > 1e-3 and errs["lin.weight"] <= TOL
