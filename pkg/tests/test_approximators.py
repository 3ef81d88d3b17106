"""前向、反向、参数布局与检查点测试"""

import numpy as np
import pytest

from src.approximators import (Activation, DimensionMismatchError, MlpShape, activate, build_layout,
                               forward, grad_input, grad_params, init_params, jacobian_params,
                               load_checkpoint, numeric_grad, param_grad_inner_product,
                               params_from_arrays, save_checkpoint, zeros_like_shape)
from src.gradcheck import run_suite


def test_single_linear_layer_forward():
    shape = MlpShape(1, (), 1)
    params = params_from_arrays(shape, {"W0": [[2.0]], "b0": [[0.5]]})
    np.testing.assert_allclose(forward(params, shape, np.array([1.0])), [2.5])


def test_activation_values():
    assert activate(Activation.ELU, np.array([0.0]))[0] == 0.0
    assert activate(Activation.SCALED_SIGMOID, np.array([0.0]), 10.0)[0] == 5.0


def test_linear_gradients(linear_actor_shape):
    params = params_from_arrays(linear_actor_shape, {"W0": [[0.5]]})
    np.testing.assert_allclose(grad_params(params, linear_actor_shape, np.array([1.0]), np.array([1.0])), [1.0])
    np.testing.assert_allclose(grad_input(params, linear_actor_shape, np.array([1.0]), np.array([1.0])), [0.5])
    np.testing.assert_array_equal(
        grad_params(params, linear_actor_shape, np.array([1.0]), np.array([0.0])), [0.0])


def test_zero_weights_zero_input_gradient():
    shape = MlpShape(3, (4,), 1)
    params = zeros_like_shape(shape)
    np.testing.assert_array_equal(grad_input(params, shape, np.ones(3), np.array([1.0])), np.zeros(3))


def test_inner_product_of_linear_critic(linear_critic_shape):
    a = params_from_arrays(linear_critic_shape, {"W0": [[0.5], [0.0]]})
    b = params_from_arrays(linear_critic_shape, {"W0": [[-3.0], [2.0]]})
    assert param_grad_inner_product(a, b, linear_critic_shape, np.array([1.0, 0.0])) == pytest.approx(1.0)


def test_inner_product_matches_explicit_dot():
    rng = np.random.default_rng(1)
    shape = MlpShape(3, (5, 4), 1)
    a, b = init_params(shape, rng), init_params(shape, rng)
    x = rng.normal(size=(4, 3))
    ones = np.ones((4, 1))
    expected = np.einsum("bp,bp->b", grad_params(a, shape, x, ones, per_item=True),
                         grad_params(b, shape, x, ones, per_item=True))
    np.testing.assert_allclose(param_grad_inner_product(a, b, shape, x), expected)
    assert param_grad_inner_product(a, a, shape, x[0]) >= 0.0


def test_per_item_gradients_sum_to_batch_gradient():
    rng = np.random.default_rng(2)
    shape = MlpShape(2, (3,), 2, hidden_activation="tanh")
    params = init_params(shape, rng)
    x = rng.normal(size=(5, 2))
    cot = rng.normal(size=(5, 2))
    per_item = grad_params(params, shape, x, cot, per_item=True)
    np.testing.assert_allclose(per_item.sum(axis=0), grad_params(params, shape, x, cot))


def test_jacobian_rows_are_output_gradients():
    rng = np.random.default_rng(3)
    shape = MlpShape(2, (3,), 2)
    params = init_params(shape, rng)
    x = rng.normal(size=(2, 2))
    jac = jacobian_params(params, shape, x)
    assert jac.shape == (2, 2, len(params))
    cot = np.array([[0.0, 1.0], [0.0, 1.0]])
    np.testing.assert_allclose(jac[:, 1, :], grad_params(params, shape, x, cot, per_item=True))


def test_layer_norm_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    shape = MlpShape(3, (4, 3), 1, layer_norm=True)
    params = init_params(shape, rng)
    x = rng.normal(size=(2, 3))
    cot = np.ones((2, 1))
    expected = numeric_grad(lambda v: float(np.sum(forward(params.with_values(v), shape, x))), params.values)
    np.testing.assert_allclose(grad_params(params, shape, x, cot), expected, rtol=1e-6, atol=1e-8)


def test_dimension_mismatch():
    shape = MlpShape(2, (3,), 1)
    params = init_params(shape, 0)
    with pytest.raises(DimensionMismatchError):
        forward(params, shape, np.ones(3))
    with pytest.raises(DimensionMismatchError):
        grad_params(params, shape, np.ones((2, 2)), np.ones((3, 1)))
    with pytest.raises(DimensionMismatchError):
        forward(params, MlpShape(2, (4,), 1), np.ones(2))


def test_checkpoint_restores_parameters(tmp_path):
    shape = MlpShape(2, (3,), 1)
    params = init_params(shape, 5)
    save_checkpoint(tmp_path / "actor.ckpt", params)
    restored = load_checkpoint(tmp_path / "actor.ckpt")
    assert restored.layout == params.layout
    np.testing.assert_array_equal(restored.values, params.values)

    # 纯文本头 + 小端 float64
    data = (tmp_path / "actor.ckpt").read_bytes()
    header = data.split(b"\n")[:5]
    assert header == [b"mlp-checkpoint 4", b"W0 2 3", b"b0 1 3", b"W1 3 1", b"b1 1 1"]
    assert data.endswith(params.values.astype("<f8").tobytes())


def test_layout_is_shared_per_shape():
    assert build_layout(MlpShape(2, (3,), 1)) is build_layout(MlpShape(2, (3,), 1))


def test_approx_gradcheck_suite():
    report = run_suite("approx", 100, seed=0)
    assert report.passed, report.summary()
