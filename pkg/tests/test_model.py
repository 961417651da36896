import math

import numpy as np
import pytest

from hierdro import model
from hierdro.errors import ParameterError
from hierdro.model import (
    LINEAR,
    MLP1,
    ModelParams,
    ModelSpec,
    forward,
    grad_wrt_latent,
    grad_wrt_params,
    init_params,
)
from hierdro.verification import fd_latent_gradient, fd_param_gradient


def scalar_reference_loss(theta, x, y):
    """Independent plain-Python re-evaluation of the forward pass."""
    x = [float(v) for v in x]
    if theta.w_hidden is not None:
        hidden = []
        for row, b in zip(theta.w_hidden, theta.b_hidden):
            s = sum(float(w) * v for w, v in zip(row, x)) + float(b)
            hidden.append(max(0.0, s))
        x = hidden
    logits = []
    for row, b in zip(theta.w_out, theta.b_out):
        logits.append(sum(float(w) * v for w, v in zip(row, x)) + float(b))
    m = max(logits)
    total = sum(math.exp(v - m) for v in logits)
    return -(logits[y] - m - math.log(total))


def random_theta(rng, architecture, d=6, k=3, h=5):
    return init_params(ModelSpec(architecture, hidden_width=h), d, k, seed=int(rng.integers(2**31)))


def test_zero_linear_model_gives_log2():
    theta = ModelParams(w_out=np.zeros((2, 4)), b_out=np.zeros(2))
    for y in (0, 1):
        rec = forward(theta, np.array([3.0, -1.0, 0.5, 2.0]), y)
        assert abs(rec.loss - math.log(2)) < 1e-15


def test_zero_hidden_layer_kills_latent():
    theta = ModelParams(
        w_out=np.ones((2, 3)), b_out=np.zeros(2),
        w_hidden=np.zeros((3, 4)), b_hidden=np.zeros(3),
    )
    rec = forward(theta, np.array([5.0, -2.0, 1.0, 9.0]), 0)
    np.testing.assert_array_equal(rec.z, np.zeros(3))


def test_loss_matches_scalar_reference():
    rng = np.random.default_rng(0)
    for arch in (LINEAR, MLP1):
        for _ in range(30):
            theta = random_theta(rng, arch)
            x = rng.normal(size=6)
            y = int(rng.integers(3))
            rec = forward(theta, x, y)
            assert abs(rec.loss - scalar_reference_loss(theta, x, y)) < 1e-12


def test_uniform_logits_latent_gradient():
    w = np.array([[1.0, 2.0], [3.0, -1.0]])
    theta = ModelParams(w_out=w, b_out=np.zeros(2))
    grad = grad_wrt_latent(theta, np.zeros(2), 0)
    np.testing.assert_allclose(grad, w.T @ np.array([-0.5, 0.5]), atol=1e-15)


def test_zero_weights_zero_latent_gradient():
    theta = ModelParams(w_out=np.zeros((3, 4)), b_out=np.ones(3))
    np.testing.assert_array_equal(grad_wrt_latent(theta, np.ones(4), 1), np.zeros(4))


def test_latent_gradient_parallel_to_weight_difference():
    # Binary output layer: the gradient always lies along w_1 - w_0.
    rng = np.random.default_rng(1)
    for _ in range(20):
        theta = ModelParams(w_out=rng.normal(size=(2, 3)), b_out=rng.normal(size=2))
        z = rng.normal(size=3)
        y = int(rng.integers(2))
        grad = grad_wrt_latent(theta, z, y)
        fd = fd_latent_gradient(theta, z, y)
        assert np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-8) <= 1e-4
        direction = theta.w_out[1] - theta.w_out[0]
        cross = grad - (grad @ direction) / (direction @ direction) * direction
        assert np.linalg.norm(cross) < 1e-12


def test_param_gradient_matches_backprop_when_unperturbed():
    rng = np.random.default_rng(2)
    theta = random_theta(rng, MLP1)
    x = rng.normal(size=6)
    y = 1
    z = model.latent(theta, x)
    grads = grad_wrt_params(theta, z, x, y)
    fd = fd_param_gradient(theta, z, x, y, backprop_through_feature=True)
    got = model.flatten_grads(grads)
    assert np.linalg.norm(got - fd) / np.linalg.norm(fd) <= 1e-4
    # Hidden gradients are populated in the unperturbed case.
    assert np.linalg.norm(grads.w_hidden) > 0


def test_param_gradient_detaches_hidden_on_perturbed_latent():
    rng = np.random.default_rng(3)
    theta = random_theta(rng, MLP1)
    x = rng.normal(size=6)
    z = model.latent(theta, x) + 0.3
    grads = grad_wrt_params(theta, z, x, 0)
    np.testing.assert_array_equal(grads.w_hidden, np.zeros_like(theta.w_hidden))
    np.testing.assert_array_equal(grads.b_hidden, np.zeros_like(theta.b_hidden))
    fd = fd_param_gradient(theta, z, x, 0, backprop_through_feature=False)
    got = model.flatten_grads(grads)
    assert np.linalg.norm(got - fd) / np.linalg.norm(fd) <= 1e-4


def test_param_gradient_feature_path_flag():
    rng = np.random.default_rng(4)
    theta = random_theta(rng, MLP1)
    x = rng.normal(size=6)
    z = model.latent(theta, x) + rng.normal(scale=0.2, size=5)
    grads = grad_wrt_params(theta, z, x, 2, backprop_through_feature=True)
    fd = fd_param_gradient(theta, z, x, 2, backprop_through_feature=True)
    got = model.flatten_grads(grads)
    assert np.linalg.norm(got - fd) / np.linalg.norm(fd) <= 1e-4
    assert np.linalg.norm(grads.w_hidden) > 0


def test_saturated_loss_has_vanishing_gradient():
    theta = ModelParams(w_out=np.array([[100.0, 0.0], [-100.0, 0.0]]), b_out=np.zeros(2))
    z = np.array([10.0, 0.0])
    rec = forward(theta, z, 0, with_grads=True)
    assert rec.loss < 1e-12
    assert np.linalg.norm(rec.grad_z) < 1e-10
    assert np.linalg.norm(model.flatten_grads(rec.grad_theta)) < 1e-10


def test_loss_finite_for_huge_logits():
    theta = ModelParams(w_out=np.array([[1e3, 0.0], [-1e3, 0.0]]), b_out=np.zeros(2))
    for y in (0, 1):
        loss = model.cross_entropy(model.logits_from_latent(theta, np.array([1.0, 0.0])), y)
        assert math.isfinite(loss)


def test_linear_loss_midpoint_convexity():
    rng = np.random.default_rng(5)
    x = rng.normal(size=4)
    y = 1
    for _ in range(50):
        a = init_params(ModelSpec(LINEAR), 4, 3, seed=int(rng.integers(2**31)))
        b = init_params(ModelSpec(LINEAR), 4, 3, seed=int(rng.integers(2**31)))
        mid = model.unflatten_params(
            (model.flatten_params(a) + model.flatten_params(b)) / 2.0, a)
        f_mid = forward(mid, x, y).loss
        f_avg = (forward(a, x, y).loss + forward(b, x, y).loss) / 2.0
        assert f_mid <= f_avg + 1e-9


def test_batched_forward_matches_per_example():
    rng = np.random.default_rng(6)
    theta = random_theta(rng, MLP1)
    xs = rng.normal(size=(7, 6))
    ys = rng.integers(0, 3, size=7)
    batch_losses = model.cross_entropy(
        model.logits_from_latent(theta, model.latent(theta, xs)), ys)
    for i in range(7):
        assert abs(batch_losses[i] - forward(theta, xs[i], int(ys[i])).loss) < 1e-14


def test_batched_param_gradient_is_mean():
    rng = np.random.default_rng(7)
    theta = random_theta(rng, LINEAR, k=2)
    xs = rng.normal(size=(5, 6))
    ys = rng.integers(0, 2, size=5)
    batch = grad_wrt_params(theta, xs, xs, ys)
    per = [model.flatten_grads(grad_wrt_params(theta, xs[i], xs[i], int(ys[i]))) for i in range(5)]
    np.testing.assert_allclose(model.flatten_grads(batch), np.mean(per, axis=0), atol=1e-14)


def test_init_is_seeded_and_bounded():
    spec = ModelSpec(MLP1, hidden_width=16)
    a = init_params(spec, 10, 2, seed=9)
    b = init_params(spec, 10, 2, seed=9)
    assert model.params_equal(a, b)
    assert not model.params_equal(a, init_params(spec, 10, 2, seed=10))
    assert np.max(np.abs(a.w_hidden)) <= 1.0 / math.sqrt(10)
    assert np.max(np.abs(a.w_out)) <= 1.0 / math.sqrt(16)


def test_checkpoint_roundtrip(tmp_path):
    for arch in (LINEAR, MLP1):
        theta = init_params(ModelSpec(arch, hidden_width=4), 3, 2, seed=1)
        path = tmp_path / f"{arch}.json"
        model.save_params(theta, path)
        loaded = model.load_params(path)
        assert model.params_equal(theta, loaded)
        assert loaded.architecture == arch


def test_shape_errors():
    theta = ModelParams(w_out=np.zeros((2, 3)), b_out=np.zeros(2))
    with pytest.raises(ParameterError):
        model.latent(theta, np.zeros(4))
    with pytest.raises(ParameterError):
        model.logits_from_latent(theta, np.zeros(5))
