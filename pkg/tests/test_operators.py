import numpy as np
import pytest
from hypothesis import given, strategies as st

from cmdis import ConfigError, MeasurementOperator, MlpNetwork, ShapeError, TargetError, train_mlp
from cmdis.checks import central_difference


@pytest.fixture
def net(rng):
    return MlpNetwork.init([2, 6, 6, 5], rng)


def test_forward_shapes(net, rng):
    assert net.forward(rng.normal(size=2)).shape == (5,)
    assert net.forward(rng.normal(size=(3, 4, 2))).shape == (3, 4, 5)
    assert net.sizes == [2, 6, 6, 5] and net.n_classes == 5


@pytest.mark.parametrize("out_index", range(5))
def test_vjp_matches_differences(net, rng, out_index):
    x = rng.normal(size=2)
    g = np.eye(5)[out_index]
    fd = central_difference(lambda z: net.forward(z) @ g, x)
    np.testing.assert_allclose(net.vjp(x, g), fd, rtol=1e-5, atol=1e-8)


def test_vjp_batched(net, rng):
    x, g = rng.normal(size=(4, 2)), rng.normal(size=(4, 5))
    batch = net.vjp(x, g)
    for i in range(4):
        np.testing.assert_allclose(batch[i], net.vjp(x[i], g[i]), atol=1e-14)


def test_parameter_gradients_by_differences(net, rng):
    x, g = rng.normal(size=(3, 2)), rng.normal(size=(3, 5))
    _, gw, gb = net._backward(net._activations(x), g, True)
    w = net.weights[1]
    i, j, h = 2, 3, 1e-6
    w[i, j] += h
    up = (net.forward(x) * g).sum()
    w[i, j] -= 2 * h
    down = (net.forward(x) * g).sum()
    w[i, j] += h
    assert gw[1][i, j] == pytest.approx((up - down) / (2 * h), rel=1e-6)
    assert gb[0].shape == (6,)


def test_json_roundtrip(net, tmp_path, rng):
    path = tmp_path / "net.json"
    net.save(path)
    back = MlpNetwork.load(path)
    x = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(back.forward(x), net.forward(x))


def test_json_rejects_other_activations():
    with pytest.raises(ConfigError):
        MlpNetwork.from_json('{"activation": "relu", "layers": []}')


def test_linear_loss_and_gradient(rng):
    a = rng.normal(size=(3, 2))
    op = MeasurementOperator.linear(a)
    x, y = rng.normal(size=2), rng.normal(size=3)
    loss, grad = op.loss_and_grad(x, y)
    assert loss == pytest.approx(0.5 * np.sum((a @ x - y) ** 2))
    np.testing.assert_allclose(grad, central_difference(lambda z: op.loss(z, y), x), atol=1e-8)


def test_cross_entropy_gradient(net, rng):
    op = MeasurementOperator.classifier(net)
    for k in range(5):
        x = rng.normal(size=2)
        loss, grad = op.loss_and_grad(x, k)
        logits = net.forward(x)
        assert loss == pytest.approx(np.log(np.exp(logits).sum()) - logits[k])
        np.testing.assert_allclose(grad, central_difference(lambda z: op.loss(z, k), x), rtol=1e-5, atol=1e-9)


def test_cross_entropy_batched_targets(net, rng):
    op = MeasurementOperator.classifier(net)
    x = rng.normal(size=(5, 2))
    labels = np.arange(5)
    loss, grad = op.loss_and_grad(x, labels)
    for i in range(5):
        li, gi = op.loss_and_grad(x[i], int(labels[i]))
        assert loss[i] == pytest.approx(li)
        np.testing.assert_allclose(grad[i], gi)


@pytest.mark.parametrize("bad", [5, -1, 1.5, "a"])
def test_bad_class_index(net, bad):
    with pytest.raises(TargetError):
        MeasurementOperator.classifier(net).loss(np.zeros(2), bad)


def test_mse_target_shape(rng):
    with pytest.raises(TargetError):
        MeasurementOperator.linear(np.eye(2)).loss(np.zeros(2), np.zeros(3))


def test_operator_input_dimension():
    with pytest.raises(ShapeError):
        MeasurementOperator.linear(np.eye(2)).apply(np.zeros(3))


@pytest.mark.parametrize("kwargs", [
    dict(kind="linear"), dict(kind="mlp"), dict(kind="conv"),
    dict(kind="linear", matrix=np.eye(2), distance="cross_entropy"),
    dict(kind="linear", matrix=np.eye(2), smoothing_tau=-1.0),
    dict(kind="linear", matrix=[[np.inf, 0.0]]),
])
def test_operator_validation(kwargs):
    with pytest.raises(ConfigError):
        MeasurementOperator(**kwargs)


def test_smoothing_noise_shared_between_loss_and_gradient(rng):
    op = MeasurementOperator.linear(np.eye(2), smoothing_tau=0.3)
    x, y = np.zeros(2), np.ones(2)
    loss, grad = op.loss_and_grad(x, y, np.random.default_rng(5))
    noise = 0.3 * np.random.default_rng(5).standard_normal(2)
    assert loss == pytest.approx(0.5 * np.sum((noise - y) ** 2))
    np.testing.assert_allclose(grad, noise - y)


def test_smoothing_requires_stream():
    with pytest.raises(ValueError):
        MeasurementOperator.linear(np.eye(2), smoothing_tau=0.1).apply(np.zeros(2))


def test_training_reaches_voronoi_labels(toy):
    net = train_mlp(toy, samples=2000, epochs=20, seed=0)
    x = toy.sample(np.random.default_rng(7), 2000)
    assert np.mean(net.predict(x) == toy.nearest_mode(x)) > 0.99


def test_training_is_deterministic(toy):
    a = train_mlp(toy, samples=100, epochs=3, seed=4)
    b = train_mlp(toy, samples=100, epochs=3, seed=4)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)


def test_training_needs_enough_samples(toy):
    with pytest.raises(ConfigError):
        train_mlp(toy, samples=20)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 4))
def test_cross_entropy_is_nonnegative(a, b, k):
    net = MlpNetwork.init([2, 4, 5], np.random.default_rng(0))
    loss = MeasurementOperator.classifier(net).loss(np.array([a, b]), k)
    assert loss >= 0 and np.isfinite(loss)
