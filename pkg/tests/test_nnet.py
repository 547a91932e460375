import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from augsearch.errors import ConfigError, DataFormatError, TrainingError
from augsearch.nnet import (
    Network,
    TrainConfig,
    batch_grad,
    checkpoint_bytes,
    conv_arch,
    forward,
    init_network,
    load_checkpoint,
    loss_and_grad,
    mlp_arch,
    per_example_grads,
    pretrain,
    save_checkpoint,
    standardize_images,
)

SHAPE = (3, 8, 8)


def nets(seed=0, standardize=False):
    rng = np.random.default_rng(seed)
    return [
        init_network(mlp_arch(SHAPE, 4, (16, 8), standardize), rng),
        init_network(conv_arch(SHAPE, 4, (4, 6), standardize), rng),
    ]


def torch_reference(net, X, labels):
    """Logits, mean loss and flat gradient from an independent torch model."""
    torch = pytest.importorskip("torch")
    F = torch.nn.functional
    params = [torch.tensor(p, requires_grad=True) for p in net.unflatten()]
    x = torch.tensor(X)
    if net.arch.get("standardize"):
        mu = x.mean(dim=(1, 2, 3), keepdim=True)
        var = x.var(dim=(1, 2, 3), unbiased=False, keepdim=True)
        x = (x - mu) / torch.sqrt(var + 1e-4)
    if net.arch["kind"] == "mlp":
        a = x.reshape(len(x), -1)
        for i in range(0, len(params) - 2, 2):
            a = F.relu(a @ params[i].T + params[i + 1])
        out = a @ params[-2].T + params[-1]
    else:
        c_in = SHAPE[0]
        w1 = params[0].reshape(params[0].shape[0], c_in, 3, 3)
        a = F.max_pool2d(F.relu(F.conv2d(x, w1, params[1], padding=1)), 2)
        w2 = params[2].reshape(params[2].shape[0], w1.shape[0], 3, 3)
        a = F.relu(F.conv2d(a, w2, params[3], padding=1)).mean(dim=(2, 3))
        out = a @ params[4].T + params[5]
    loss = F.cross_entropy(out, torch.tensor(labels))
    loss.backward()
    grad = np.concatenate([p.grad.numpy().ravel() for p in params])
    return out.detach().numpy(), float(loss.detach()), grad


@pytest.mark.parametrize("standardize", [False, True])
def test_forward_and_grad_match_torch(standardize):
    rng = np.random.default_rng(1)
    X = rng.random((5,) + SHAPE)
    labels = rng.integers(0, 4, size=5)
    for net in nets(2, standardize):
        logits_ref, loss_ref, grad_ref = torch_reference(net, X, labels)
        np.testing.assert_allclose(net.logits(X), logits_ref, atol=1e-10)
        np.testing.assert_allclose(batch_grad(net, X, labels), grad_ref, atol=1e-10)
        losses, _ = net.factors(X, labels)
        assert losses.mean() == pytest.approx(loss_ref, abs=1e-12)


def test_zero_weights_give_zero_scores_and_log_c_loss():
    net = Network(mlp_arch(SHAPE, 5))
    img = np.random.default_rng(0).random(SHAPE)
    np.testing.assert_array_equal(forward(net, img), np.zeros(5))
    loss, _ = loss_and_grad(net, img, 2)
    assert loss == pytest.approx(math.log(5), abs=1e-15)


def test_finite_difference_gradient():
    rng = np.random.default_rng(3)
    for net in nets(3):
        img = rng.random(SHAPE)
        label = int(rng.integers(4))
        _, g = loss_and_grad(net, img, label)
        w0 = net.w.copy()
        eps = 1e-4
        worst = 0.0
        for j in rng.choice(net.D, size=100, replace=False):
            net.w = w0.copy()
            net.w[j] += eps
            lp, _ = loss_and_grad(net, img, label)
            net.w = w0.copy()
            net.w[j] -= eps
            lm, _ = loss_and_grad(net, img, label)
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(g[j] - fd) / max(abs(fd), abs(g[j]), 1e-6))
        net.w = w0
        assert worst < 1e-3


def test_determinism():
    net = nets(4)[1]
    img = np.random.default_rng(4).random(SHAPE)
    assert np.array_equal(forward(net, img), forward(net, img))
    assert np.array_equal(loss_and_grad(net, img, 1)[1], loss_and_grad(net, img, 1)[1])


def test_batch_grad_identities():
    rng = np.random.default_rng(5)
    for net in nets(5):
        X = rng.random((8,) + SHAPE)
        y = rng.integers(0, 4, size=8)
        single = loss_and_grad(net, X[0], int(y[0]))[1]
        np.testing.assert_array_equal(batch_grad(net, X[:1], y[:1]), single)
        np.testing.assert_allclose(batch_grad(net, np.repeat(X[:1], 4, axis=0), np.repeat(y[:1], 4)),
                                   single, atol=1e-14)
        explicit = np.mean([loss_and_grad(net, X[i], int(y[i]))[1] for i in range(8)], axis=0)
        np.testing.assert_allclose(batch_grad(net, X, y), explicit, atol=1e-7)
        # concatenated batches give the size-weighted mean
        a, b = batch_grad(net, X[:3], y[:3]), batch_grad(net, X[3:], y[3:])
        np.testing.assert_allclose(batch_grad(net, X, y), (3 * a + 5 * b) / 8, atol=1e-7)


def test_per_example_factor_algebra():
    rng = np.random.default_rng(6)
    net = nets(6)[1]
    X = rng.random((6,) + SHAPE)
    y = rng.integers(0, 4, size=6)
    G = per_example_grads(net, X, y)
    _, facs = net.factors(X, y)
    W = rng.random((2, 3))
    np.testing.assert_allclose(net.weighted_grads(facs, W), (W.reshape(-1, 1) * G).reshape(2, 3, -1).sum(1),
                               atol=1e-12)
    U = rng.normal(size=(2, net.D))
    np.testing.assert_allclose(net.grad_dots(facs, U), np.einsum("smd,sd->sm", G.reshape(2, 3, -1), U),
                               atol=1e-10)


def test_errors():
    net = nets(7)[0]
    with pytest.raises(ConfigError):
        loss_and_grad(net, np.zeros(SHAPE), 4)
    with pytest.raises(ConfigError):
        forward(net, np.zeros((1, 8, 8)))
    with pytest.raises(ConfigError):
        batch_grad(net, np.zeros((0,) + SHAPE), np.zeros(0, dtype=int))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_flatten_round_trip(seed):
    net = nets(0)[1]
    x = np.random.default_rng(seed).normal(size=net.D)
    assert np.array_equal(Network.flatten(net.unflatten(x)), x)
    assert net.D == sum(p.size for p in net.unflatten(x))


def test_standardize_images():
    X = np.random.default_rng(8).random((4,) + SHAPE) * 0.5 + 0.2
    Z = standardize_images(X)
    np.testing.assert_allclose(Z.mean(axis=(1, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(standardize_images(0.5 * X + 0.1), standardize_images(X), atol=0.02)


def separable_set(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    X = rng.random((n,) + SHAPE) * 0.3
    X[y == 1, 0] += 0.6
    return X, y


def test_pretrain_separable():
    X, y = separable_set()
    net = init_network(mlp_arch(SHAPE, 2, (16,)), np.random.default_rng(0))
    res = pretrain(net, X, y, TrainConfig(epochs=5, batch_size=16, lr=0.05))
    assert res.final_accuracy > 0.95
    assert res.final_loss < res.initial_loss
    assert [c["epoch"] for c in res.curve] == list(range(6))


def test_pretrain_zero_epochs_and_determinism():
    X, y = separable_set()
    net = init_network(mlp_arch(SHAPE, 2, (16,)), np.random.default_rng(0))
    res = pretrain(net, X, y, TrainConfig(epochs=0))
    assert np.array_equal(res.net.w, net.w)
    cfg = TrainConfig(epochs=2, batch_size=16, lr=0.05, seed=3)
    assert np.array_equal(pretrain(net, X, y, cfg).net.w, pretrain(net, X, y, cfg).net.w)


def test_pretrain_divergence_raises():
    X, y = separable_set()
    net = init_network(mlp_arch(SHAPE, 2, (16,)), np.random.default_rng(0))
    with np.errstate(all="ignore"), pytest.raises(TrainingError) as info:
        pretrain(net, X * 1e150, y, TrainConfig(epochs=2, lr=1e10))
    assert info.value.epoch is not None


def test_checkpoint_round_trip(tmp_path):
    for net in nets(9, standardize=True):
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert back.arch == net.arch
        assert np.array_equal(back.w, net.w)
        assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "net.ckpt"
    blob = checkpoint_bytes(nets(10)[0])
    path.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(DataFormatError):
        load_checkpoint(path)
    path.write_bytes(blob[:-8])
    with pytest.raises(DataFormatError):
        load_checkpoint(path)
