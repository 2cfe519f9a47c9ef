import numpy as np
import pytest
from gradcheck import fd_max_rel_err
from numpy.testing import assert_allclose

from ecnlab import nn


def make_net(sizes, seed=0):
    return nn.init_mlp(np.random.default_rng(seed), sizes)


def test_init_shapes_and_bounds():
    p = make_net([9, 24, 24])
    assert [w.shape for w in p.weights] == [(24, 9), (24, 24)]
    assert [b.shape for b in p.biases] == [(24,), (24,)]
    assert p.activations == [nn.RELU, nn.LINEAR]
    assert np.abs(p.weights[0]).max() <= 1 / 3.0  # 1/sqrt(9)
    assert np.abs(p.weights[1]).max() <= 1 / np.sqrt(24)


def test_forward_identity_linear_layer():
    p = nn.MlpParams([np.eye(3)], [np.zeros(3)], [nn.LINEAR])
    x = np.array([1.0, -2.0, 3.0])
    assert_allclose(nn.forward(p, x), x)
    p.biases[0][:] = 1.0
    assert_allclose(nn.forward(p, x), x + 1.0)


def test_forward_relu_clips():
    p = nn.MlpParams([np.eye(2)], [np.zeros(2)], [nn.RELU])
    assert_allclose(nn.forward(p, np.array([-1.0, 2.0])), [0.0, 2.0])


def test_forward_batch_matches_vector():
    p = make_net([5, 7, 3], seed=1)
    xs = np.random.default_rng(2).normal(size=(6, 5))
    batch = nn.forward(p, xs)
    stacked = np.stack([nn.forward(p, x) for x in xs])
    assert_allclose(batch, stacked)


def test_linear_net_exact_gradients():
    rng = np.random.default_rng(3)
    p = nn.MlpParams([rng.normal(size=(4, 5))], [rng.normal(size=4)], [nn.LINEAR])
    x = rng.normal(size=5)
    up = rng.normal(size=4)
    grads, dx = nn.backward(p, x, up)
    assert_allclose(grads.weights[0], np.outer(up, x), rtol=1e-12)
    assert_allclose(grads.biases[0], up, rtol=1e-12)
    assert_allclose(dx, up @ p.weights[0], rtol=1e-12)


@pytest.mark.parametrize("sizes", [[9, 24, 24], [24, 120], [7, 16, 16, 3]])
def test_backward_matches_central_differences(sizes):
    rng = np.random.default_rng(sum(sizes))
    p = make_net(sizes, seed=sum(sizes))
    x = rng.normal(size=sizes[0])
    up = rng.normal(size=sizes[-1])
    grads, _ = nn.backward(p, x, up)

    def loss():
        return float(np.sum(up * nn.forward(p, x)))

    err = fd_max_rel_err(p.weights + p.biases, loss, grads.weights + grads.biases)
    assert err < 1e-4


def test_backward_batch_sums_over_samples():
    p = make_net([4, 6, 2], seed=5)
    rng = np.random.default_rng(6)
    xs = rng.normal(size=(3, 4))
    ups = rng.normal(size=(3, 2))
    batch_grads, dxs = nn.backward(p, xs, ups)
    acc = nn.zeros_like_grads(p)
    for x, up in zip(xs, ups):
        g, dx = nn.backward(p, x, up)
        nn.add_grads(acc, g)
    assert_allclose(batch_grads.weights[0], acc.weights[0], rtol=1e-12)
    assert_allclose(batch_grads.biases[1], acc.biases[1], rtol=1e-12)
    assert dxs.shape == xs.shape


def test_adam_first_step_is_signed_lr():
    p = nn.MlpParams([np.array([[1.0]])], [np.array([0.0])], [nn.LINEAR])
    opt = nn.init_optimizer(p, lr=1e-3)
    g = nn.MlpGrads([np.array([[0.5]])], [np.array([-2.0])])
    assert nn.update(p, opt, g)
    # bias-corrected first step: theta -= lr * g / (|g| + eps)
    assert_allclose(p.weights[0][0, 0], 1.0 - 1e-3 * (0.5 / (0.5 + 1e-8)), rtol=1e-12)
    assert_allclose(p.biases[0][0], 0.0 + 1e-3 * (2.0 / (2.0 + 1e-8)), rtol=1e-12)
    assert opt.step == 1


def test_adam_descends_quadratic():
    rng = np.random.default_rng(7)
    p = make_net([6, 12, 4], seed=8)
    opt = nn.init_optimizer(p, lr=1e-2)
    xs = rng.normal(size=(32, 6))
    target = rng.normal(size=(32, 4))

    def loss_and_grads():
        y, cache = nn.forward_with_cache(p, xs)
        diff = y - target
        grads, _ = nn.backward(p, xs, 2.0 * diff / len(xs), cache=cache)
        return float(np.mean(diff**2)), grads

    first, _ = loss_and_grads()
    for _ in range(800):
        _, g = loss_and_grads()
        nn.update(p, opt, g)
    final, _ = loss_and_grads()
    assert final < 0.05 * first


def test_update_skips_non_finite():
    p = make_net([3, 3], seed=9)
    before = p.copy()
    opt = nn.init_optimizer(p)
    bad = nn.MlpGrads([np.full((3, 3), np.nan)], [np.zeros(3)])
    assert not nn.update(p, opt, bad)
    assert opt.skipped == 1 and opt.step == 0
    assert_allclose(p.weights[0], before.weights[0])


def test_checkpoint_round_trip(tmp_path):
    p = make_net([9, 24, 24], seed=10)
    doc = {"kind": "test-net", "seed": 10, "net": nn.params_to_doc(p)}
    path = tmp_path / "net.json"
    nn.save_checkpoint(path, doc)
    loaded = nn.load_checkpoint(path)
    assert loaded["schema_version"] == nn.CHECKPOINT_SCHEMA
    q = nn.params_from_doc(loaded["net"])
    for a, b in zip(p.weights, q.weights):
        assert_allclose(a, b, rtol=0)  # exact float round trip
    assert q.activations == p.activations


def test_checkpoint_rejects_bad_docs(tmp_path):
    p = make_net([3, 2], seed=11)
    doc = nn.params_to_doc(p)
    doc["layers"][0]["weights"] = doc["layers"][0]["weights"][:-1]
    with pytest.raises(nn.CheckpointError):
        nn.params_from_doc(doc)
    with pytest.raises(nn.CheckpointError):
        nn.params_from_doc({"layers": []})
    path = tmp_path / "bad.json"
    nn.save_checkpoint(path, {"schema_version": 99})
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path)


def test_init_validates_activations():
    with pytest.raises(ValueError):
        nn.init_mlp(np.random.default_rng(0), [4])
    with pytest.raises(ValueError):
        nn.init_mlp(np.random.default_rng(0), [4, 3], activations=["gelu"])
