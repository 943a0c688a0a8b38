import numpy as np
import pytest

from deeppcr.data import synthetic_classification
from deeppcr.linalg import ShapeError
from deeppcr.newton import NewtonConfig
from deeppcr.nn import (
    MlpParams,
    SgdConfig,
    activation,
    activation_grad,
    init_params,
    init_resnet,
    sgd_step,
    softmax_xent,
)
from deeppcr.training import (
    LOG_COLUMNS,
    resnet_forward_deeppcr,
    resnet_forward_sequential,
    resnet_gradients,
    train_resnet,
)


def arrays_equal(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))


def small_data(n=200, dim=12, classes=3, seed=0):
    return synthetic_classification(n, feature_dim=dim, class_count=classes, seed=seed)


def test_init_same_seed_bitwise_identical():
    a = init_params([5, 8, 8, 3], "relu", seed=3)
    b = init_params([5, 8, 8, 3], "relu", seed=3)
    assert arrays_equal(a, b)
    assert not arrays_equal(a, init_params([5, 8, 8, 3], "relu", seed=4))


@pytest.mark.parametrize("widths", [[5, 0, 3], [0, 4], [4]])
def test_init_rejects_zero_width(widths):
    with pytest.raises(ValueError):
        init_params(widths, "relu")


def test_relu_weight_variance_is_kaiming():
    p = init_params([16] * 50, "relu", seed=0)
    draws = np.concatenate([w.ravel() for w in p.weights[1:]])
    assert draws.size >= 10_000
    assert abs(draws.var() / (2.0 / 16) - 1.0) <= 0.3
    assert not any(np.any(b) for b in p.biases)


def test_glorot_for_smooth_activations():
    p = init_params([16] * 50, "tanh", seed=0)
    draws = np.concatenate([w.ravel() for w in p.weights[1:]])
    assert abs(draws.var() / (2.0 / 32) - 1.0) <= 0.3


def test_fan_in_scheme_bounds():
    p = init_params([9, 9, 9], "relu", seed=1, scheme="fan_in")
    for w, b in zip(p.weights, p.biases):
        assert np.max(np.abs(w)) <= 1 / 3 and np.max(np.abs(b)) <= 1 / 3
    assert np.any(p.biases[0])
    with pytest.raises(ValueError):
        init_params([3, 3], "relu", scheme="bogus")


def test_params_shape_chain_validated():
    with pytest.raises(ShapeError):
        MlpParams((np.zeros((3, 2)), np.zeros((2, 4))), (np.zeros(3), np.zeros(2)), ("identity", "relu"))


@pytest.mark.parametrize("name", ["relu", "tanh", "sigmoid", "identity"])
def test_activation_grad_matches_finite_differences(name):
    x = np.linspace(-3, 3, 40) + 0.013
    h = 1e-6
    fd = (activation(name, x + h) - activation(name, x - h)) / (2 * h)
    assert np.allclose(activation_grad(name, x), fd, atol=1e-8)


def test_softmax_uniform_logits_is_ln10():
    loss, grad = softmax_xent(np.zeros(10), 3)
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    assert abs(grad.sum()) <= 1e-15


def test_softmax_grad_sums_to_zero_and_matches_fd():
    rng = np.random.default_rng(0)
    for _ in range(10):
        z = rng.standard_normal(7) * 3
        k = int(rng.integers(7))
        loss, grad = softmax_xent(z, k)
        assert abs(grad.sum()) <= 1e-14
        h = 1e-6
        fd = np.array([(softmax_xent(z + h * e, k)[0] - softmax_xent(z - h * e, k)[0]) / (2 * h) for e in np.eye(7)])
        assert np.max(np.abs(fd - grad)) <= 1e-6


def test_softmax_stable_for_large_logits():
    loss, grad = softmax_xent(np.array([1000.0, 0.0, -1000.0]), 0)
    assert loss == pytest.approx(0.0) and np.all(np.isfinite(grad))


def test_softmax_batched_and_label_range():
    z = np.random.default_rng(1).standard_normal((4, 5))
    losses, grads = softmax_xent(z, np.array([0, 1, 2, 4]))
    assert losses.shape == (4,) and grads.shape == (4, 5)
    assert losses[2] == pytest.approx(softmax_xent(z[2], 2)[0])
    with pytest.raises(ValueError):
        softmax_xent(z[0], 5)


def test_sgd_scalar_example():
    p = MlpParams((np.array([[1.0]]),), (np.array([0.0]),), ("identity",))
    out = sgd_step(p, [np.array([[2.0]]), np.array([0.0])], 0.1)
    assert out.weights[0][0, 0] == pytest.approx(0.8)


def test_sgd_zero_grads_and_zero_lr_unchanged():
    p = init_params([3, 4, 2], "relu", seed=0, scheme="fan_in")
    zeros = [np.zeros_like(a) for a in p.arrays()]
    assert arrays_equal(sgd_step(p, zeros, 0.5), p)
    ones = [np.ones_like(a) for a in p.arrays()]
    assert arrays_equal(sgd_step(p, ones, 0.0), p)


def test_sgd_shape_mismatch():
    p = init_params([3, 4, 2], "relu")
    with pytest.raises(ShapeError):
        sgd_step(p, [np.zeros((2, 2))] * 4, 0.1)
    with pytest.raises(ShapeError):
        sgd_step(p, [np.zeros((2, 2))], 0.1)


def test_sgd_config_validation():
    assert SgdConfig().learning_rate == 1e-3 and SgdConfig().batch_size == 128
    with pytest.raises(ValueError):
        SgdConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        SgdConfig(batch_size=0)


def test_resnet_forward_paths_agree():
    params = init_resnet(12, 8, 16, 3, seed=2)
    x = small_data(20).samples
    blocks, _, logits = resnet_forward_sequential(params, x)
    pblocks, plogits, report = resnet_forward_deeppcr(params, x, NewtonConfig(abs_tol=1e-10, rel_tol=1e-12))
    assert report.converged
    assert np.max(np.abs(plogits - logits)) <= 1e-9
    assert np.max(np.abs(pblocks - blocks)) <= 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_gradient_parity_deeppcr_vs_backprop(seed):
    rng = np.random.default_rng(seed)
    act = ["relu", "tanh", "sigmoid"][seed % 3]
    params = init_resnet(12, 8, 16, 3, activation=act, seed=seed)
    data = small_data(32, seed=seed)
    idx = rng.choice(len(data), size=16, replace=False)
    x, y = data.samples[idx], data.labels[idx]
    cfg = NewtonConfig(abs_tol=1e-10, rel_tol=1e-14, max_iters=30)
    l_seq, g_seq = resnet_gradients(params, x, y, "sequential")
    l_pcr, g_pcr = resnet_gradients(params, x, y, "deeppcr", cfg)
    assert l_pcr == pytest.approx(l_seq, abs=1e-10)
    for (dw, db), (pw, pb) in zip(g_seq, g_pcr):
        for a, b in ((dw, pw), (db, pb)):
            assert np.max(np.abs(a - b)) <= 1e-8 * max(np.max(np.abs(a)), 1e-12)


def test_resnet_gradients_match_finite_differences():
    params = init_resnet(6, 4, 8, 3, activation="tanh", seed=1)
    data = small_data(8, dim=6)
    x, y = data.samples, data.labels
    _, grads = resnet_gradients(params, x, y, "deeppcr", NewtonConfig(abs_tol=1e-12, rel_tol=1e-14, max_iters=30))
    h = 1e-6
    arrays = params.mlp.arrays()
    flat = [g for g, _ in grads] + [g for _, g in grads]
    for k in (0, 3, len(params.mlp.weights) - 1, len(arrays) - 2):
        idx = tuple(0 for _ in arrays[k].shape)
        bumped = []
        for sign in (1, -1):
            a = [q.copy() for q in arrays]
            a[k][idx] += sign * h
            p = type(params)(params.mlp.replace_arrays(a), params.skip_length)
            bumped.append(resnet_gradients(p, x, y, "sequential")[0])
        assert abs((bumped[0] - bumped[1]) / (2 * h) - flat[k][idx]) <= 1e-6


def test_lr_zero_keeps_params_and_losses_constant():
    params = init_resnet(12, 8, 8, 3, seed=0)
    data = small_data(100)
    sgd = SgdConfig(learning_rate=0.0, epochs=2, batch_size=50)
    out, log = train_resnet(params, data, sgd, "sequential")
    assert arrays_equal(out.mlp, params.mlp)
    assert len(log) == 4 and set(log[0]) == set(LOG_COLUMNS)
    out, log = train_resnet(params, data, SgdConfig(0.0, 1, 100), "deeppcr")
    out2, log2 = train_resnet(params, data, SgdConfig(0.0, 1, 100), "deeppcr")
    assert arrays_equal(out.mlp, params.mlp)
    assert log[0]["loss"] == log2[0]["loss"]


def test_lr_zero_single_batch_losses_constant():
    params = init_resnet(12, 8, 8, 3, seed=0)
    data = small_data(40)
    _, log = train_resnet(params, data, SgdConfig(0.0, 3, 40), "sequential")
    # the per-epoch shuffle reorders the mean, so equality holds up to rounding
    losses = [row["loss"] for row in log]
    assert max(losses) - min(losses) <= 1e-12


@pytest.mark.parametrize("mode", ["sequential", "deeppcr"])
def test_training_log_deterministic(mode):
    params = init_resnet(12, 8, 8, 3, seed=5)
    data = small_data(120)
    sgd = SgdConfig(0.05, 1, 40, seed=2)
    strip = lambda log: [{k: v for k, v in r.items() if not k.endswith("_ns")} for r in log]
    a = train_resnet(params, data, sgd, mode)
    b = train_resnet(params, data, sgd, mode, workers=4)
    assert strip(a[1]) == strip(b[1])
    assert arrays_equal(a[0].mlp, b[0].mlp)


@pytest.mark.parametrize("mode", ["sequential", "deeppcr"])
def test_loss_decreases_over_first_epoch(mode):
    params = init_resnet(12, 16, 8, 3, seed=0)
    data = small_data(600)
    _, log = train_resnet(params, data, SgdConfig(0.1, 1, 20), mode)
    losses = [r["loss"] for r in log]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_train_modes_and_inputs_validated():
    params = init_resnet(12, 8, 8, 3)
    data = small_data(10)
    with pytest.raises(ValueError):
        train_resnet(params, data, SgdConfig(), "bogus")
    with pytest.raises(TypeError):
        train_resnet(params.mlp, data, SgdConfig())


def test_deeppcr_training_tracks_sequential():
    params = init_resnet(12, 8, 16, 3, seed=3)
    data = small_data(200)
    sgd = SgdConfig(0.05, 1, 50)
    _, seq = train_resnet(params, data, sgd, "sequential")
    _, pcr = train_resnet(params, data, sgd, "deeppcr")
    assert max(abs(a["loss"] - b["loss"]) for a, b in zip(seq, pcr)) <= 1e-6
    assert all(r["newton_iters"] >= 1 for r in pcr)
