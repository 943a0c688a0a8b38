import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeppcr.linalg import ShapeError
from deeppcr.newton import NewtonConfig, newton_solve
from deeppcr.nn import MlpParams, ResNetParams, activation, init_params, init_resnet
from deeppcr.sequences import (
    NoiseSchedule,
    NoiseTape,
    ZeroDenoiser,
    anchor_guess,
    backprop_sequential,
    batch_mean_guess,
    diffusion_sequence,
    first_layer_copy_guess,
    init_denoiser,
    mlp_backward_sequence,
    mlp_forward_sequence,
    param_gradients,
    resnet_collapsed_sequence,
    rollout,
)
from deeppcr.verify import fd_jacobian


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def smooth_points(rng, width, n=20):
    pts = []
    while len(pts) < n:
        z = rng.standard_normal(width)
        if np.min(np.abs(z)) > 1e-4:
            pts.append(z)
    return pts


def all_sequences(L=8, w=5, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for act in ("relu", "tanh", "sigmoid"):
        p = init_params([3] + [w] * (L + 1), act, seed)
        out[f"mlp-{act}"] = mlp_forward_sequence(p, rng.standard_normal(3))
    p = init_params([3] + [w] * (L + 1), "tanh", seed)
    fwd = rollout(mlp_forward_sequence(p, rng.standard_normal(3)))
    out["backward"] = mlp_backward_sequence(p, fwd, rng.standard_normal(w))
    for act in ("tanh", "relu"):
        r = init_resnet(3, w, 4 * L, 2, skip_length=4, activation=act, seed=seed)
        out[f"resnet-{act}"] = resnet_collapsed_sequence(r, rng.standard_normal(3))
    out["diffusion"] = diffusion_sequence(
        init_denoiser(w, seed=seed), NoiseSchedule.linear(L), NoiseTape.sample(L, w, seed), rng.standard_normal(w)
    )
    return out


@pytest.mark.parametrize("L,w", [(4, 2), (8, 5), (16, 8)])
@pytest.mark.parametrize("name", ["mlp-relu", "mlp-tanh", "mlp-sigmoid", "backward", "resnet-tanh", "resnet-relu", "diffusion"])
def test_step_jacobian_matches_finite_differences(name, L, w):
    seq = all_sequences(L, w)[name]
    rng = np.random.default_rng(L * w)
    for z in smooth_points(rng, w):
        l = int(rng.integers(1, seq.length + 1))
        fd = fd_jacobian(lambda v: seq.step(l, v), z)
        assert rel_err(fd, seq.step_jacobian(l, z)) <= 1e-5


@pytest.mark.parametrize("name", ["mlp-tanh", "backward", "resnet-tanh", "diffusion"])
def test_vectorized_evaluation_matches_single_steps(name):
    seq = all_sequences()[name]
    z = np.random.default_rng(1).standard_normal(seq.state_shape)
    ev = seq.evaluate(z[:-1], 1)
    jac = seq.jacobian(z[:-1], 1)
    for l in range(1, seq.length + 1):
        assert np.allclose(ev[l - 1], seq.step(l, z[l - 1]), rtol=1e-13, atol=1e-14)
        assert np.allclose(jac[l - 1], seq.step_jacobian(l, z[l - 1]), rtol=1e-13, atol=1e-14)
    # a sub-range starting mid-sequence picks the right layers
    assert np.allclose(seq.evaluate(z[2:5], 3), ev[2:5], rtol=1e-13, atol=1e-14)


def test_is_linear_flags_and_additivity():
    seqs = all_sequences()
    assert seqs["backward"].is_linear
    assert not seqs["mlp-relu"].is_linear and not seqs["diffusion"].is_linear
    ident = mlp_forward_sequence(init_params([2, 4, 4, 4], "identity", 0), np.ones(2))
    assert ident.is_linear
    rng = np.random.default_rng(2)
    for seq in (seqs["backward"],):
        a, b = rng.standard_normal(seq.width), rng.standard_normal(seq.width)
        zero = np.zeros(seq.width)
        for l in range(1, seq.length + 1):
            lhs = seq.step(l, a + b) - seq.step(l, b)
            rhs = seq.step(l, a) - seq.step(l, zero)
            assert np.allclose(lhs, rhs, atol=1e-12)


def test_mlp_forward_definition():
    p = init_params([3, 4, 4, 4], "tanh", 5)
    x = np.array([0.5, -1.0, 2.0])
    seq = mlp_forward_sequence(p, x)
    assert np.allclose(seq.initial_value(), p.weights[0] @ x + p.biases[0])
    z = np.array([0.1, -0.2, 0.3, 0.4])
    assert np.allclose(seq.step(2, z), p.weights[2] @ np.tanh(z) + p.biases[2])
    assert np.allclose(seq.step_jacobian(2, z), p.weights[2] @ np.diag(1 - np.tanh(z) ** 2))


def test_mlp_shape_errors():
    p = init_params([3, 4, 4], "relu", 0)
    with pytest.raises(ShapeError):
        mlp_forward_sequence(p, np.ones(5))
    with pytest.raises(ShapeError):
        mlp_backward_sequence(p, np.zeros((5, 4)), np.ones(4))


def loss_of(params, x, target):
    z = rollout(mlp_forward_sequence(params, x))
    return 0.5 * np.sum((z[-1] - target) ** 2), z


@pytest.mark.parametrize("act", ["tanh", "sigmoid"])
def test_backward_pcr_matches_backprop_and_finite_differences(act):
    rng = np.random.default_rng(3)
    p = init_params([8] + [8] * 33, act, 4)
    x, target = rng.standard_normal(8), rng.standard_normal(8)
    loss, fwd = loss_of(p, x, target)
    seq = mlp_backward_sequence(p, fwd, fwd[-1] - target)
    adj, report = newton_solve(seq, np.zeros(seq.state_shape))
    assert report.iterations == 1
    adj = adj[::-1]
    ref = backprop_sequential(p, fwd, fwd[-1] - target)
    assert rel_err(adj, ref) <= 1e-10
    # d loss / d z_0 through the input layer bias equals adj[0]
    grads = param_gradients(p, fwd, adj, x)
    h = 1e-6
    for l in (0, 1, 16, 32):
        for i, j in ((0, 0), (3, 5)):
            wp = [w.copy() for w in p.weights]
            wm = [w.copy() for w in p.weights]
            wp[l][i, j] += h
            wm[l][i, j] -= h
            fp = loss_of(MlpParams(tuple(wp), p.biases, p.activations), x, target)[0]
            fm = loss_of(MlpParams(tuple(wm), p.biases, p.activations), x, target)[0]
            assert abs((fp - fm) / (2 * h) - grads[l][0][i, j]) <= 1e-5


def test_param_gradients_batched_sum():
    rng = np.random.default_rng(5)
    p = init_params([3, 4, 4, 4], "tanh", 6)
    x = rng.standard_normal((5, 3))
    fwd = rollout(mlp_forward_sequence(p, x))
    g = rng.standard_normal((5, 4))
    adj = backprop_sequential(p, fwd, g)
    total = param_gradients(p, fwd, adj, x)
    per = [param_gradients(p, fwd[:, i], adj[:, i], x[i]) for i in range(5)]
    assert len(total) == len(p.weights)
    for l in range(len(p.weights)):
        assert np.allclose(total[l][0], sum(q[l][0] for q in per))
        assert np.allclose(total[l][1], sum(q[l][1] for q in per))


def test_resnet_macro_step_equals_layers_plus_block_input():
    r = init_resnet(3, 4, 8, 2, skip_length=4, activation="tanh", seed=7)
    seq = resnet_collapsed_sequence(r, np.ones(3))
    u = np.random.default_rng(8).standard_normal(4)
    for m in (1, 2):
        h = u
        for k in range(1, 5):
            l = (m - 1) * 4 + k
            h = r.mlp.weights[l] @ activation("tanh", h) + r.mlp.biases[l]
        assert np.allclose(seq.step(m, u), h + u)


def test_resnet_block_count_and_validation():
    r = init_resnet(3, 4, 12, 2, skip_length=4, seed=0)
    assert r.blocks == 3 and resnet_collapsed_sequence(r, np.ones(3)).length == 3
    with pytest.raises(ValueError):
        init_resnet(3, 4, 10, 2, skip_length=4)
    with pytest.raises(TypeError):
        resnet_collapsed_sequence(r.mlp, np.ones(3))


def test_degenerate_schedule_is_identity_chain():
    L, d = 32, 6
    sched = NoiseSchedule(np.zeros(L))
    assert np.array_equal(sched.alphas, np.ones(L))
    seq = diffusion_sequence(init_denoiser(d, seed=1), sched, NoiseTape.sample(L, d, 0), np.arange(d, dtype=float))
    z = np.random.default_rng(0).standard_normal(d)
    assert np.array_equal(seq.step(5, z), z)
    assert np.array_equal(seq.step_jacobian(5, z), np.eye(d))
    assert np.array_equal(rollout(seq)[-1], np.arange(d))


def test_zero_denoiser_noise_free_chain_closed_form():
    L, d = 64, 4
    betas = np.linspace(1e-4, 0.02, L)
    sched = NoiseSchedule(betas)
    z_init = np.random.default_rng(1).standard_normal(d)
    tape = NoiseTape(np.zeros((L, d)), seed=None)
    seq = diffusion_sequence(ZeroDenoiser(d), sched, tape, z_init)
    expected = z_init / np.sqrt(np.prod(1.0 - betas))
    assert np.allclose(rollout(seq)[-1], expected, rtol=1e-12)
    assert np.allclose(rollout(seq)[-1], z_init / np.sqrt(sched.alpha_bars[-1]), rtol=1e-12)
    z, report = newton_solve(seq, anchor_guess(seq), NewtonConfig.diffusion())
    assert report.iterations == 1
    assert np.max(np.abs(z[-1] - expected)) <= 1e-10


def test_diffusion_step_formula():
    L, d = 16, 3
    sched = NoiseSchedule.linear(L)
    tape = NoiseTape.sample(L, d, 4)
    den = init_denoiser(d, seed=2)
    seq = diffusion_sequence(den, sched, tape, np.zeros(d))
    z = np.array([0.3, -0.1, 0.7])
    l = 9
    a, ab, b = sched.alphas[l - 1], sched.alpha_bars[l - 1], sched.betas[l - 1]
    g = den(z[None], np.array([l]))[0]
    expected = (z - (1 - a) / np.sqrt(1 - ab) * g) / np.sqrt(a) + np.sqrt(b) * tape.draws[l - 1]
    assert np.allclose(seq.step(l, z), expected, rtol=1e-14)


@pytest.mark.parametrize("L", [256, 512])
def test_random_denoiser_parity(L):
    d = 8
    seq = diffusion_sequence(init_denoiser(d, seed=3), NoiseSchedule.linear(L), NoiseTape.sample(L, d, 5),
                             np.random.default_rng(6).standard_normal(d))
    z, report = newton_solve(seq, anchor_guess(seq), NewtonConfig.diffusion())
    assert report.converged and report.iterations <= 30
    assert np.max(np.abs(z[-1] - rollout(seq)[-1])) <= 5e-3


def test_schedule_invariants():
    s = NoiseSchedule.linear(100)
    assert np.allclose(s.alphas, 1 - s.betas)
    assert np.all(np.diff(s.alpha_bars) <= 0)
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars <= 1))
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.5, 1.0]))


def test_noise_tape_reproducible():
    a = NoiseTape.sample(50, 7, seed=11)
    b = NoiseTape.sample(50, 7, seed=11)
    assert np.array_equal(a.draws, b.draws) and a.length == 50
    with pytest.raises(ValueError):
        diffusion_sequence(init_denoiser(7), NoiseSchedule.linear(40), a, np.zeros(7))


def test_initial_guesses():
    seq = all_sequences()["mlp-tanh"]
    g = first_layer_copy_guess(seq)
    assert g.shape == seq.state_shape and np.all(g == seq.initial_value())
    assert not np.any(anchor_guess(seq))
    assert np.all(anchor_guess(seq, np.ones(seq.width)) == 1.0)
    prev = np.random.default_rng(0).standard_normal((9, 4, 5))
    bm = batch_mean_guess(prev, (9, 6, 5))
    assert bm.shape == (9, 6, 5) and np.allclose(bm[:, 3], prev.mean(axis=1))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**16))
def test_rollout_equals_newton_for_affine_mlps(L, w, seed):
    p = init_params([w] + [w] * (L + 1), "identity", seed)
    seq = mlp_forward_sequence(p, np.random.default_rng(seed).standard_normal(w))
    z, report = newton_solve(seq, np.random.default_rng(seed + 1).standard_normal(seq.state_shape))
    ref = rollout(seq)
    assert report.iterations == 1
    assert np.max(np.abs(z - ref)) <= 1e-10 * max(np.max(np.abs(ref)), 1.0)


def test_resnet_params_validation():
    p = init_params([3, 4, 4, 5, 2], "relu", 0)
    with pytest.raises(ShapeError):
        ResNetParams(p, 1)


@pytest.mark.parametrize("act,L,w", [("tanh", 16, 4), ("relu", 64, 8), ("sigmoid", 128, 16)])
def test_backward_pcr_equals_backprop_to_reassociation_error(act, L, w):
    rng = np.random.default_rng(L)
    p = init_params([w] + [w] * (L + 1), act, L)
    fwd = rollout(mlp_forward_sequence(p, rng.standard_normal((3, w))))
    g = rng.standard_normal((3, w))
    adj, _ = newton_solve(mlp_backward_sequence(p, fwd, g), np.zeros((L + 1, 3, w)))
    assert rel_err(adj[::-1], backprop_sequential(p, fwd, g)) <= 1e-12


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_collapsed_rollout_equals_layerwise_forward(act):
    from deeppcr.training import resnet_forward_sequential

    r = init_resnet(5, 8, 32, 3, skip_length=4, activation=act, seed=4)
    x = np.random.default_rng(4).random((6, 5))
    blocks, _, _ = resnet_forward_sequential(r, x)
    assert rel_err(rollout(resnet_collapsed_sequence(r, x)), blocks) <= 1e-12


def test_diffusion_rollout_bitwise_reproducible():
    def run():
        seq = diffusion_sequence(init_denoiser(6, seed=2), NoiseSchedule.linear(64), NoiseTape.sample(64, 6, 9),
                                 np.ones(6))
        return rollout(seq)

    assert np.array_equal(run(), run())
