"""ResNet training with sequential or DeepPCR forward and backward passes.

The network is ``z_0 = W_0 x + b_0``, residual blocks of ``s`` dense layers
``z_m = z_{m-1} + h_s`` and a classifier head ``W_head act(z_M) + b_head``.
In DeepPCR mode the forward pass is a Newton solve over the collapsed
block sequence and the backward pass is one PCR solve over the block
adjoints, followed by recovery of the in-block gradients for all blocks at
once.
"""

import time

import numpy as np

from .linalg import matmul
from .newton import NewtonConfig, NewtonDivergenceError, newton_solve
from .nn import ResNetParams, activation, activation_grad, sgd_step, softmax_xent
from .pcr import BlockBidiagSystem, pcr_solve
from .sequences import batch_mean_guess, first_layer_copy_guess, resnet_collapsed_sequence

__all__ = [
    "MODES",
    "LOG_COLUMNS",
    "TrainingDivergenceError",
    "resnet_forward_sequential",
    "resnet_forward_deeppcr",
    "resnet_backward_sequential",
    "resnet_backward_deeppcr",
    "resnet_gradients",
    "evaluate",
    "train_resnet",
]

MODES = ("sequential", "deeppcr")
LOG_COLUMNS = ("step", "epoch", "mode", "loss", "accuracy", "fwd_time_ns", "bwd_time_ns", "newton_iters")


class TrainingDivergenceError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"batch {step}: {cause}")
        self.step = step
        self.iteration = getattr(cause, "iteration", None)


def _layers(params):
    mlp = params.mlp
    return mlp.weights, mlp.biases, mlp.activations


def resnet_forward_sequential(params, x):
    """Layer-by-layer forward pass.

    Returns ``(blocks, pre, logits)``: block outputs ``(M+1, B, w)``, every
    hidden pre-activation ``(L+1, B, w)`` (index 0 is the stem output) and
    the logits.
    """
    W, b, acts = _layers(params)
    L, s = params.hidden_depth, params.skip_length
    x = np.asarray(x, dtype=np.float64)
    pre = np.empty((L + 1,) + x.shape[:-1] + (params.width,))
    blocks = np.empty((params.blocks + 1,) + pre.shape[1:])
    pre[0] = x @ W[0].T + b[0]
    blocks[0] = pre[0]
    h = pre[0]
    for l in range(1, L + 1):
        h = activation(acts[l], h) @ W[l].T + b[l]
        if l % s == 0:
            h = h + blocks[l // s - 1]
            blocks[l // s] = h
        pre[l] = h
    logits = activation(acts[-1], blocks[-1]) @ W[-1].T + b[-1]
    return blocks, pre, logits


def resnet_forward_deeppcr(params, x, config=None, guess=None, workers=1):
    """Newton/PCR forward pass over the collapsed block sequence.

    Returns ``(blocks, logits, report)``.
    """
    seq = resnet_collapsed_sequence(params, x)
    z0 = first_layer_copy_guess(seq) if guess is None else guess
    blocks, report = newton_solve(seq, z0, config or NewtonConfig.forward_pass(), workers)
    W, b, acts = _layers(params)
    logits = activation(acts[-1], blocks[-1]) @ W[-1].T + b[-1]
    return blocks, logits, report


def _head_backward(params, top, g_logits):
    W, _, acts = _layers(params)
    a = activation(acts[-1], top)
    g_top = (g_logits @ W[-1]) * activation_grad(acts[-1], top)
    return (g_logits.T @ a, g_logits.sum(axis=0)), g_top


def resnet_backward_sequential(params, x, blocks, pre, g_logits):
    """Classical backprop. Returns per-layer ``(dW, db)`` pairs in layer order."""
    W, _, acts = _layers(params)
    L, s = params.hidden_depth, params.skip_length
    head, g = _head_backward(params, blocks[-1], g_logits)
    grads = [None] * (L + 2)
    grads[-1] = head
    skip = g
    for l in range(L, 0, -1):
        # g is the gradient w.r.t. the output of layer l before any residual add
        a = activation(acts[l], pre[l - 1])
        grads[l] = (g.T @ a, g.sum(axis=0))
        g = (g @ W[l]) * activation_grad(acts[l], pre[l - 1])
        if (l - 1) % s == 0:
            # pre[l-1] is a block input: add the skip path
            g = g + skip
            skip = g
    grads[0] = (g.T @ np.asarray(x, dtype=np.float64), g.sum(axis=0))
    return grads


def resnet_backward_deeppcr(params, x, blocks, g_logits, workers=1):
    """Block adjoints from one PCR solve, then in-block gradients for all
    blocks at once. Returns ``(grads, trace)``."""
    W, _, acts = _layers(params)
    seq = resnet_collapsed_sequence(params, x)
    M, s = seq.length, seq.skip
    head, g_top = _head_backward(params, blocks[-1], g_logits)

    inner = seq.inner_states(blocks[:-1], 1)
    jac = seq.jacobian(blocks[:-1], 1, inner=inner)
    # adjoint chain in reversed block order: y_0 = g_top, y_k = J_{M-k+1}^T y_{k-1}
    ops = np.zeros((M + 1,) + jac.shape[1:])
    ops[1:] = -np.swapaxes(jac[::-1], -1, -2)
    rhs = np.zeros((M + 1,) + g_top.shape)
    rhs[0] = g_top
    adj, trace = pcr_solve(BlockBidiagSystem(ops, rhs), workers)
    lam = adj[::-1]  # lam[m] is the gradient w.r.t. block output z_m

    grads = [None] * (params.hidden_depth + 2)
    grads[-1] = head
    wk = params.mlp.weights
    g = lam[1:]
    for k in range(s, 0, -1):
        layer = np.arange(M) * s + k
        a = np.stack([activation(acts[l], inner[k - 1][m]) for m, l in enumerate(layer)])
        dW = np.einsum("mbi,mbj->mij", g, a)
        db = g.sum(axis=1)
        for m, l in enumerate(layer):
            grads[l] = (dW[m], db[m])
        wl = np.stack([wk[l] for l in layer])
        d = np.stack([activation_grad(acts[l], inner[k - 1][m]) for m, l in enumerate(layer)])
        g = matmul(g, wl) * d
    grads[0] = (lam[0].T @ np.asarray(x, dtype=np.float64), lam[0].sum(axis=0))
    return grads, trace


def _loss(logits, labels):
    losses, g = softmax_xent(logits, labels)
    n = labels.shape[0]
    acc = float(np.mean(np.argmax(logits, axis=-1) == labels))
    return float(np.mean(losses)), acc, g / n


def resnet_gradients(params, x, labels, mode="sequential", config=None, workers=1):
    """Mean-loss gradients for one batch; returns ``(loss, grads)``."""
    labels = np.asarray(labels)
    if mode == "sequential":
        blocks, pre, logits = resnet_forward_sequential(params, x)
        loss, _, g = _loss(logits, labels)
        return loss, resnet_backward_sequential(params, x, blocks, pre, g)
    blocks, logits, _ = resnet_forward_deeppcr(params, x, config, workers=workers)
    loss, _, g = _loss(logits, labels)
    grads, _ = resnet_backward_deeppcr(params, x, blocks, g, workers)
    return loss, grads


def evaluate(params, data, batch_size=1000):
    """Accuracy of ``params`` on ``data`` with the sequential forward pass."""
    hits = 0
    for i in range(0, len(data), batch_size):
        _, _, logits = resnet_forward_sequential(params, data.samples[i : i + batch_size])
        hits += int(np.sum(np.argmax(logits, axis=-1) == data.labels[i : i + batch_size]))
    return hits / len(data)


def batch_order(n, sgd, epoch):
    rng = np.random.default_rng([sgd.seed, epoch])
    return rng.permutation(n)


def train_resnet(params, data, sgd, mode="sequential", newton=None, workers=1, callback=None):
    """Plain SGD on mean softmax cross-entropy.

    Returns ``(params, log)`` where ``log`` holds one dict per batch with
    keys :data:`LOG_COLUMNS`. ``accuracy`` is the batch accuracy before the
    update. In DeepPCR mode the Newton guess is the batch-mean block stack of
    the previous step (first-layer copy on the first batch).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not isinstance(params, ResNetParams):
        raise TypeError("ResNetParams required")
    if len(data) == 0:
        raise ValueError("empty dataset")
    newton = newton or NewtonConfig.forward_pass()
    log = []
    previous = None
    step = 0
    for epoch in range(sgd.epochs):
        order = batch_order(len(data), sgd, epoch)
        for i in range(0, len(data), sgd.batch_size):
            idx = order[i : i + sgd.batch_size]
            x, y = data.samples[idx], data.labels[idx]
            iters = 0
            t0 = time.perf_counter_ns()
            if mode == "sequential":
                blocks, pre, logits = resnet_forward_sequential(params, x)
            else:
                seq_shape = (params.blocks + 1, x.shape[0], params.width)
                guess = None if previous is None else batch_mean_guess(previous, seq_shape)
                try:
                    blocks, logits, report = resnet_forward_deeppcr(params, x, newton, guess, workers)
                except NewtonDivergenceError as e:
                    raise TrainingDivergenceError(step, e) from e
                iters = report.iterations
                previous = blocks
            t1 = time.perf_counter_ns()
            loss, acc, g = _loss(logits, y)
            t2 = time.perf_counter_ns()
            if mode == "sequential":
                grads = resnet_backward_sequential(params, x, blocks, pre, g)
            else:
                grads, _ = resnet_backward_deeppcr(params, x, blocks, g, workers)
            t3 = time.perf_counter_ns()
            params = sgd_step(params, grads, sgd.learning_rate)
            row = {
                "step": step,
                "epoch": epoch,
                "mode": mode,
                "loss": loss,
                "accuracy": acc,
                "fwd_time_ns": t1 - t0,
                "bwd_time_ns": t3 - t2,
                "newton_iters": iters,
            }
            log.append(row)
            if callback is not None:
                callback(row)
            step += 1
    return params, log
