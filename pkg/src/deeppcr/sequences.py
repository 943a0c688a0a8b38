"""Markov sequences: a step function ``f_l`` and its Jacobian per layer.

A sequence produces states ``z_0 = f_0(x)`` and ``z_l = f_l(z_{l-1})`` for
``l = 1..L``. States are stacked along axis 0 as ``(L+1, *batch, d)``; all
shipped sequences keep a constant width ``d``.

Besides the single-step ``step``/``step_jacobian`` each sequence offers
``evaluate``/``jacobian`` taking a stack of predecessor states for a
contiguous range of steps, which is how the Newton assembly evaluates all
steps at once.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, matmul, matvec
from .nn import MlpParams, ResNetParams, activation, activation_grad

__all__ = [
    "MarkovSequence",
    "MlpForwardSequence",
    "MlpBackwardSequence",
    "ResNetCollapsedSequence",
    "DiffusionSequence",
    "NoiseSchedule",
    "NoiseTape",
    "Denoiser",
    "ZeroDenoiser",
    "init_denoiser",
    "sinusoidal_embedding",
    "mlp_forward_sequence",
    "mlp_backward_sequence",
    "resnet_collapsed_sequence",
    "diffusion_sequence",
    "rollout",
    "param_gradients",
    "backprop_sequential",
    "first_layer_copy_guess",
    "anchor_guess",
    "batch_mean_guess",
]


def _apply(tags, fn, z):
    # tags[i] is the activation for z[i]
    if len(set(tags)) == 1:
        return fn(tags[0], z)
    out = np.empty_like(z)
    for i, t in enumerate(tags):
        out[i] = fn(t, z[i])
    return out


def _expand(a, batch_ndim):
    # (n, r, c) -> (n, 1, ..., 1, r, c) so it broadcasts over batch axes
    return a.reshape(a.shape[:1] + (1,) * batch_ndim + a.shape[1:])


class MarkovSequence:
    """Base class. Subclasses override ``evaluate``/``jacobian`` or ``step``/``step_jacobian``."""

    is_linear = False
    length = 0
    width = 0
    batch_shape = ()

    @property
    def state_dims(self):
        return (self.width,) * (self.length + 1)

    @property
    def state_shape(self):
        return (self.length + 1,) + tuple(self.batch_shape) + (self.width,)

    def initial_value(self):
        raise NotImplementedError

    def step(self, l, z_prev):
        return self.evaluate(np.asarray(z_prev)[None], l)[0]

    def step_jacobian(self, l, z_prev):
        return self.jacobian(np.asarray(z_prev)[None], l)[0]

    def evaluate(self, z_prev, start):
        """``f_l(z_prev[i])`` for ``l = start + i``."""
        return np.stack([self.step(start + i, z) for i, z in enumerate(z_prev)])

    def jacobian(self, z_prev, start):
        return np.stack([self.step_jacobian(start + i, z) for i, z in enumerate(z_prev)])


def rollout(seq):
    """Sequential reference: apply the steps one after another."""
    z = np.empty(seq.state_shape)
    z[0] = seq.initial_value()
    for l in range(1, seq.length + 1):
        z[l] = seq.step(l, z[l - 1])
    return z


# -- MLP forward ------------------------------------------------------------


class MlpForwardSequence(MarkovSequence):
    def __init__(self, params, x):
        widths = params.widths
        if len(set(widths[1:])) != 1:
            raise ShapeError(f"hidden widths must be constant, got {widths[1:]}")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != widths[0]:
            raise ShapeError(f"input has {x.shape[-1]} features, first layer expects {widths[0]}")
        self.params = params
        self.x = x
        self.length = params.depth
        self.width = widths[1]
        self.batch_shape = x.shape[:-1]
        self.acts = params.activations[1:]
        self.is_linear = all(a == "identity" for a in self.acts)
        if self.length:
            self._w = np.stack(params.weights[1:])
            self._b = np.stack(params.biases[1:])
        else:
            self._w = np.zeros((0, self.width, self.width))
            self._b = np.zeros((0, self.width))

    def initial_value(self):
        return matvec(self.params.weights[0], self.x) + self.params.biases[0]

    def step(self, l, z_prev):
        a = activation(self.acts[l - 1], z_prev)
        return np.matmul(a, self.params.weights[l].T) + self.params.biases[l]

    def _slice(self, n, start):
        nb = len(self.batch_shape)
        sl = slice(start - 1, start - 1 + n)
        return _expand(self._w[sl], nb), self._b[sl].reshape((n,) + (1,) * nb + (self.width,))

    def evaluate(self, z_prev, start):
        n = z_prev.shape[0]
        w, b = self._slice(n, start)
        a = _apply(self.acts[start - 1 : start - 1 + n], activation, z_prev)
        return matvec(w, a) + b

    def jacobian(self, z_prev, start):
        n = z_prev.shape[0]
        w, _ = self._slice(n, start)
        s = _apply(self.acts[start - 1 : start - 1 + n], activation_grad, z_prev)
        return w * s[..., None, :]


def mlp_forward_sequence(params, x):
    return MlpForwardSequence(params, x)


# -- MLP backward (adjoint) -------------------------------------------------


class MlpBackwardSequence(MarkovSequence):
    """Adjoint chain run forwards over reversed layers.

    State ``k`` is the gradient w.r.t. ``z_{L-k}``; step ``k`` applies the
    transposed Jacobian of layer ``L-k+1`` at the stored activations.
    """

    is_linear = True

    def __init__(self, params, forward_states, output_grad):
        forward_states = np.asarray(forward_states, dtype=np.float64)
        L = params.depth
        if forward_states.shape[0] != L + 1:
            raise ShapeError(f"expected {L + 1} forward states, got {forward_states.shape[0]}")
        output_grad = np.asarray(output_grad, dtype=np.float64)
        if output_grad.shape != forward_states.shape[1:]:
            raise ShapeError(f"output_grad {output_grad.shape} vs states {forward_states.shape[1:]}")
        self.params = params
        self.length = L
        self.width = forward_states.shape[-1]
        self.batch_shape = forward_states.shape[1:-1]
        self.output_grad = output_grad
        acts = params.activations[1:]
        # reversed layer order: index k-1 holds layer L-k+1
        if L:
            self._s = np.stack([activation_grad(acts[m - 1], forward_states[m - 1]) for m in range(L, 0, -1)])
            self._wt = np.stack([params.weights[m].T for m in range(L, 0, -1)])
        else:
            self._s = np.zeros((0,) + forward_states.shape[1:])
            self._wt = np.zeros((0, self.width, self.width))

    def initial_value(self):
        return self.output_grad.copy()

    def step(self, k, g):
        m = self.length - k + 1
        return self._s[k - 1] * np.matmul(g, self.params.weights[m])

    def evaluate(self, g_prev, start):
        n = g_prev.shape[0]
        sl = slice(start - 1, start - 1 + n)
        wt = _expand(self._wt[sl], len(self.batch_shape))
        return self._s[sl] * matvec(wt, g_prev)

    def jacobian(self, g_prev, start):
        n = g_prev.shape[0]
        sl = slice(start - 1, start - 1 + n)
        wt = _expand(self._wt[sl], len(self.batch_shape))
        return self._s[sl][..., :, None] * wt


def mlp_backward_sequence(params, forward_states, output_grad):
    return MlpBackwardSequence(params, forward_states, output_grad)


def backprop_sequential(params, forward_states, output_grad):
    """Classical layer-by-layer backprop; returns gradients w.r.t. ``z_0..z_L``."""
    L = params.depth
    g = np.empty_like(np.asarray(forward_states, dtype=np.float64))
    g[L] = output_grad
    for l in range(L, 0, -1):
        s = activation_grad(params.activations[l], forward_states[l - 1])
        g[l - 1] = s * np.matmul(g[l], params.weights[l])
    return g


def param_gradients(params, forward_states, adjoint_states, inputs):
    """Per-layer ``(dW_l, db_l)`` summed over batch axes.

    ``adjoint_states[l]`` is the gradient w.r.t. ``z_l`` (layer order).
    Layer 0 uses the raw ``inputs`` in place of an activation.
    """
    out = []
    for l in range(params.depth + 1):
        if l == 0:
            a = np.asarray(inputs, dtype=np.float64)
        else:
            a = activation(params.activations[l], forward_states[l - 1])
        g = adjoint_states[l]
        if g.ndim == 1:
            out.append((np.outer(g, a), g.copy()))
        else:
            gm = g.reshape(-1, g.shape[-1])
            am = a.reshape(-1, a.shape[-1])
            out.append((gm.T @ am, gm.sum(axis=0)))
    return out


# -- ResNet with collapsed skips --------------------------------------------


class ResNetCollapsedSequence(MarkovSequence):
    """One macro-step per residual block of ``s`` layers.

    ``f_m(u) = h_s + u`` with ``h_0 = u`` and ``h_k = W_k act(h_{k-1}) + b_k``
    over the block's layers; the Jacobian is ``I + J_s ... J_1``.
    """

    def __init__(self, params, x):
        if not isinstance(params, ResNetParams):
            raise TypeError("ResNetParams required")
        mlp = params.mlp
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != mlp.widths[0]:
            raise ShapeError(f"input has {x.shape[-1]} features, first layer expects {mlp.widths[0]}")
        self.params = params
        self.x = x
        s = params.skip_length
        self.skip = s
        self.length = params.blocks
        self.width = params.width
        self.batch_shape = x.shape[:-1]
        L = params.hidden_depth
        d = self.width
        self._w = np.stack(mlp.weights[1 : L + 1]).reshape(self.length, s, d, d)
        self._b = np.stack(mlp.biases[1 : L + 1]).reshape(self.length, s, d)
        self._acts = [mlp.activations[1 : L + 1][m * s : (m + 1) * s] for m in range(self.length)]

    def initial_value(self):
        return matvec(self.params.mlp.weights[0], self.x) + self.params.mlp.biases[0]

    def inner_states(self, z_prev, start):
        """Intermediate activations ``h_0..h_s`` for blocks ``start..start+n-1``."""
        n = z_prev.shape[0]
        nb = len(self.batch_shape)
        sl = slice(start - 1, start - 1 + n)
        h = [z_prev]
        for k in range(self.skip):
            w = _expand(self._w[sl, k], nb)
            b = self._b[sl, k].reshape((n,) + (1,) * nb + (self.width,))
            tags = [a[k] for a in self._acts[sl]]
            h.append(matvec(w, _apply(tags, activation, h[-1])) + b)
        return h

    def evaluate(self, z_prev, start):
        h = self.inner_states(z_prev, start)
        return h[-1] + z_prev

    def jacobian(self, z_prev, start, inner=None):
        n = z_prev.shape[0]
        nb = len(self.batch_shape)
        sl = slice(start - 1, start - 1 + n)
        h = inner if inner is not None else self.inner_states(z_prev, start)
        prod = None
        for k in range(self.skip):
            w = _expand(self._w[sl, k], nb)
            tags = [a[k] for a in self._acts[sl]]
            jk = w * _apply(tags, activation_grad, h[k])[..., None, :]
            prod = jk if prod is None else matmul(jk, prod)
        eye = np.eye(self.width)
        return prod + eye


def resnet_collapsed_sequence(params, x):
    return ResNetCollapsedSequence(params, x)


# -- diffusion denoising chain ----------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b < 0.0) or np.any(b >= 1.0):
            raise ValueError("betas must be a nonempty 1-D array in [0, 1)")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, length, beta_start=1e-4, beta_end=0.02):
        return cls(np.linspace(beta_start, beta_end, length))

    @classmethod
    def constant(cls, length, beta):
        return cls(np.full(length, float(beta)))

    @property
    def length(self):
        return self.betas.size

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def noise_coefficients(self):
        """``(1-a_l)/sqrt(1-abar_l)``, defined as 0 where ``1-a_l`` is 0."""
        one_minus = self.betas
        denom = np.sqrt(np.maximum(1.0 - self.alpha_bars, 0.0))
        out = np.zeros_like(one_minus)
        nz = one_minus > 0.0
        out[nz] = one_minus[nz] / denom[nz]
        return out


@dataclass(frozen=True)
class NoiseTape:
    """Pre-sampled standard normal draws, one per denoising step."""

    draws: np.ndarray
    seed: int = None

    @classmethod
    def sample(cls, length, shape, seed):
        rng = np.random.default_rng(seed)
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        return cls(rng.standard_normal((length,) + shape), seed)

    @property
    def length(self):
        return self.draws.shape[0]


def sinusoidal_embedding(steps, dim):
    steps = np.asarray(steps, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = steps[..., None] * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


@dataclass(frozen=True)
class Denoiser:
    """Residual tanh MLP ``g(z, l) = u + W_out tanh(W_in u + b_in) + b_out``
    with ``u = z + emb(l)``.
    """

    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def dim(self):
        return self.w_in.shape[1]

    def _hidden(self, z, steps, nb):
        u = z + sinusoidal_embedding(steps, self.dim).reshape((len(steps),) + (1,) * nb + (self.dim,))
        h = np.tanh(matvec(self.w_in, u) + self.b_in)
        return u, h

    def __call__(self, z, steps, nb=0):
        u, h = self._hidden(z, steps, nb)
        return u + matvec(self.w_out, h) + self.b_out

    def jacobian(self, z, steps, nb=0):
        _, h = self._hidden(z, steps, nb)
        scaled = self.w_out * (1.0 - h * h)[..., None, :]
        return matmul(scaled, self.w_in) + np.eye(self.dim)


@dataclass(frozen=True)
class ZeroDenoiser:
    """``g = 0``; turns the denoising chain into an affine map."""

    dim: int
    is_linear = True

    def __call__(self, z, steps, nb=0):
        return np.zeros_like(z)

    def jacobian(self, z, steps, nb=0):
        return np.zeros(z.shape + (self.dim,))


def init_denoiser(dim, hidden=None, seed=0, scale=1.0):
    hidden = hidden or 2 * dim
    rng = np.random.default_rng(seed)
    b1 = np.sqrt(6.0 / (dim + hidden))
    return Denoiser(
        scale * rng.uniform(-b1, b1, (hidden, dim)),
        np.zeros(hidden),
        scale * rng.uniform(-b1, b1, (dim, hidden)),
        np.zeros(dim),
    )


class DiffusionSequence(MarkovSequence):
    """``f_l(z) = (z - c_l g(z, l)) / sqrt(a_l) + sqrt(b_l) eps_l`` with a fixed noise tape."""

    def __init__(self, denoiser, schedule, tape, z_init):
        if schedule.length != tape.length:
            raise ValueError(f"schedule has {schedule.length} steps, tape has {tape.length}")
        z_init = np.asarray(z_init, dtype=np.float64)
        if tape.draws.shape[1:] != z_init.shape:
            raise ShapeError(f"tape draws {tape.draws.shape[1:]} vs state {z_init.shape}")
        if z_init.shape[-1] != denoiser.dim:
            raise ShapeError(f"denoiser expects dim {denoiser.dim}, state has {z_init.shape[-1]}")
        self.denoiser = denoiser
        self.is_linear = getattr(denoiser, "is_linear", False)
        self.schedule = schedule
        self.tape = tape
        self.z_init = z_init
        self.length = schedule.length
        self.width = z_init.shape[-1]
        self.batch_shape = z_init.shape[:-1]
        self._inv_sqrt_alpha = 1.0 / np.sqrt(schedule.alphas)
        self._coef = schedule.noise_coefficients()
        self._noise = np.sqrt(schedule.betas).reshape((-1,) + (1,) * z_init.ndim) * tape.draws

    def initial_value(self):
        return self.z_init.copy()

    def _coeffs(self, n, start):
        nb = len(self.batch_shape)
        sl = slice(start - 1, start - 1 + n)
        shape = (n,) + (1,) * (nb + 1)
        return self._inv_sqrt_alpha[sl].reshape(shape), self._coef[sl].reshape(shape), sl

    def evaluate(self, z_prev, start):
        n = z_prev.shape[0]
        inv, coef, sl = self._coeffs(n, start)
        steps = np.arange(start, start + n)
        g = self.denoiser(z_prev, steps, len(self.batch_shape))
        return inv * (z_prev - coef * g) + self._noise[sl]

    def jacobian(self, z_prev, start):
        n = z_prev.shape[0]
        inv, coef, _ = self._coeffs(n, start)
        steps = np.arange(start, start + n)
        jg = self.denoiser.jacobian(z_prev, steps, len(self.batch_shape))
        return inv[..., None] * (np.eye(self.width) - coef[..., None] * jg)


def diffusion_sequence(denoiser, schedule, tape, z_init):
    return DiffusionSequence(denoiser, schedule, tape, z_init)


# -- Newton initial guesses -------------------------------------------------


def first_layer_copy_guess(seq):
    """Every state set to the output of the first layer."""
    return np.broadcast_to(seq.initial_value(), seq.state_shape).copy()


def anchor_guess(seq, anchor=None):
    """Every state set to ``anchor`` (zero by default, e.g. a dataset mean)."""
    if anchor is None:
        return np.zeros(seq.state_shape)
    return np.broadcast_to(np.asarray(anchor, dtype=np.float64), seq.state_shape).copy()


def batch_mean_guess(previous_states, state_shape):
    """Batch-average of the states from a previous solve, broadcast over the batch.

    ``previous_states`` has shape ``(L+1, B, d)``.
    """
    mean = np.asarray(previous_states).mean(axis=1, keepdims=True)
    return np.broadcast_to(mean, state_shape).copy()
