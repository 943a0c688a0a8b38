"""Parameter containers, initialisation, loss and SGD for the ResNet study."""

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError

__all__ = [
    "ACTIVATIONS",
    "activation",
    "activation_grad",
    "MlpParams",
    "ResNetParams",
    "SgdConfig",
    "INIT_SCHEMES",
    "init_params",
    "init_resnet",
    "softmax_xent",
    "sgd_step",
]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_grad(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


ACTIVATIONS = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0.0).astype(np.float64)),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "sigmoid": (_sigmoid, _sigmoid_grad),
    "identity": (lambda x: np.array(x, dtype=np.float64), lambda x: np.ones_like(x, dtype=np.float64)),
}


def activation(name, x):
    return ACTIVATIONS[name][0](x)


def activation_grad(name, x):
    # relu'(0) = 0
    return ACTIVATIONS[name][1](x)


@dataclass(frozen=True)
class MlpParams:
    """Layers ``z_0 = W_0 x + b_0`` and ``z_l = W_l act_l(z_{l-1}) + b_l``.

    ``activations[0]`` belongs to the input layer and is always
    ``"identity"``; ``activations[l]`` is applied to ``z_{l-1}`` in layer ``l``.
    """

    weights: tuple
    biases: tuple
    activations: tuple

    def __post_init__(self):
        w = tuple(np.asarray(a, dtype=np.float64) for a in self.weights)
        b = tuple(np.asarray(a, dtype=np.float64) for a in self.biases)
        acts = tuple(self.activations)
        if not (len(w) == len(b) == len(acts)) or not w:
            raise ShapeError("weights, biases and activations must have equal nonzero length")
        for l, (wl, bl) in enumerate(zip(w, b)):
            if wl.ndim != 2 or bl.shape != (wl.shape[0],):
                raise ShapeError(f"layer {l}: W {wl.shape}, b {bl.shape}")
            if l and wl.shape[1] != w[l - 1].shape[0]:
                raise ShapeError(f"layer {l} expects {wl.shape[1]} inputs, previous layer gives {w[l - 1].shape[0]}")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "activations", acts)

    @property
    def depth(self):
        """Number of layers after the input layer."""
        return len(self.weights) - 1

    @property
    def widths(self):
        return [self.weights[0].shape[1]] + [wl.shape[0] for wl in self.weights]

    def arrays(self):
        return list(self.weights) + list(self.biases)

    def replace_arrays(self, arrays):
        n = len(self.weights)
        return MlpParams(tuple(arrays[:n]), tuple(arrays[n:]), self.activations)


@dataclass(frozen=True)
class ResNetParams:
    """A fully connected ResNet.

    ``mlp`` holds the input layer (index 0), the hidden residual layers
    ``1..L`` and the classifier head (last index). A residual add closes
    every block of ``skip_length`` hidden layers.
    """

    mlp: MlpParams
    skip_length: int

    def __post_init__(self):
        L = self.hidden_depth
        if self.skip_length < 1 or L < 1 or L % self.skip_length:
            raise ValueError(f"{L} hidden layers not divisible by skip length {self.skip_length}")
        widths = self.mlp.widths[1 : L + 2]
        if len(set(widths)) != 1:
            raise ShapeError(f"hidden widths must be equal, got {widths}")

    @property
    def hidden_depth(self):
        return len(self.mlp.weights) - 2

    @property
    def width(self):
        return self.mlp.weights[0].shape[0]

    @property
    def blocks(self):
        return self.hidden_depth // self.skip_length


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-3
    epochs: int = 2
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")


INIT_SCHEMES = ("standard", "fan_in")


def _uniform_layer(rng, fan_in, fan_out, act, scheme):
    if scheme == "fan_in":
        # U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_out, fan_in)), rng.uniform(-bound, bound, size=fan_out)
    if act == "relu":
        bound = np.sqrt(6.0 / fan_in)
    else:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)


def init_params(widths, activations, seed=0, scheme="standard"):
    """Random MLP with ``widths = [in, d_0, d_1, ..., d_L]``.

    ``activations`` lists ``act_1 .. act_L`` (or a single tag used for all
    layers). The ``"standard"`` scheme draws Kaiming-uniform weights for
    ReLU layers and Glorot-uniform otherwise, with zero biases. The
    ``"fan_in"`` scheme draws weights and biases from
    ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, the common framework default for
    dense layers; its contracting layers keep deep random chains well
    conditioned for Newton.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"widths must be >= 1, got {widths}")
    depth = len(widths) - 2
    if isinstance(activations, str):
        activations = [activations] * depth
    activations = list(activations)
    if len(activations) != depth:
        raise ValueError(f"need {depth} activations, got {len(activations)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(depth + 1):
        act = activations[l - 1] if l else (activations[0] if activations else "identity")
        w, b = _uniform_layer(rng, widths[l], widths[l + 1], act, scheme)
        weights.append(w)
        biases.append(b)
    return MlpParams(tuple(weights), tuple(biases), ("identity", *activations))


def init_resnet(input_dim, width, hidden_depth, classes, skip_length=4, activation="relu", seed=0,
                residual_scale=None):
    """Random ResNet; the last layer of every block is scaled by ``residual_scale``.

    The default scale ``1/sqrt(blocks)`` keeps the activation variance
    bounded with depth.
    """
    if hidden_depth % skip_length:
        raise ValueError(f"{hidden_depth} hidden layers not divisible by skip length {skip_length}")
    widths = [input_dim] + [width] * (hidden_depth + 1) + [classes]
    mlp = init_params(widths, [activation] * (hidden_depth + 1), seed)
    blocks = hidden_depth // skip_length
    if residual_scale is None:
        residual_scale = 1.0 / np.sqrt(blocks)
    weights = list(mlp.weights)
    for m in range(blocks):
        last = (m + 1) * skip_length
        weights[last] = weights[last] * residual_scale
    mlp = MlpParams(tuple(weights), mlp.biases, mlp.activations)
    return ResNetParams(mlp, skip_length)


def softmax_xent(logits, labels):
    """Softmax cross-entropy with its gradient w.r.t. the logits.

    Works on a single logit vector with an int label, or on a batch
    ``(B, C)`` with ``(B,)`` labels (per-sample losses, no averaging).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= logits.shape[-1]):
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    total = expd.sum(axis=-1, keepdims=True)
    probs = expd / total
    picked = np.take_along_axis(shifted, labels[..., None], axis=-1)[..., 0]
    loss = np.log(total[..., 0]) - picked
    grad = probs
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1)
    if loss.ndim == 0:
        loss = float(loss)
    return loss, grad


def sgd_step(params, grads, lr):
    """Plain SGD ``p <- p - lr * g`` on :class:`MlpParams` or :class:`ResNetParams`."""
    if isinstance(params, ResNetParams):
        return ResNetParams(sgd_step(params.mlp, grads, lr), params.skip_length)
    arrays = params.arrays()
    grads = list(grads)
    if grads and isinstance(grads[0], tuple):
        # per-layer (dW, db) pairs
        grads = [g for g, _ in grads] + [g for _, g in grads]
    if len(grads) != len(arrays):
        raise ShapeError(f"{len(grads)} gradients for {len(arrays)} parameter arrays")
    out = []
    for p, g in zip(arrays, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} vs parameter {p.shape}")
        out.append(p - lr * g)
    return params.replace_arrays(out)
