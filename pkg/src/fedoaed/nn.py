"""Minimal dense neural-network engine on numpy.

Forward passes, exact analytic backprop, softmax cross-entropy and MSE
losses, SGD with momentum, and a lossless flatten/unflatten between model
parameters and a single flat vector. Everything is float64 and fully
deterministic: no function reads ambient randomness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, InternalError

ACTIVATIONS = ("relu", "identity")

# Layout entries are (name, shape) pairs; per layer the weight matrix comes
# first (row-major) and the bias vector second, so flat vectors from
# different steps of the same model align coordinate-wise.
Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass
class ParamVector:
    """Flattened model parameters (or a parameter delta) plus their layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise InternalError(f"ParamVector values must be 1-D, got shape {self.values.shape}")
        expect = layout_size(self.layout)
        if self.values.size != expect:
            raise InternalError(
                f"ParamVector length {self.values.size} does not match layout total {expect}"
            )

    @property
    def size(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def layout_size(layout: Layout) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InternalError(f"non-finite entries in {what}")


@dataclass
class DenseLayer:
    """Fully connected layer: out = act(x @ W.T + b), W is (out, in)."""

    weights: np.ndarray
    biases: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise ConfigurationError("DenseLayer needs a 2-D weight matrix and 1-D bias vector")
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ConfigurationError(
                f"bias length {self.biases.shape[0]} != output size {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        _check_finite(self.weights, "layer weights")
        _check_finite(self.biases, "layer biases")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.biases.copy(), self.activation)


@dataclass
class MlpModel:
    """Ordered stack of dense layers; the last layer must emit raw logits."""

    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigurationError(
                    f"layer dimensions do not chain: {a.out_dim} -> {b.in_dim}"
                )
        if self.layers[-1].activation != "identity":
            raise ConfigurationError("final layer activation must be identity")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_params(self) -> int:
        return sum(l.weights.size + l.biases.size for l in self.layers)

    def copy(self) -> "MlpModel":
        return MlpModel([l.copy() for l in self.layers])


def build_mlp(sizes: list[int], rng: np.random.Generator) -> MlpModel:
    """Seeded Glorot-uniform MLP with ReLU hidden layers and identity output."""
    if len(sizes) < 2:
        raise ConfigurationError("need at least input and output sizes")
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
        act = "identity" if i == len(sizes) - 2 else "relu"
        layers.append(glorot_layer(n_in, n_out, act, rng))
    return MlpModel(layers)


def glorot_layer(n_in: int, n_out: int, activation: str, rng: np.random.Generator) -> DenseLayer:
    limit = np.sqrt(6.0 / (n_in + n_out))
    w = rng.uniform(-limit, limit, size=(n_out, n_in))
    return DenseLayer(w, np.zeros(n_out), activation)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def forward_mlp(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Forward pass; batch is (n, in_dim), returns (n, out_dim) logits."""
    out, _ = _forward_cached(model, batch)
    return out


def _forward_cached(model: MlpModel, batch: np.ndarray):
    """Forward pass keeping per-layer inputs and pre-activations for backprop."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError(f"batch must be 2-D, got shape {x.shape}")
    if x.shape[1] != model.in_dim:
        raise ConfigurationError(
            f"batch has {x.shape[1]} features but the model expects {model.in_dim}"
        )
    cache = []
    for layer in model.layers:
        z = x @ layer.weights.T + layer.biases
        cache.append((x, z))
        x = _activate(z, layer.activation)
    return x, cache


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over the batch.

    Returns (loss, grad_logits) with grad_logits = (softmax - onehot) / n.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    idx = np.arange(n)
    # log-sum-exp form avoids log(0) for saturated logits
    log_probs = shifted[idx, labels] - np.log(exp.sum(axis=1))
    loss = float(-log_probs.mean())
    grad = probs
    grad[idx, labels] -= 1.0
    grad /= n
    return loss, grad


def mse_loss(x: np.ndarray, x_hat: np.ndarray):
    """Mean squared difference over all entries; grad is w.r.t. x_hat."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise InternalError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    diff = x_hat - x
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


def backward_from_output_grad(
    model: MlpModel, batch: np.ndarray, grad_out: np.ndarray
) -> ParamVector:
    """Backprop an output-side gradient to all weights and biases."""
    _, cache = _forward_cached(model, batch)
    grads: list[np.ndarray | None] = [None] * len(model.layers)
    delta = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        x_in, z = cache[i]
        if layer.activation == "relu":
            delta = delta * (z > 0.0)
        grad_w = delta.T @ x_in
        grad_b = delta.sum(axis=0)
        grads[i] = np.concatenate([grad_w.ravel(), grad_b])
        if i > 0:
            delta = delta @ layer.weights
    return ParamVector(np.concatenate(grads), model_layout(model))


def backward_mlp(model: MlpModel, batch: np.ndarray, labels: np.ndarray) -> ParamVector:
    """Exact gradient of the mean cross-entropy loss w.r.t. all parameters."""
    logits, _ = _forward_cached(model, batch)
    _, grad_logits = cross_entropy_loss(logits, labels)
    return backward_from_output_grad(model, batch, grad_logits)


def model_layout(model: MlpModel) -> Layout:
    entries = []
    for i, layer in enumerate(model.layers):
        entries.append((f"dense{i}.W", layer.weights.shape))
        entries.append((f"dense{i}.b", layer.biases.shape))
    return tuple(entries)


def flatten(model: MlpModel) -> ParamVector:
    """Layer order, row-major weights, then biases, per layer."""
    chunks = []
    for layer in model.layers:
        chunks.append(layer.weights.ravel())
        chunks.append(layer.biases)
    return ParamVector(np.concatenate(chunks), model_layout(model))


def unflatten(pv: ParamVector) -> list[np.ndarray]:
    """Split a flat vector back into the arrays its layout describes."""
    arrays = []
    offset = 0
    for _, shape in pv.layout:
        n = int(np.prod(shape))
        arrays.append(pv.values[offset : offset + n].reshape(shape).copy())
        offset += n
    if offset != pv.values.size:
        raise InternalError("flat vector longer than its layout")
    return arrays


def apply_flat(model: MlpModel, pv: ParamVector) -> MlpModel:
    """New model with the same architecture but parameters taken from pv."""
    if pv.layout != model_layout(model):
        raise InternalError("flat vector layout does not match the model")
    arrays = unflatten(pv)
    layers = []
    for i, layer in enumerate(model.layers):
        layers.append(DenseLayer(arrays[2 * i], arrays[2 * i + 1], layer.activation))
    return MlpModel(layers)


@dataclass
class SgdMomentumState:
    """Velocity buffer for SGD with momentum: v <- mu*v + g, w <- w - lr*v."""

    learning_rate: float
    momentum: float = 0.0
    velocity: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigurationError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")


def sgd_momentum_step(params: ParamVector, grads: ParamVector, state: SgdMomentumState) -> ParamVector:
    """One optimizer step on the flat parameter vector; mutates state.velocity."""
    if params.layout != grads.layout:
        raise InternalError("parameter and gradient layouts differ")
    if state.velocity is None:
        state.velocity = np.zeros_like(params.values)
    elif state.velocity.shape != params.values.shape:
        raise InternalError("velocity buffer does not match the parameter layout")
    state.velocity = state.momentum * state.velocity + grads.values
    return ParamVector(params.values - state.learning_rate * state.velocity, params.layout)
