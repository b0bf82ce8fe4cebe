"""Client-side training.

Plain local SGD, the FedProx variant, and the denoising variant which
collects flattened parameter-delta snapshots during local training, fits a
small autoencoder on them, and convexly mixes the reconstructed final delta
into the upload. All denoiser failure modes downgrade to the raw update;
they never abort a round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .errors import (
    ConfigurationError,
    DenoiserDivergence,
    DivergenceError,
    InsufficientSnapshots,
    InternalError,
)

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8

# Over-parameterization guard for tiny task models: the autoencoder's hidden
# width never exceeds four times the vector it reconstructs.
HIDDEN_CLAMP_FACTOR = 4


@dataclass
class DenoiserConfig:
    """Hyperparameters of the on-device delta denoiser."""

    mix_lambda: float = 0.1
    latent_dim: int = 32
    hidden_dim: int = 512
    ae_learning_rate: float = 0.2
    ae_epochs: int = 10
    snapshot_step: int = 1
    min_snapshots: int = 4

    def __post_init__(self):
        if not 0.0 <= self.mix_lambda <= 1.0:
            raise ConfigurationError(f"mix coefficient must lie in [0, 1], got {self.mix_lambda}")
        if self.latent_dim < 1 or self.hidden_dim < 1:
            raise ConfigurationError("autoencoder dimensions must be >= 1")
        if self.ae_learning_rate <= 0.0:
            raise ConfigurationError("autoencoder learning rate must be > 0")
        if self.ae_epochs < 0:
            raise ConfigurationError("autoencoder epochs must be >= 0")
        if self.snapshot_step < 1 or self.min_snapshots < 1:
            raise ConfigurationError("snapshot step and minimum count must be >= 1")


@dataclass
class SnapshotBuffer:
    """Delta snapshots collected during one client's local training."""

    snapshot_step: int = 1
    min_snapshots: int = 4
    snapshots: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.snapshots)


@dataclass
class NormalizationStats:
    """Scalar z-score over all entries of all buffered snapshots."""

    mean: float
    std: float

    def __post_init__(self):
        self.std = max(float(self.std), STD_FLOOR)

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "NormalizationStats":
        return cls(float(np.mean(samples)), float(np.std(samples)))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


@dataclass
class AutoencoderModel:
    """Encoder-decoder over flat delta vectors of a fixed dimension."""

    net: nn.MlpModel
    param_dim: int


def build_autoencoder(param_dim: int, cfg: DenoiserConfig, rng: np.random.Generator) -> AutoencoderModel:
    """Seeded Glorot init of Linear-ReLU-Linear encoder and mirrored decoder."""
    hidden = cfg.hidden_dim
    clamp = HIDDEN_CLAMP_FACTOR * param_dim
    if hidden > clamp:
        logger.info("clamping autoencoder hidden width %d to %d for param_dim %d",
                    hidden, clamp, param_dim)
        hidden = clamp
    net = nn.MlpModel(
        [
            nn.glorot_layer(param_dim, hidden, "relu", rng),
            nn.glorot_layer(hidden, cfg.latent_dim, "identity", rng),
            nn.glorot_layer(cfg.latent_dim, hidden, "relu", rng),
            nn.glorot_layer(hidden, param_dim, "identity", rng),
        ]
    )
    return AutoencoderModel(net, param_dim)


def collect_snapshot(
    buffer: SnapshotBuffer,
    w_global: nn.ParamVector,
    w_local_after_step: nn.ParamVector,
    step_index: int,
) -> SnapshotBuffer:
    """Append flatten(w_global - w_local) iff the completed step index hits the schedule."""
    if w_global.layout != w_local_after_step.layout:
        raise InternalError("global and local parameter layouts differ")
    if step_index % buffer.snapshot_step == 0:
        buffer.snapshots.append(w_global.values - w_local_after_step.values)
    return buffer


def autoencoder_forward(ae: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    """Reconstruct a vector (returned as a vector) or a matrix row-wise."""
    x = np.asarray(x, dtype=np.float64)
    was_vector = x.ndim == 1
    if was_vector:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != ae.param_dim:
        raise InternalError(
            f"autoencoder expects vectors of length {ae.param_dim}, got shape {x.shape}"
        )
    out = nn.forward_mlp(ae.net, x)
    return out[0] if was_vector else out


def train_autoencoder(
    buffer: SnapshotBuffer,
    cfg: DenoiserConfig,
    rng: np.random.Generator,
    ae_init: Callable[[int, DenoiserConfig, np.random.Generator], AutoencoderModel] | None = None,
) -> tuple[AutoencoderModel, NormalizationStats]:
    """Fit the denoiser on the buffered snapshots.

    Normalization stats are a scalar mean/std over every entry of every
    snapshot. Training is full-batch plain gradient descent on the squared
    reconstruction error, ``cfg.ae_epochs`` passes, deterministic given the
    rng used for initialization.
    """
    if len(buffer) < buffer.min_snapshots:
        raise InsufficientSnapshots(
            f"{len(buffer)} snapshots collected, need {buffer.min_snapshots}"
        )
    samples = np.stack(buffer.snapshots)
    stats = NormalizationStats.from_samples(samples)
    normalized = stats.normalize(samples)

    build = ae_init if ae_init is not None else build_autoencoder
    ae = build(samples.shape[1], cfg, rng)
    trained = _fit_mse(ae.net, normalized, cfg.ae_learning_rate, cfg.ae_epochs)
    return AutoencoderModel(trained, ae.param_dim), stats


def _fit_mse(net: nn.MlpModel, x: np.ndarray, lr: float, epochs: int) -> nn.MlpModel:
    """Full-batch gradient descent on the mean squared reconstruction error.

    The mean runs over all entries, so the loss curvature shrinks with the
    vector dimension and one learning rate stays stable across model sizes.
    Operates on its own copies of the layer arrays; the input net is
    untouched. Work buffers are allocated once because this loop dominates
    simulation time.
    """
    weights = [layer.weights.copy() for layer in net.layers]
    biases = [layer.biases.copy() for layer in net.layers]
    acts = [layer.activation for layer in net.layers]
    n_layers = len(acts)
    batch = x.shape[0]

    h_bufs = [np.empty((batch, w.shape[0])) for w in weights]
    d_bufs = [np.empty((batch, w.shape[1])) for w in weights]
    gw_bufs = [np.empty_like(w) for w in weights]

    # Divergence surfaces through the finiteness checks, not fp warnings.
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            h = x
            activations = [x]
            for i in range(n_layers):
                np.matmul(h, weights[i].T, out=h_bufs[i])
                h_bufs[i] += biases[i]
                if acts[i] == "relu":
                    np.maximum(h_bufs[i], 0.0, out=h_bufs[i])
                h = h_bufs[i]
                activations.append(h)
            if not np.isfinite(h).all():
                raise DenoiserDivergence("non-finite reconstruction loss during training")
            delta = h
            delta -= x
            delta *= 2.0 / delta.size
            for i in range(n_layers - 1, -1, -1):
                if acts[i] == "relu":
                    # relu(z) > 0 exactly where its derivative is 1
                    delta *= activations[i + 1] > 0.0
                np.matmul(delta.T, activations[i], out=gw_bufs[i])
                grad_b = delta.sum(axis=0)
                if i > 0:
                    np.matmul(delta, weights[i], out=d_bufs[i])
                    delta = d_bufs[i]
                gw_bufs[i] *= lr
                weights[i] -= gw_bufs[i]
                grad_b *= lr
                biases[i] -= grad_b

    for w, b in zip(weights, biases):
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise DenoiserDivergence("non-finite autoencoder parameters after training")
    return nn.MlpModel(
        [nn.DenseLayer(w, b, a) for w, b, a in zip(weights, biases, acts)]
    )


def denoise_and_mix(
    ae: AutoencoderModel,
    stats: NormalizationStats,
    delta: nn.ParamVector,
    mix_lambda: float,
) -> nn.ParamVector:
    """Convex mix of the raw final delta with its reconstruction.

    mix 0 returns the raw delta bit-exactly without touching the
    autoencoder; mix 1 returns the reconstruction exactly.
    """
    if not 0.0 <= mix_lambda <= 1.0:
        raise ConfigurationError(f"mix coefficient must lie in [0, 1], got {mix_lambda}")
    if mix_lambda == 0.0:
        return delta.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        recon = stats.denormalize(autoencoder_forward(ae, stats.normalize(delta.values)))
    if not np.isfinite(recon).all():
        raise DenoiserDivergence("non-finite reconstruction of the final delta")
    if mix_lambda == 1.0:
        return nn.ParamVector(recon, delta.layout)
    return nn.ParamVector((1.0 - mix_lambda) * delta.values + mix_lambda * recon, delta.layout)


GradFn = Callable[[nn.MlpModel, np.ndarray, np.ndarray], nn.ParamVector]


def _local_sgd(
    client_id: int,
    model: nn.MlpModel,
    features: np.ndarray,
    labels: np.ndarray,
    client_lr: float,
    k_steps: int,
    batch_size: int,
    rng: np.random.Generator,
    momentum: float,
    prox_mu: float,
    grad_fn: GradFn | None,
    buffer: SnapshotBuffer | None,
) -> nn.ParamVector:
    """Run k_steps of mini-batch SGD from the global model; returns final flat params.

    Batches are contiguous chunks of a fresh permutation drawn from the
    client's stream at the start of every local epoch. Velocity starts at
    zero (momentum state is not carried across rounds).
    """
    if k_steps < 1:
        raise ConfigurationError("need at least one local step")
    if batch_size < 1:
        raise ConfigurationError("batch size must be >= 1")
    n = features.shape[0]
    if n < 1:
        raise ConfigurationError("client shard is empty")
    grad = grad_fn if grad_fn is not None else nn.backward_mlp
    w_global = nn.flatten(model)
    w = w_global.copy()
    state = nn.SgdMomentumState(learning_rate=client_lr, momentum=momentum)
    order = np.empty(0, dtype=np.int64)
    offset = n  # force a reshuffle on the first step
    for k in range(k_steps):
        if offset >= n:
            order = rng.permutation(n)
            offset = 0
        batch_idx = order[offset : offset + batch_size]
        offset += batch_size
        # divergence surfaces through the finiteness check, not fp warnings
        with np.errstate(over="ignore", invalid="ignore"):
            current = nn.apply_flat(model, w)
            g = grad(current, features[batch_idx], labels[batch_idx])
            if prox_mu > 0.0:
                g = nn.ParamVector(g.values + prox_mu * (w.values - w_global.values), g.layout)
            w = nn.sgd_momentum_step(w, g, state)
        if not np.isfinite(w.values).all():
            raise DivergenceError(client_id, k)
        if buffer is not None:
            collect_snapshot(buffer, w_global, w, k)
    return w


def _upload(w_global: nn.ParamVector, delta_values: np.ndarray, client_lr: float) -> nn.ParamVector:
    return nn.ParamVector(delta_values / client_lr, w_global.layout)


def device_update(
    client_id: int,
    model: nn.MlpModel,
    features: np.ndarray,
    labels: np.ndarray,
    client_lr: float,
    k_steps: int,
    batch_size: int,
    rng: np.random.Generator,
    momentum: float = 0.0,
    grad_fn: GradFn | None = None,
) -> nn.ParamVector:
    """Plain local SGD; uploads (w_global - w_final) / client_lr."""
    w_global = nn.flatten(model)
    w_final = _local_sgd(
        client_id, model, features, labels, client_lr, k_steps, batch_size,
        rng, momentum, 0.0, grad_fn, None,
    )
    return _upload(w_global, w_global.values - w_final.values, client_lr)


def device_update_prox(
    client_id: int,
    model: nn.MlpModel,
    features: np.ndarray,
    labels: np.ndarray,
    client_lr: float,
    k_steps: int,
    batch_size: int,
    rng: np.random.Generator,
    prox_mu: float,
    momentum: float = 0.0,
    grad_fn: GradFn | None = None,
) -> nn.ParamVector:
    """Local SGD with the gradient augmented by prox_mu * (w_local - w_global).

    prox_mu zero reduces bit-exactly to device_update on the same stream.
    """
    if prox_mu < 0.0:
        raise ConfigurationError("proximal coefficient must be >= 0")
    w_global = nn.flatten(model)
    w_final = _local_sgd(
        client_id, model, features, labels, client_lr, k_steps, batch_size,
        rng, momentum, prox_mu, grad_fn, None,
    )
    return _upload(w_global, w_global.values - w_final.values, client_lr)


def device_update_ae(
    client_id: int,
    model: nn.MlpModel,
    features: np.ndarray,
    labels: np.ndarray,
    client_lr: float,
    k_steps: int,
    batch_size: int,
    cfg: DenoiserConfig,
    rng: np.random.Generator,
    momentum: float = 0.0,
    grad_fn: GradFn | None = None,
    ae_init: Callable[[int, DenoiserConfig, np.random.Generator], AutoencoderModel] | None = None,
) -> nn.ParamVector:
    """Local SGD with snapshot collection, denoising and mixing of the upload.

    Falls back to the raw update whenever the mix coefficient is zero, too
    few snapshots were collected, or the denoiser signals divergence; the
    fallback is bit-identical to device_update on the same stream.
    """
    w_global = nn.flatten(model)
    buffer = SnapshotBuffer(cfg.snapshot_step, cfg.min_snapshots)
    w_final = _local_sgd(
        client_id, model, features, labels, client_lr, k_steps, batch_size,
        rng, momentum, 0.0, grad_fn, buffer,
    )
    delta_final = w_global.values - w_final.values
    if cfg.mix_lambda == 0.0 or len(buffer) < buffer.min_snapshots:
        return _upload(w_global, delta_final, client_lr)
    try:
        ae, stats = train_autoencoder(buffer, cfg, rng, ae_init=ae_init)
        mixed = denoise_and_mix(
            ae, stats, nn.ParamVector(delta_final, w_global.layout), cfg.mix_lambda
        )
    except (InsufficientSnapshots, DenoiserDivergence):
        return _upload(w_global, delta_final, client_lr)
    return _upload(w_global, mixed.values, client_lr)
