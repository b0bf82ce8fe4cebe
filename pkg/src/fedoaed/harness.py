"""Round-loop orchestration with end-to-end determinism.

A run is fully determined by its config: every random draw comes from a
stream derived from (seed, purpose, round, client), rounds are sequential,
and per-round client work may fan out over a thread pool whose size never
affects results (updates are joined in client-id order before aggregating).
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import client as client_mod
from . import data, nn, seeding, strategies
from .errors import ConfigurationError, DataError, DivergenceError

THREADS_ENV_VAR = "FEDOAED_THREADS"

DATASETS = ("blobs", "idx")
PARTITIONS = ("dirichlet", "lq")


@dataclass
class ExperimentConfig:
    """Everything a run needs; defaults give a small label-skewed blob run."""

    dataset: str = "blobs"
    idx_images: str | None = None
    idx_labels: str | None = None
    idx_test_images: str | None = None
    idx_test_labels: str | None = None
    blob_classes: int = 10
    blob_dim: int = 20
    blob_per_class: int = 200
    blob_spread: float = 1.0
    test_fraction: float = 0.2

    partition: str = "dirichlet"
    alpha: float = 0.5
    lq_q: int = 2

    clients: int = 50
    fraction: float = 0.1
    rounds: int = 50
    local_epochs: int = 3
    batch: int = 20
    client_lr: float = 0.1
    momentum: float = 0.9
    server_lr: float | None = None
    hidden_sizes: tuple[int, ...] = (32,)

    strategy: str = "fedavg"
    renormalize_weights: bool = True
    prox_mu: float = 0.01

    mix_lambda: float = 0.1
    ae_latent: int = 32
    ae_hidden: int = 512
    ae_epochs: int = 10
    ae_lr: float = 0.2
    snapshot_step: int = 1
    min_snapshots: int = 4

    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        checks = [
            (self.dataset in DATASETS, "dataset", f"must be one of {DATASETS}"),
            (self.partition in PARTITIONS, "partition", f"must be one of {PARTITIONS}"),
            (self.strategy in strategies.STRATEGIES, "strategy",
             f"must be one of {strategies.STRATEGIES}"),
            (self.rounds >= 1, "rounds", "must be >= 1"),
            (0.0 < self.fraction <= 1.0, "fraction", "must lie in (0, 1]"),
            (self.clients >= 1, "clients", "must be >= 1"),
            (self.local_epochs >= 1, "local_epochs", "must be >= 1"),
            (self.batch >= 1, "batch", "must be >= 1"),
            (self.client_lr > 0.0, "client_lr", "must be > 0"),
            (0.0 <= self.momentum < 1.0, "momentum", "must lie in [0, 1)"),
            (self.server_lr is None or self.server_lr > 0.0, "server_lr", "must be > 0"),
            (self.alpha > 0.0, "alpha", "must be > 0"),
            (self.lq_q >= 1, "lq_q", "must be >= 1"),
            (0.0 <= self.mix_lambda <= 1.0, "lambda", "must lie in [0, 1]"),
            (self.ae_latent >= 1, "ae_latent", "must be >= 1"),
            (self.ae_hidden >= 1, "ae_hidden", "must be >= 1"),
            (self.ae_epochs >= 0, "ae_epochs", "must be >= 0"),
            (self.ae_lr > 0.0, "ae_lr", "must be > 0"),
            (self.snapshot_step >= 1, "snapshot_step", "must be >= 1"),
            (self.min_snapshots >= 1, "min_snapshots", "must be >= 1"),
            (self.prox_mu >= 0.0, "prox_mu", "must be >= 0"),
            (self.seed >= 0, "seed", "must be >= 0"),
            (self.eval_every >= 1, "eval_every", "must be >= 1"),
            (0.0 < self.test_fraction < 1.0, "test_fraction", "must lie in (0, 1)"),
            (self.blob_classes >= 2, "blob_classes", "must be >= 2"),
            (self.blob_dim >= 1, "blob_dim", "must be >= 1"),
            (self.blob_per_class >= 1, "blob_per_class", "must be >= 1"),
            (self.blob_spread > 0.0, "blob_spread", "must be > 0"),
            (len(self.hidden_sizes) == 0 or min(self.hidden_sizes) >= 1,
             "hidden_sizes", "must all be >= 1"),
        ]
        for ok, key, why in checks:
            if not ok:
                raise ConfigurationError(f"{key}: {why}")
        if self.dataset == "idx":
            for key in ("idx_images", "idx_labels", "idx_test_images", "idx_test_labels"):
                if getattr(self, key) is None:
                    raise ConfigurationError(f"{key}: required when dataset is 'idx'")

    @property
    def effective_server_lr(self) -> float:
        return self.client_lr if self.server_lr is None else self.server_lr

    def denoiser_config(self) -> client_mod.DenoiserConfig:
        return client_mod.DenoiserConfig(
            mix_lambda=self.mix_lambda,
            latent_dim=self.ae_latent,
            hidden_dim=self.ae_hidden,
            ae_learning_rate=self.ae_lr,
            ae_epochs=self.ae_epochs,
            snapshot_step=self.snapshot_step,
            min_snapshots=self.min_snapshots,
        )


@dataclass
class RoundRecord:
    """Metrics at one evaluation point; round 0 is the untrained model."""

    round_index: int
    test_accuracy: float
    test_loss: float
    mean_update_norm: float
    update_variance: float
    sampled_clients: tuple[int, ...]
    wall_clock_ms: float


@dataclass
class ExperimentResult:
    """Records plus the global parameter vector after every round."""

    records: list[RoundRecord]
    param_history: list[nn.ParamVector]

    @property
    def final_params(self) -> nn.ParamVector:
        return self.param_history[-1]


def evaluate(model: nn.MlpModel, features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Accuracy (argmax, ties to the lowest class index) and mean loss."""
    if features.shape[0] < 1:
        raise ConfigurationError("test set is empty")
    logits = nn.forward_mlp(model, features)
    loss, _ = nn.cross_entropy_loss(logits, labels)
    accuracy = float(np.mean(logits.argmax(axis=1) == labels))
    return accuracy, loss


def update_statistics(updates: list[nn.ParamVector]) -> tuple[float, float]:
    """Mean and population variance of the update L2 norms."""
    if not updates:
        raise ConfigurationError("no updates to summarize")
    norms = np.array([np.linalg.norm(g.values) for g in updates])
    mean = float(norms.mean())
    variance = float(np.mean((norms - mean) ** 2))
    return mean, variance


def resolve_workers(requested: int | None = None) -> int:
    """Worker cap from the environment, defaulting to hardware parallelism."""
    if requested is not None:
        return max(1, requested)
    env = os.environ.get(THREADS_ENV_VAR)
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV_VAR} must be an integer, got {env!r}")
    return os.cpu_count() or 1


def load_datasets(cfg: ExperimentConfig) -> tuple[data.Dataset, data.Dataset]:
    """Train/test pair per the config; test is disjoint from all shards."""
    if cfg.dataset == "blobs":
        full = data.gen_synthetic_blobs(
            cfg.blob_classes, cfg.blob_dim, cfg.blob_per_class, cfg.blob_spread, cfg.seed
        )
        return data.split_train_test(full, cfg.test_fraction, cfg.seed)
    train = data.load_idx(cfg.idx_images, cfg.idx_labels)
    test = data.load_idx(cfg.idx_test_images, cfg.idx_test_labels)
    if train.num_classes != test.num_classes:
        raise DataError(
            f"train set has {train.num_classes} classes but test set has {test.num_classes}"
        )
    if train.dim != test.dim:
        raise DataError(f"train dim {train.dim} != test dim {test.dim}")
    return train, test


def build_model(cfg: ExperimentConfig, input_dim: int, num_classes: int) -> nn.MlpModel:
    sizes = [input_dim, *cfg.hidden_sizes, num_classes]
    return nn.build_mlp(sizes, seeding.stream(cfg.seed, seeding.TAG_MODEL_INIT))


def _client_update(
    cfg: ExperimentConfig,
    global_model: nn.MlpModel,
    cid: int,
    round_index: int,
    features: np.ndarray,
    labels: np.ndarray,
    k_steps: int,
) -> nn.ParamVector:
    rng = seeding.client_stream(cfg.seed, round_index, cid)
    common = dict(
        client_id=cid,
        model=global_model,
        features=features,
        labels=labels,
        client_lr=cfg.client_lr,
        k_steps=k_steps,
        batch_size=cfg.batch,
        rng=rng,
        momentum=cfg.momentum,
    )
    if cfg.strategy == "fedprox":
        return client_mod.device_update_prox(prox_mu=cfg.prox_mu, **common)
    if cfg.strategy == "fedoaed":
        return client_mod.device_update_ae(cfg=cfg.denoiser_config(), **common)
    return client_mod.device_update(**common)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[RoundRecord]:
    """Execute the full round loop; returns one record per evaluated round."""
    return run_experiment_detailed(cfg, workers).records


def run_experiment_detailed(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    """As run_experiment, additionally keeping the per-round parameter history."""
    start = time.perf_counter()
    train, test = load_datasets(cfg)
    spec = data.PartitionSpec(
        scheme=cfg.partition,
        num_clients=cfg.clients,
        seed=cfg.seed,
        alpha=cfg.alpha,
        label_quantity=cfg.lq_q,
    )
    shards = data.partition(train, spec)
    shard_data = {
        s.client_id: (train.features[s.indices], train.labels[s.indices]) for s in shards
    }
    shard_weight = {s.client_id: s.weight for s in shards}
    k_steps = {
        s.client_id: cfg.local_epochs * math.ceil(s.size / cfg.batch) for s in shards
    }

    template = build_model(cfg, train.dim, train.num_classes)
    state = strategies.ServerState(
        w_global=nn.flatten(template),
        strategy=cfg.strategy,
        server_lr=cfg.effective_server_lr,
        num_clients=cfg.clients,
        renormalize_weights=cfg.renormalize_weights,
    )
    pool_size = resolve_workers(workers)

    def elapsed_ms() -> float:
        return (time.perf_counter() - start) * 1000.0

    records = []
    history = [state.w_global]
    acc, loss = evaluate(template, test.features, test.labels)
    records.append(RoundRecord(0, acc, loss, 0.0, 0.0, (), elapsed_ms()))

    for t in range(cfg.rounds):
        sampled = strategies.sample_clients(cfg.clients, cfg.fraction, t, cfg.seed)
        global_model = nn.apply_flat(template, state.w_global)

        def task(cid: int) -> nn.ParamVector:
            feats, labs = shard_data[cid]
            return _client_update(cfg, global_model, cid, t, feats, labs, k_steps[cid])

        try:
            if pool_size > 1 and len(sampled) > 1:
                with ThreadPoolExecutor(max_workers=pool_size) as pool:
                    results = list(pool.map(task, sampled))
            else:
                results = [task(cid) for cid in sampled]
        except DivergenceError as err:
            raise DivergenceError(
                err.client_id, err.step, f"non-finite parameters in round {t}"
            ) from err

        updates = [(cid, g, shard_weight[cid]) for cid, g in zip(sampled, results)]
        mean_norm, variance = update_statistics(results)
        strategies.aggregate(state, updates)
        history.append(state.w_global)

        if (t + 1) % cfg.eval_every == 0 or t + 1 == cfg.rounds:
            current = nn.apply_flat(template, state.w_global)
            acc, loss = evaluate(current, test.features, test.labels)
            records.append(
                RoundRecord(t + 1, acc, loss, mean_norm, variance, tuple(sampled), elapsed_ms())
            )
    return ExperimentResult(records, history)


def config_with(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Copy of the config with some fields replaced (revalidates)."""
    return replace(cfg, **overrides)
