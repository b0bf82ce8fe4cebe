"""Server-side logic: client sampling, aggregation, and update memory.

All aggregation rules sum in ascending client-id order so the new global
model is bit-identical under any permutation of the incoming updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, seeding
from .errors import ConfigurationError, InternalError

STRATEGIES = ("fedavg", "fedprox", "fedoaed", "mifa", "fedvarp")

# Strategies whose server keeps a per-client table of the most recent update.
MEMORY_STRATEGIES = ("mifa", "fedvarp")


@dataclass
class ServerState:
    """Global model plus per-strategy bookkeeping."""

    w_global: nn.ParamVector
    strategy: str
    server_lr: float
    num_clients: int
    round_index: int = 0
    renormalize_weights: bool = True
    memory: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.server_lr <= 0.0:
            raise ConfigurationError("server learning rate must be > 0")
        if self.strategy in MEMORY_STRATEGIES:
            if self.memory is None:
                self.memory = np.zeros((self.num_clients, self.w_global.size))
            elif self.memory.shape != (self.num_clients, self.w_global.size):
                raise InternalError("memory table does not match the model layout")
        elif self.memory is not None:
            raise InternalError(f"strategy {self.strategy} keeps no update memory")


# One update as received by the server: (client id, uploaded vector, weight p).
Update = tuple[int, nn.ParamVector, float]


def sample_clients(
    total_clients: int, fraction: float, round_index: int, experiment_seed: int
) -> list[int]:
    """Uniform sample without replacement from a per-round stream, sorted."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError("participation fraction must lie in (0, 1]")
    count = max(1, int(np.floor(fraction * total_clients + 0.5)))
    rng = seeding.stream(experiment_seed, seeding.TAG_SAMPLING, round_index)
    picked = rng.choice(total_clients, size=count, replace=False)
    return sorted(int(c) for c in picked)


def _sorted_updates(state: ServerState, updates: list[Update]) -> list[Update]:
    if not updates:
        raise ConfigurationError("no updates to aggregate")
    for cid, g, _ in updates:
        if g.layout != state.w_global.layout:
            raise InternalError(f"update from client {cid} does not match the model layout")
    return sorted(updates, key=lambda u: u[0])


def aggregate_fedavg(state: ServerState, updates: list[Update]) -> nn.ParamVector:
    """w <- w - server_lr * sum_i p_i g_i, weights renormalized over the round.

    With renormalization and server_lr equal to the client rate this is the
    weighted average of the clients' final local iterates.
    """
    ordered = _sorted_updates(state, updates)
    weight_sum = sum(p for _, _, p in ordered)
    if weight_sum <= 0.0:
        raise ConfigurationError("aggregation weights must sum to a positive value")
    total = np.zeros_like(state.w_global.values)
    for _, g, p in ordered:
        scale = p / weight_sum if state.renormalize_weights else p
        total += scale * g.values
    new_w = nn.ParamVector(state.w_global.values - state.server_lr * total, state.w_global.layout)
    state.w_global = new_w
    state.round_index += 1
    return new_w


def aggregate_mifa(state: ServerState, updates: list[Update]) -> nn.ParamVector:
    """Overwrite participants' stored updates, then step on the mean of all K."""
    if state.memory is None:
        raise InternalError("mifa aggregation needs an update memory")
    ordered = _sorted_updates(state, updates)
    for cid, g, _ in ordered:
        state.memory[cid] = g.values
    mean_update = state.memory.sum(axis=0) / state.num_clients
    new_w = nn.ParamVector(
        state.w_global.values - state.server_lr * mean_update, state.w_global.layout
    )
    state.w_global = new_w
    state.round_index += 1
    return new_w


def aggregate_fedvarp(state: ServerState, updates: list[Update]) -> nn.ParamVector:
    """Correction term over the round's clients plus the mean of the memory.

    v = (1/|S|) sum_{i in S} (g_i - memory[i]) + (1/K) sum_j memory[j];
    the memory is overwritten only after v is computed.
    """
    if state.memory is None:
        raise InternalError("fedvarp aggregation needs an update memory")
    ordered = _sorted_updates(state, updates)
    inv_round = 1.0 / len(ordered)
    v = np.zeros_like(state.w_global.values)
    for cid, g, _ in ordered:
        v += inv_round * (g.values - state.memory[cid])
    v += state.memory.sum(axis=0) / state.num_clients
    for cid, g, _ in ordered:
        state.memory[cid] = g.values
    new_w = nn.ParamVector(state.w_global.values - state.server_lr * v, state.w_global.layout)
    state.w_global = new_w
    state.round_index += 1
    return new_w


AGGREGATORS = {
    "fedavg": aggregate_fedavg,
    "fedprox": aggregate_fedavg,
    "fedoaed": aggregate_fedavg,
    "mifa": aggregate_mifa,
    "fedvarp": aggregate_fedvarp,
}


def aggregate(state: ServerState, updates: list[Update]) -> nn.ParamVector:
    return AGGREGATORS[state.strategy](state, updates)
