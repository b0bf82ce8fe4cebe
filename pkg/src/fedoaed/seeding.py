"""Derivation of independent RNG streams from a single experiment seed.

Every source of randomness in a run is a numpy Generator seeded with
(experiment_seed, purpose tag, ...context ints). Streams therefore depend
only on the seed and the logical position of the draw, never on scheduling,
which is what makes runs bit-reproducible at any worker count.
"""

from __future__ import annotations

import numpy as np

# Purpose tags keeping unrelated streams disjoint.
TAG_BLOBS = 11
TAG_SPLIT = 12
TAG_DIRICHLET = 13
TAG_LABEL_QTY = 14
TAG_MODEL_INIT = 15
TAG_SAMPLING = 16
TAG_CLIENT = 17


def stream(*keys: int) -> np.random.Generator:
    """Build a Generator from a tuple of integer keys."""
    return np.random.default_rng(list(keys))


def client_stream(experiment_seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """The dedicated stream for one client in one round.

    Derived solely from (seed, round, client), so results do not depend on
    which worker runs the client or in what order.
    """
    return stream(experiment_seed, TAG_CLIENT, round_index, client_id)
