"""Counter-based random sources for deterministic sharded simulation."""

import numpy as np


def shard_rng(master_seed: int, shard_index: int) -> np.random.Generator:
    """Return the random generator for one simulation shard.

    Philox is counter-based, so keying the generator with the pair
    (master_seed, shard_index) yields statistically independent streams
    whose content does not depend on execution order or thread count.
    """
    if not 0 <= master_seed < 2**64:
        raise ValueError(f"master_seed must fit in uint64, got {master_seed}")
    if not 0 <= shard_index < 2**64:
        raise ValueError(f"shard_index must fit in uint64, got {shard_index}")
    key = np.array([master_seed, shard_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def bernoulli_positions(rng: np.random.Generator, n_trials: int, p: float) -> np.ndarray:
    """Indices of successes of a Bernoulli(p) process over ``n_trials`` slots.

    Sampled exactly via geometric inter-arrival gaps, so the cost is
    O(successes) instead of O(trials).  Returns a sorted int64 array.
    """
    if n_trials < 0:
        raise ValueError("n_trials must be nonnegative")
    if p < 0.0 or p > 1.0:
        raise ValueError("p must be a probability")
    if p == 0.0 or n_trials == 0:
        return np.empty(0, dtype=np.int64)
    chunks = []
    last = -1
    while True:
        expect = (n_trials - last) * p
        n_draw = int(expect + 6.0 * np.sqrt(expect + 1.0)) + 16
        gaps = rng.geometric(p, size=n_draw).astype(np.int64)
        pos = last + np.cumsum(gaps)
        if pos[-1] >= n_trials:
            chunks.append(pos[pos < n_trials])
            break
        chunks.append(pos)
        last = int(pos[-1])
    return np.concatenate(chunks)
