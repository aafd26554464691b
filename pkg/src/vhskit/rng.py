"""Deterministic, hierarchically derived random streams.

Every source of randomness in a run is a child generator derived from the
master seed plus a tuple of tokens (purpose string, epoch, sample id, pass
index, ...). Streams are therefore independent of scheduling: the dropout
mask a sample sees does not depend on which batch it landed in, and a Monte
Carlo pass does not depend on how the pool was chunked.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _token_entropy(token) -> list[int]:
    if isinstance(token, (int, np.integer)):
        return [int(token) & _MASK64]
    digest = hashlib.blake2b(str(token).encode("utf-8"), digest_size=16).digest()
    return [
        int.from_bytes(digest[:8], "little"),
        int.from_bytes(digest[8:], "little"),
    ]


def derive_rng(master_seed: int, *tokens) -> np.random.Generator:
    """Child generator keyed by (master_seed, *tokens); stable across runs."""
    entropy = [int(master_seed) & _MASK64]
    for token in tokens:
        entropy.extend(_token_entropy(token))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def generator_state(rng: np.random.Generator) -> dict:
    """JSON-serializable state of a generator's bit generator."""
    return rng.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    """Rebuild a generator from a state dict produced by generator_state."""
    name = state.get("bit_generator", "PCG64")
    bit_gen = getattr(np.random, name)()
    bit_gen.state = state
    return np.random.Generator(bit_gen)


def derive_seed(master_seed: int, *tokens) -> int:
    """Stable 63-bit integer keyed like derive_rng, for nested derivations."""
    entropy = [int(master_seed) & _MASK64]
    for token in tokens:
        entropy.extend(_token_entropy(token))
    word = np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]
    return int(word) & ((1 << 63) - 1)
