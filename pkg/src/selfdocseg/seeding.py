"""Stable derivation of independent random streams from one global seed.

Every stage asks for a stream by name (``"docgen:17"``, ``"augment:epoch:3"``)
so that stages stay reproducible on their own and do not depend on how many
draws an earlier stage consumed.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, key))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)
