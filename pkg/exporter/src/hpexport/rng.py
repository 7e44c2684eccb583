"""Deterministic per-label RNG derivation (independent of the engine's streams)."""

import hashlib

import numpy as np


def derive_generator(seed: int, label: str) -> np.random.Generator:
    h = hashlib.blake2s(digest_size=8)
    h.update(repr(int(seed)).encode("ascii"))
    h.update(label.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(int.from_bytes(h.digest(), "little")))
