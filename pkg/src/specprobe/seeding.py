"""Seed derivation. Every random stream is a counter-based Philox generator
keyed by a hash of (master seed, purpose label, index...), so any stream can
be regenerated on its own without replaying the others."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(repr(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def train_seed(master: int, k: int) -> int:
    return derive_seed(master, "train", k)


def test_seed(master: int) -> int:
    return derive_seed(master, "test")


def revise_seed(master: int, k: int) -> int:
    return derive_seed(master, "revise", k)


def llm_seed(sample_seed: int) -> int:
    """Seed handed to the generator role for the llm share of one mixture draw."""
    return derive_seed(sample_seed, "llm")
