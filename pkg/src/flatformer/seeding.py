"""Deterministic seed derivation: one run seed fans out to named substreams."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(base: int, stream: str) -> int:
    """Stable 63-bit seed for a named substream of ``base``."""
    digest = hashlib.sha256(f"{base}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def numpy_rng(base: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, stream))


def seed_torch(base: int, stream: str) -> None:
    torch.manual_seed(derive_seed(base, stream))
