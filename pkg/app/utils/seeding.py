"""Stable per-task seeds derived from a single run seed."""

import hashlib

import numpy as np


def derive_seed(seed: int, task_id: str) -> int:
    """Hash ``seed`` and ``task_id`` into a 64-bit seed (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(f"{seed}:{task_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def task_rng(seed: int, task_id: str) -> np.random.Generator:
    """Generator for one named task."""
    return np.random.default_rng(derive_seed(seed, task_id))
