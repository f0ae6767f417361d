"""Utility functions for the application."""

from app.utils.async_helpers import gather_threads, run_sync
from app.utils.seeding import derive_seed, task_rng

__all__ = ["derive_seed", "gather_threads", "run_sync", "task_rng"]
