"""
Utility Functions
Helpers for logging, worker counts, seeding and dtype resolution
"""

import logging
from typing import Optional

import numpy as np

from mtscan.config import Config


# Logging Configuration
def setup_logging(log_level: Optional[str] = None) -> logging.Logger:
    """
    Configure logging for the library

    Args:
        log_level: Logging level (uses Config if None)

    Returns:
        Configured logger instance
    """
    level = log_level or Config.LOG_LEVEL
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    logger = logging.getLogger(Config.LOGGER_NAME)
    return logger


def resolve_threads(requested: Optional[int] = None) -> int:
    """
    Number of workers an op may fan out to

    Args:
        requested: Explicit worker count (None uses MTK_THREADS)

    Returns:
        Worker count, never above the MTK_THREADS cap and never below 1
    """
    cap = max(1, Config.MTK_THREADS)
    if requested is None:
        return cap
    return max(1, min(int(requested), cap))


def resolve_dtype(name: Optional[str] = None) -> np.dtype:
    """Map "f32"/"f64" (or None for MTK_DTYPE) onto a numpy dtype"""
    name = name or Config.MTK_DTYPE
    if name == "f32":
        return np.dtype(np.float32)
    if name == "f64":
        return np.dtype(np.float64)
    raise ValueError(f"unknown dtype {name!r}, expected f32 or f64")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Seeded generator; extra integers select an independent sub-stream

    Args:
        seed: Base seed
        *stream: Sub-stream identifiers (e.g. sample index)

    Returns:
        numpy Generator
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(s) for s in stream]]))
