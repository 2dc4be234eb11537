"""Magnitude sparsification with local gradient accumulation (error feedback)."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def apply_accumulator(g: np.ndarray, acc: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float32)
    acc = np.asarray(acc, dtype=np.float32)
    if g.shape != acc.shape:
        raise ValueError(f"gradient shape {g.shape} does not match accumulator {acc.shape}")
    return g + acc


def zero_count_target(n: int, theta: float) -> int:
    """Number of entries that must become zero: ``ceil(theta * n / 100)``."""
    # exact rational arithmetic: theta=98.75, n=10**4 must give 9875
    return math.ceil(Fraction(str(theta)) * n / 100)


def magnitude_threshold(g: np.ndarray, theta: float) -> float:
    """The ``c``-th smallest magnitude of ``g`` (0 when nothing must be zeroed).

    Uses ``np.partition`` (introselect), so it is linear time on average.
    """
    g = np.asarray(g).reshape(-1)
    c = zero_count_target(g.size, theta)
    if c == 0:
        return 0.0
    mags = np.abs(g)
    return float(np.partition(mags, c - 1)[c - 1])


def sparsify(g: np.ndarray, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero at least ``theta`` percent of ``g`` by magnitude.

    Entries with ``|g| <= tau`` move to the residual untouched, all others stay
    in the sparse output, so ``sparse + residual == g`` exactly. Ties at the
    threshold are all zeroed, which can push the zero count above the target.

    Returns ``(sparse, residual)``.
    """
    if not 0 <= theta <= 100:
        raise ValueError(f"theta must be within [0, 100], got {theta}")
    g = np.asarray(g, dtype=np.float32)
    if g.size < 1:
        raise ValueError("cannot sparsify an empty vector")
    if np.isnan(g).any():
        raise ValueError("gradient contains NaN")
    if zero_count_target(g.size, theta) == 0:
        return g.copy(), np.zeros_like(g)
    tau = magnitude_threshold(g, theta)
    drop = np.abs(g) <= tau
    sparse = np.where(drop, np.float32(0), g)
    residual = np.where(drop, g, np.float32(0))
    return sparse, residual


class ResidualAccumulator:
    """Per-(shard, rank) buffer of gradient mass withheld by sparsification."""

    def __init__(self, n: int):
        self.values = np.zeros(n, dtype=np.float32)

    def __len__(self):
        return self.values.size

    def step(self, g: np.ndarray, theta: float) -> np.ndarray:
        """Add the carried residual to ``g``, sparsify, keep the new residual."""
        sparse, self.values = sparsify(apply_accumulator(g, self.values), theta)
        return sparse
