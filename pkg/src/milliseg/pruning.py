"""Drop near-duplicate consecutive frames from a sequence.

The sweep keeps the first frame as the base, discards every following frame
whose descriptor is too similar to the base, and promotes the first frame
that differs enough (cosine similarity strictly below the threshold) to be
the new base. Each sequence is pruned independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import FrameDescriptor
from .errors import DimMismatchError, EmptySequenceError, ZeroVectorError


@dataclass(frozen=True)
class PruneConfig:
    """Similarity threshold for the sweep.

    tau = 1 keeps every frame that is not an exact duplicate of the base;
    tau = -1 keeps only the first frame of the sequence.
    """

    tau: float

    def __post_init__(self):
        if not np.isfinite(self.tau) or not (-1.0 <= self.tau <= 1.0):
            raise ValueError(f"tau must be in [-1, 1], got {self.tau}")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a, b) / (|a| |b|), clamped to [-1, 1] against rounding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatchError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity undefined for all-zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def prune_sequence(
    descriptors: list[FrameDescriptor], cfg: PruneConfig
) -> list[int]:
    """Return the kept indices of one sequence, in sweep order.

    Index 0 is always kept. Frame i is kept iff its similarity to the current
    base is strictly below tau, and then becomes the new base; a frame exactly
    at tau counts as redundant and is dropped.
    """
    if not descriptors:
        raise EmptySequenceError("cannot prune an empty sequence")
    kept = [0]
    base = descriptors[0].vector
    for i in range(1, len(descriptors)):
        if cosine_similarity(base, descriptors[i].vector) < cfg.tau:
            kept.append(i)
            base = descriptors[i].vector
    return kept
