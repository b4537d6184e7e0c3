"""Diversity ranking of pruned frames.

Each frame is summarized by the feature-space centers of a small per-frame
k-means (one cluster per semantic class). A frame's score combines how
spread-out its own centers are (intra-scene) with how dissimilar it is from
every other frame (inter-scene); the top-S scores win. Dissimilarity is
1 - cosine similarity throughout, so scores ignore any uniform rescaling of
the features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import kmeans
from .datamodel import Frame
from .errors import (
    BudgetExceedsPoolError,
    DegenerateError,
    DimMismatchError,
    TooFewFramesError,
    TooFewPointsError,
    ZeroVectorError,
)


@dataclass(frozen=True)
class SceneSignature:
    """Feature-space cluster centers standing in for one scan."""

    frame_id: str
    centers: np.ndarray   # (C, D) float64

    def __post_init__(self):
        c = np.ascontiguousarray(self.centers, dtype=np.float64)
        if c.ndim != 2 or not np.all(np.isfinite(c)):
            raise DegenerateError("signature centers must be a finite 2-D matrix")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)


@dataclass(frozen=True)
class DiversityScore:
    frame_id: str
    score: float


def scene_signature(frame: Frame, num_centers: int, seed: int) -> SceneSignature:
    """Cluster the frame's features into ``num_centers`` groups (one per class)."""
    if frame.num_points < num_centers:
        raise TooFewPointsError(
            f"frame {frame.frame_id}: {frame.num_points} points < {num_centers} centers"
        )
    clustering = kmeans(frame.features, num_centers, seed)
    return SceneSignature(frame.frame_id, clustering.centroids)


def _unit_rows(centers: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(centers, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVectorError("signature contains an all-zero center")
    return centers / norms[:, None]


def intra_scene_diversity(sig: SceneSignature) -> float:
    """Mean 1 - cos over all unordered pairs of the scene's centers."""
    c = sig.centers.shape[0]
    if c < 2:
        raise DegenerateError("intra-scene diversity needs at least 2 centers")
    u = _unit_rows(sig.centers)
    gram = u @ u.T
    iu = np.triu_indices(c, k=1)
    return float(np.mean(1.0 - gram[iu]))


def inter_scene_diversity(a: SceneSignature, b: SceneSignature) -> float:
    """Mean 1 - cos over all ordered cross pairs of two scenes' centers."""
    if a.centers.shape[1] != b.centers.shape[1]:
        raise DimMismatchError(
            f"signature dims differ: {a.centers.shape[1]} vs {b.centers.shape[1]}"
        )
    ua = _unit_rows(a.centers)
    ub = _unit_rows(b.centers)
    return float(np.mean(1.0 - ua @ ub.T))


def diversity_scores(sigs: list[SceneSignature]) -> list[DiversityScore]:
    """score_i = mean over j != i of d_i * d_j * d_ij.

    d_i and d_j are the scenes' intra diversities and d_ij the inter-scene
    diversity. Because d_ij = 1 - gbar_i . gbar_j with gbar the mean of a
    scene's unit centers, the sum over j factors: no |F| x |F| matrix is ever
    built and the whole pool runs in O(|F| C^2 D) with O(|F| D) memory, far
    inside the quadratic bound the brute-force pairing would need.
    """
    n = len(sigs)
    if n < 2:
        raise TooFewFramesError("diversity scores need at least 2 frames")

    d = np.array([intra_scene_diversity(s) for s in sigs])
    gbar = np.stack([_unit_rows(s.centers).mean(axis=0) for s in sigs])

    d_total = d.sum()
    w = (d[:, None] * gbar).sum(axis=0)          # sum_j d_j gbar_j
    g_self = np.einsum("id,id->i", gbar, gbar)    # |gbar_i|^2

    # sum_{j != i} d_j (1 - gbar_i . gbar_j), written without the j loop
    cross = (d_total - d) - (gbar @ w - d * g_self)
    scores = d * cross / (n - 1)
    return [DiversityScore(s.frame_id, float(v)) for s, v in zip(sigs, scores)]


def select_frames(scores: list[DiversityScore], budget: int) -> list[str]:
    """The ``budget`` highest-scoring frame ids, ties broken by frame_id."""
    if budget < 1 or budget > len(scores):
        raise BudgetExceedsPoolError(
            f"budget {budget} outside [1, {len(scores)}] frames"
        )
    ranked = sorted(scores, key=lambda s: (-s.score, s.frame_id))
    return [s.frame_id for s in ranked[:budget]]
