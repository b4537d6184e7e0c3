"""Budget-driven k-means over per-point features and click propagation.

The clustering budget converts a target click fraction into a per-frame k,
k-means over-segments the frame (k well above the class count), one point
per cluster is picked for labeling (the member nearest the centroid), and
that label is copied to every point of the cluster.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .datamodel import (
    FORMAT_VERSION,
    SOURCE_CLICKED,
    SOURCE_PROPAGATED,
    UNLABELED,
    Frame,
    PseudoLabels,
)
from .errors import (
    BadKError,
    EmptyClusterError,
    IOFailureError,
    LengthMismatchError,
    MalformedFileError,
)

CLUSTERING_MAGIC = b"MLNC"
_CLUSTERING_HEADER = struct.Struct("<4sIQI")

MAX_ITERS = 100
MOVEMENT_TOL = 1e-6   # sum of squared centroid displacements


@dataclass(frozen=True)
class ClusterBudget:
    """Click budget as a fraction alpha of the points in each frame.

    Either give ``alpha`` directly, or give ``clicks`` (a total point budget N)
    together with ``total_points`` (points in all selected frames), in which
    case alpha = N / total_points. ``min_factor`` keeps the per-frame k at
    least min_factor * num_classes so rare classes still get clusters.
    """

    alpha: float = 0.0
    clicks: int | None = None
    total_points: int | None = None
    min_factor: int = 10

    def __post_init__(self):
        if self.clicks is not None:
            if not self.total_points:
                raise BadKError("a click budget needs total_points to derive alpha")
            object.__setattr__(self, "alpha", self.clicks / self.total_points)
        if not (0.0 < self.alpha <= 1.0):
            raise BadKError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.min_factor < 1:
            raise BadKError(f"min_factor must be positive, got {self.min_factor}")


def budget_to_k(budget: ClusterBudget, m_frame: int, num_classes: int) -> int:
    """k = max(ceil(alpha * M), min_factor * num_classes), clamped to M.

    The ceiling is taken over the exact rational value of alpha (floats like
    0.01 are snapped to the nearest small fraction first), so 0.01 * 100000
    yields 1000 rather than tipping to 1001 through binary rounding.
    """
    if m_frame < 1:
        raise BadKError(f"frame must have at least one point, got {m_frame}")
    frac = Fraction(budget.alpha).limit_denominator(1_000_000_000)
    from_alpha = -((-frac.numerator * m_frame) // frac.denominator)
    k = max(from_alpha, budget.min_factor * num_classes)
    return min(k, m_frame)


@dataclass(frozen=True)
class Clustering:
    """k-means result: per-point assignments, centroids, center point indices.

    ``objective_trace`` records the within-cluster sum of squares after each
    Lloyd iteration; it is non-increasing by construction.
    """

    assignments: np.ndarray          # (M,) uint32 in [0, k)
    centroids: np.ndarray            # (k, D) float64
    center_points: np.ndarray | None = None   # (k,) uint32 point indices
    objective_trace: tuple[float, ...] = ()

    def __post_init__(self):
        a = np.ascontiguousarray(self.assignments, dtype=np.uint32)
        c = np.ascontiguousarray(self.centroids, dtype=np.float64)
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "assignments", a)
        object.__setattr__(self, "centroids", c)
        if self.center_points is not None:
            cp = np.ascontiguousarray(self.center_points, dtype=np.uint32)
            cp.setflags(write=False)
            object.__setattr__(self, "center_points", cp)

    @property
    def num_points(self) -> int:
        return self.assignments.shape[0]

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]


def _plus_plus_init(x: np.ndarray, x_sq: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws, first center uniform."""
    m = x.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(m)
    d2 = np.maximum(x_sq - 2.0 * (x @ x[chosen[0]]) + x_sq[chosen[0]], 0.0)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All remaining mass on already-chosen duplicates; take the first
            # index not yet used so k distinct centers always come back.
            mask = np.ones(m, dtype=bool)
            mask[chosen[:j]] = False
            chosen[j] = np.flatnonzero(mask)[0]
        else:
            r = rng.random() * total
            chosen[j] = int(np.searchsorted(np.cumsum(d2), r, side="right"))
        c = chosen[j]
        d2 = np.minimum(d2, np.maximum(x_sq - 2.0 * (x @ x[c]) + x_sq[c], 0.0))
    return x[chosen].astype(np.float64)


def _assign(x, x_sq, centroids, buf=None):
    """Nearest-centroid assignment plus each point's squared distance.

    The matmul runs in the input's own precision (float32 features stay
    float32), which is where nearly all the time goes. The per-point ||x||^2
    term is constant along each row, so argmin only needs -2 x.c + ||c||^2;
    the true squared distance is reconstructed for the winners alone.
    """
    c = centroids.astype(x.dtype, copy=False)
    part = np.matmul(x, c.T, out=buf)
    part *= -2.0
    part += np.einsum("ij,ij->j", c.T, c.T)[None, :]
    assign = np.argmin(part, axis=1)
    point_d2 = np.maximum(
        part[np.arange(x.shape[0]), assign].astype(np.float64) + x_sq, 0.0
    )
    return assign, point_d2


def kmeans(features: np.ndarray, k: int, seed: int) -> Clustering:
    """Lloyd iterations from k-means++ seeding, deterministic for a seed.

    Stops after MAX_ITERS or when the summed squared centroid movement drops
    below MOVEMENT_TOL. Clusters emptied by an assignment step are repaired by
    moving in the point currently farthest from its own centroid, so every
    cluster id in [0, k) keeps at least one member.
    """
    x = np.ascontiguousarray(features)
    if x.dtype != np.float32:
        x = x.astype(np.float64)
    if x.ndim != 2:
        raise BadKError(f"features must be 2-D, got shape {x.shape}")
    m, d = x.shape
    if k < 1 or k > m:
        raise BadKError(f"k={k} outside [1, M={m}]")
    if not np.all(np.isfinite(x)):
        raise BadKError("features must be finite")

    rng = np.random.default_rng(seed)
    x_sq = np.einsum("ij,ij->i", x, x, dtype=np.float64)
    centroids = _plus_plus_init(x, x_sq, k, rng)
    total_sq = float(x_sq.sum())

    dim_offsets = np.arange(d, dtype=np.int64)
    assignments = np.zeros(m, dtype=np.int64)
    trace: list[float] = []
    prev_obj = np.inf
    buf = np.empty((m, k), dtype=x.dtype)

    for _ in range(MAX_ITERS):
        assignments, point_d2 = _assign(x, x_sq, centroids, buf)

        counts = np.bincount(assignments, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            # Steal the farthest point whose cluster survives losing it.
            eligible = counts[assignments] > 1
            if not eligible.any():
                raise EmptyClusterError("cannot repair: no cluster has two members")
            cand = np.where(eligible, point_d2, -1.0)
            p = int(np.argmax(cand))
            counts[assignments[p]] -= 1
            counts[empty] += 1
            assignments[p] = empty
            point_d2[p] = 0.0

        # Scatter-sum via one flat bincount; accumulation is float64 either way.
        flat = assignments[:, None] * d + dim_offsets
        sums = np.bincount(
            flat.ravel(), weights=x.ravel().astype(np.float64, copy=False),
            minlength=k * d,
        ).reshape(k, d)
        new_centroids = sums / counts[:, None]

        movement = float(np.sum((new_centroids - centroids) ** 2))
        centroids = new_centroids

        # With centroids at the member means, WCSS reduces to a cheap identity.
        obj = total_sq - float(np.sum(counts * np.sum(centroids**2, axis=1)))
        obj = max(obj, 0.0)
        # Tolerance covers float32 rounding in the assignment distances.
        assert obj <= prev_obj + 1e-6 * max(1.0, abs(prev_obj)), (
            f"k-means objective increased: {prev_obj} -> {obj}"
        )
        prev_obj = obj
        trace.append(obj)

        if movement < MOVEMENT_TOL:
            break

    return Clustering(
        assignments=assignments.astype(np.uint32),
        centroids=centroids,
        objective_trace=tuple(trace),
    )


def cluster_centers(clustering: Clustering, features: np.ndarray) -> np.ndarray:
    """Per cluster, the member closest to the centroid (feature-space L2).

    Ties go to the lowest point index: the lexsort key order makes the first
    row of each cluster group exactly that point.
    """
    x = np.asarray(features, dtype=np.float64)
    assignments = clustering.assignments.astype(np.int64)
    k = clustering.num_clusters
    counts = np.bincount(assignments, minlength=k)
    if counts.min(initial=1) == 0:
        raise EmptyClusterError(f"cluster {int(np.argmin(counts))} has no members")

    own = clustering.centroids[assignments]
    d2 = np.einsum("ij,ij->i", x - own, x - own)
    order = np.lexsort((np.arange(x.shape[0]), d2, assignments))
    firsts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return order[firsts].astype(np.uint32)


def with_center_points(clustering: Clustering, features: np.ndarray) -> Clustering:
    return replace(clustering, center_points=cluster_centers(clustering, features))


def propagate_labels(
    clustering: Clustering,
    center_labels: np.ndarray,
    frame_id: str = "",
) -> PseudoLabels:
    """Copy each cluster center's label to every member of its cluster."""
    labels_in = np.asarray(center_labels, dtype=np.uint32)
    if labels_in.shape != (clustering.num_clusters,):
        raise LengthMismatchError(
            f"{labels_in.shape[0] if labels_in.ndim else 0} center labels "
            f"for k={clustering.num_clusters} clusters"
        )
    if np.any(labels_in == UNLABELED):
        raise LengthMismatchError("center labels must be real class ids")
    if clustering.center_points is None:
        raise EmptyClusterError("clustering has no center points; compute them first")

    labels = labels_in[clustering.assignments]
    source = np.full(clustering.num_points, SOURCE_PROPAGATED, dtype=np.uint8)
    source[clustering.center_points] = SOURCE_CLICKED
    return PseudoLabels(frame_id, labels, source)


def cluster_frame(
    frame: Frame,
    budget: ClusterBudget,
    num_classes: int,
    seed: int,
    use_coords: bool = False,
) -> Clustering:
    """Budgeted clustering of one frame, centers included.

    ``use_coords`` swaps the feature matrix for raw xyz coordinates (the
    geometry ablation); everything else is unchanged.
    """
    data = frame.points if use_coords else frame.features
    k = budget_to_k(budget, frame.num_points, num_classes)
    clustering = kmeans(data, k, seed)
    return with_center_points(clustering, data)


# -- clustering files ----------------------------------------------------------

def save_clustering(clustering: Clustering, path: str | Path) -> None:
    if clustering.center_points is None:
        raise EmptyClusterError("refusing to save a clustering without centers")
    header = _CLUSTERING_HEADER.pack(
        CLUSTERING_MAGIC, FORMAT_VERSION, clustering.num_points, clustering.num_clusters
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(clustering.assignments.astype("<u4", copy=False).tobytes())
            fh.write(clustering.center_points.astype("<u4", copy=False).tobytes())
    except OSError as exc:
        raise IOFailureError(f"cannot write {path}: {exc}") from exc


def load_clustering(path: str | Path, features: np.ndarray | None = None) -> Clustering:
    """Read assignments and center indices; centroids are recomputed from
    ``features`` when given, otherwise left as cluster means of zeros."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailureError(f"cannot read {path}: {exc}") from exc

    if len(raw) < _CLUSTERING_HEADER.size:
        raise MalformedFileError(f"{path}: truncated header")
    magic, version, m, k = _CLUSTERING_HEADER.unpack_from(raw)
    if magic != CLUSTERING_MAGIC:
        raise MalformedFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedFileError(f"{path}: unsupported version {version}")
    if len(raw) != _CLUSTERING_HEADER.size + 4 * m + 4 * k:
        raise MalformedFileError(f"{path}: wrong size for M={m}, k={k}")

    off = _CLUSTERING_HEADER.size
    assignments = np.frombuffer(raw, dtype="<u4", count=m, offset=off)
    centers = np.frombuffer(raw, dtype="<u4", count=k, offset=off + 4 * m)
    if assignments.size and assignments.max() >= k:
        raise MalformedFileError(f"{path}: assignment id out of range")
    if centers.size and (centers.max() >= m or np.any(assignments[centers] != np.arange(k))):
        raise MalformedFileError(f"{path}: center point not a member of its cluster")

    if features is not None:
        x = np.asarray(features, dtype=np.float64)
        centroids = np.zeros((k, x.shape[1]))
        np.add.at(centroids, assignments, x)
        centroids /= np.bincount(assignments, minlength=k)[:, None]
    else:
        centroids = np.zeros((k, 1))
    return Clustering(assignments=assignments, centroids=centroids, center_points=centers)
