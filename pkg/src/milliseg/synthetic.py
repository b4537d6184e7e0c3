"""Desk-scale synthetic datasets with the statistics the pipeline cares about.

Features are a Gaussian mixture: one mean per class, pairwise mean distance
equal to ``separation`` times the within-class std, plus a slow per-sequence
drift offset shared by all points of a frame. The drift leaves within-frame
clustering untouched (k-means ignores translations) but makes consecutive
frame descriptors similar, so pruning has real work to do. Coordinates are
uniform in a box and deliberately carry no class information.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import (
    DatasetManifest,
    Frame,
    ManifestFrame,
    ManifestSequence,
    save_frame,
    save_manifest,
)


@dataclass
class SyntheticSpec:
    """Knobs for the mixture generator.

    ``separation`` is measured against the RMS within-class deviation of the
    whole feature vector (noise_std * sqrt(feature_dim)): class means sit at
    pairwise distance separation times that. 0 means class-blind features.
    ``drift`` is the per-frame offset step as a fraction of the class-mean
    magnitude; ``mix_walk`` is the per-frame step of the class-mix logits.
    """

    num_classes: int = 8
    points_per_frame: int = 2000
    frames_per_sequence: int = 10
    sequences: int = 2
    feature_dim: int = 32
    separation: float = 4.0
    noise_std: float = 1.0
    drift: float = 0.08
    mix_walk: float = 0.3
    box: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes > self.feature_dim:
            raise ValueError(
                f"{self.num_classes} classes need feature_dim >= {self.num_classes}"
            )


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """One mean per class, pairwise distance = separation * noise_std * sqrt(D)."""
    scale = spec.separation * spec.noise_std * np.sqrt(spec.feature_dim / 2.0)
    means = np.zeros((spec.num_classes, spec.feature_dim))
    for c in range(spec.num_classes):
        means[c, c] = scale
    return means


def _frame(spec, means, mix, offset, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = spec.points_per_frame
    labels = rng.choice(spec.num_classes, size=m, p=mix)
    features = (
        means[labels]
        + spec.noise_std * rng.standard_normal((m, spec.feature_dim))
        + offset
    )
    points = rng.uniform(-spec.box, spec.box, size=(m, 3))
    return points, features.astype(np.float32), labels.astype(np.uint32)


def generate_dataset(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Write frames plus a manifest under ``out_dir`` and return the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    means = class_means(spec)

    mean_scale = float(np.linalg.norm(means[0])) if spec.separation > 0 else spec.noise_std

    sequences = []
    for q in range(spec.sequences):
        seq_id = f"seq{q:02d}"
        frames = []
        # Class mix and a frame-wide feature offset evolve by random walk, so
        # nearby frames look alike and distant ones drift apart.
        mix_logits = rng.standard_normal(spec.num_classes) * 0.5
        offset = np.zeros(spec.feature_dim)
        for t in range(spec.frames_per_sequence):
            mix = np.exp(mix_logits)
            mix /= mix.sum()
            points, features, labels = _frame(spec, means, mix, offset, rng)
            frame_id = f"{seq_id}_f{t:04d}"
            rel = f"frames/{frame_id}.mlnf"
            save_frame(
                Frame(frame_id, seq_id, points, features, labels), out_dir / rel
            )
            frames.append(ManifestFrame(frame_id, rel))
            mix_logits = mix_logits + rng.standard_normal(spec.num_classes) * spec.mix_walk
            offset = offset + spec.drift * mean_scale * rng.standard_normal(
                spec.feature_dim
            ) / np.sqrt(spec.feature_dim)
        sequences.append(ManifestSequence(seq_id, frames))

    manifest = DatasetManifest(
        num_classes=spec.num_classes,
        class_names=[f"class_{c}" for c in range(spec.num_classes)],
        feature_dim=spec.feature_dim,
        sequences=sequences,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def make_moons(n: int, noise: float, rng: np.random.Generator):
    """Two interleaving half-circles in 2-D, the usual toy for boundary shape."""
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    x1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.vstack([x0, x1]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    perm = rng.permutation(n)
    return x[perm], y[perm]


def moons_frames(
    n_frames: int,
    points_per_frame: int,
    noise: float,
    seed: int,
) -> list[Frame]:
    """Moon-shaped 2-class frames whose features are the 2-D coordinates."""
    rng = np.random.default_rng(seed)
    frames = []
    for t in range(n_frames):
        x, y = make_moons(points_per_frame, noise, rng)
        points = np.concatenate([x, np.zeros((x.shape[0], 1))], axis=1)
        frames.append(
            Frame(
                f"moons_f{t:04d}",
                "moons",
                points.astype(np.float32),
                x.astype(np.float32),
                y.astype(np.uint32),
            )
        )
    return frames
