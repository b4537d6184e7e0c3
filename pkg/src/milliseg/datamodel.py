"""Domain types and on-disk formats for frames, manifests, and labels.

All binary files are little-endian with a fixed layout, so the same bytes are
produced on every platform. Arrays inside the returned objects are marked
read-only: frames and label sets never mutate after construction and can be
shared freely across threads.

Frame file layout ("MLNF"):
    magic 4s | version u32 | M u64 | D u32 | flags u32 (bit0 = has_labels)
    | points f32[M*3] | features f32[M*D] | labels u32[M] when bit0 set

Pseudo-label file layout ("MLNL"):
    magic 4s | version u32 | M u64 | labels u32[M] | source u8[M]
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimMismatchError,
    IOFailureError,
    LengthMismatchError,
    MalformedFileError,
)

FRAME_MAGIC = b"MLNF"
LABELS_MAGIC = b"MLNL"
FORMAT_VERSION = 1

# All-ones bit pattern of the u32 label width.
UNLABELED = 0xFFFFFFFF

SOURCE_UNLABELED = 0
SOURCE_CLICKED = 1
SOURCE_PROPAGATED = 2

_FRAME_HEADER = struct.Struct("<4sIQII")
_LABELS_HEADER = struct.Struct("<4sIQ")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Frame:
    """One lidar scan: M points, their D-dim feature rows, optional labels."""

    frame_id: str
    sequence_id: str
    points: np.ndarray        # (M, 3) float32
    features: np.ndarray      # (M, D) float32
    gt_labels: np.ndarray | None = None   # (M,) uint32, UNLABELED allowed

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise MalformedFileError(f"points must be (M, 3), got {pts.shape}")
        if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
            raise MalformedFileError(
                f"features rows ({feats.shape}) must match points ({pts.shape})"
            )
        if pts.shape[0] < 1 or feats.shape[1] < 1:
            raise MalformedFileError("frame needs M >= 1 points and D >= 1 features")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "features", _readonly(feats))
        if self.gt_labels is not None:
            lab = np.ascontiguousarray(self.gt_labels, dtype=np.uint32)
            if lab.shape != (pts.shape[0],):
                raise MalformedFileError(
                    f"gt_labels length {lab.shape} must be ({pts.shape[0]},)"
                )
            object.__setattr__(self, "gt_labels", _readonly(lab))

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def validate_labels(self, num_classes: int) -> None:
        """Check every label is < num_classes or the UNLABELED sentinel."""
        if self.gt_labels is None:
            return
        lab = self.gt_labels
        bad = (lab >= num_classes) & (lab != UNLABELED)
        if bad.any():
            raise MalformedFileError(
                f"frame {self.frame_id}: label {int(lab[bad][0])} "
                f">= num_classes={num_classes}"
            )


@dataclass(frozen=True)
class FrameDescriptor:
    """Mean feature vector standing in for a whole scan."""

    frame_id: str
    vector: np.ndarray   # (D,) float64

    def __post_init__(self):
        v = np.ascontiguousarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise MalformedFileError("descriptor vector must be finite 1-D")
        object.__setattr__(self, "vector", _readonly(v))


@dataclass(frozen=True)
class PseudoLabels:
    """Per-point class labels from click propagation, with provenance flags."""

    frame_id: str
    labels: np.ndarray   # (M,) uint32, UNLABELED sentinel where source == 0
    source: np.ndarray   # (M,) uint8 in {UNLABELED, CLICKED, PROPAGATED}

    def __post_init__(self):
        lab = np.ascontiguousarray(self.labels, dtype=np.uint32)
        src = np.ascontiguousarray(self.source, dtype=np.uint8)
        if lab.shape != src.shape or lab.ndim != 1:
            raise LengthMismatchError("labels and source must be equal-length 1-D")
        if src.max(initial=0) > SOURCE_PROPAGATED:
            raise MalformedFileError("source flags must be 0, 1, or 2")
        if np.any(lab[src == SOURCE_UNLABELED] != UNLABELED):
            raise MalformedFileError("UNLABELED entries must carry the sentinel")
        if np.any(lab[src != SOURCE_UNLABELED] == UNLABELED):
            raise MalformedFileError("labeled entries must not carry the sentinel")
        object.__setattr__(self, "labels", _readonly(lab))
        object.__setattr__(self, "source", _readonly(src))

    @property
    def num_points(self) -> int:
        return self.labels.shape[0]

    @property
    def num_clicked(self) -> int:
        return int(np.count_nonzero(self.source == SOURCE_CLICKED))

    def validate_classes(self, num_classes: int) -> None:
        lab = self.labels[self.source != SOURCE_UNLABELED]
        if lab.size and lab.max() >= num_classes:
            raise MalformedFileError(
                f"pseudo-label {int(lab.max())} >= num_classes={num_classes}"
            )


@dataclass
class ManifestFrame:
    frame_id: str
    path: str


@dataclass
class ManifestSequence:
    sequence_id: str
    frames: list[ManifestFrame]


@dataclass
class DatasetManifest:
    """Dataset index: class catalogue plus the acquisition-ordered frame list."""

    num_classes: int
    class_names: list[str]
    feature_dim: int
    sequences: list[ManifestSequence]
    ignore_classes: list[int] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.num_classes < 1:
            raise MalformedFileError("num_classes must be positive")
        if len(self.class_names) != self.num_classes:
            raise MalformedFileError(
                f"{len(self.class_names)} class names for {self.num_classes} classes"
            )

    def all_frames(self) -> list[tuple[str, ManifestFrame]]:
        """(sequence_id, frame) pairs in manifest order."""
        return [(s.sequence_id, f) for s in self.sequences for f in s.frames]

    def frame_path(self, frame_id: str) -> Path:
        for seq in self.sequences:
            for f in seq.frames:
                if f.frame_id == frame_id:
                    return self.root / f.path
        raise MalformedFileError(f"frame_id {frame_id!r} not in manifest")


# -- frame files -------------------------------------------------------------

def save_frame(frame: Frame, path: str | Path) -> None:
    has_labels = frame.gt_labels is not None
    header = _FRAME_HEADER.pack(
        FRAME_MAGIC,
        FORMAT_VERSION,
        frame.num_points,
        frame.feature_dim,
        1 if has_labels else 0,
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(frame.points.astype("<f4", copy=False).tobytes())
            fh.write(frame.features.astype("<f4", copy=False).tobytes())
            if has_labels:
                fh.write(frame.gt_labels.astype("<u4", copy=False).tobytes())
    except OSError as exc:
        raise IOFailureError(f"cannot write {path}: {exc}") from exc


def load_frame(
    path: str | Path,
    frame_id: str | None = None,
    sequence_id: str = "",
    expected_dim: int | None = None,
) -> Frame:
    """Read a frame file, checking magic, version, and exact byte counts.

    ``expected_dim`` cross-checks the feature dimension against the manifest.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailureError(f"cannot read {path}: {exc}") from exc

    if len(raw) < _FRAME_HEADER.size:
        raise MalformedFileError(f"{path}: truncated header")
    magic, version, m, d, flags = _FRAME_HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise MalformedFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedFileError(f"{path}: unsupported version {version}")
    if m < 1 or d < 1:
        raise MalformedFileError(f"{path}: M={m}, D={d} out of range")
    if expected_dim is not None and d != expected_dim:
        raise DimMismatchError(f"{path}: D={d}, manifest says {expected_dim}")
    has_labels = bool(flags & 1)

    expected = _FRAME_HEADER.size + 4 * (m * 3 + m * d) + (4 * m if has_labels else 0)
    if len(raw) != expected:
        raise MalformedFileError(
            f"{path}: {len(raw)} bytes, layout requires {expected}"
        )

    off = _FRAME_HEADER.size
    points = np.frombuffer(raw, dtype="<f4", count=m * 3, offset=off).reshape(m, 3)
    off += 4 * m * 3
    features = np.frombuffer(raw, dtype="<f4", count=m * d, offset=off).reshape(m, d)
    off += 4 * m * d
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u4", count=m, offset=off)

    if frame_id is None:
        frame_id = Path(path).stem
    return Frame(frame_id, sequence_id, points, features, labels)


# -- descriptors ---------------------------------------------------------------

def frame_descriptor(frame: Frame) -> FrameDescriptor:
    """Arithmetic mean of the feature rows, accumulated in float64.

    No per-point normalization is applied: downstream comparisons use cosine
    similarity, which is invariant to the descriptor's scale.
    """
    vec = frame.features.astype(np.float64).mean(axis=0)
    return FrameDescriptor(frame.frame_id, vec)


# -- pseudo-label files --------------------------------------------------------

def save_pseudo_labels(pl: PseudoLabels, path: str | Path) -> None:
    header = _LABELS_HEADER.pack(LABELS_MAGIC, FORMAT_VERSION, pl.num_points)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(pl.labels.astype("<u4", copy=False).tobytes())
            fh.write(pl.source.astype("u1", copy=False).tobytes())
    except OSError as exc:
        raise IOFailureError(f"cannot write {path}: {exc}") from exc


def load_pseudo_labels(
    path: str | Path,
    frame_id: str | None = None,
    num_classes: int | None = None,
) -> PseudoLabels:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailureError(f"cannot read {path}: {exc}") from exc

    if len(raw) < _LABELS_HEADER.size:
        raise MalformedFileError(f"{path}: truncated header")
    magic, version, m = _LABELS_HEADER.unpack_from(raw)
    if magic != LABELS_MAGIC:
        raise MalformedFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedFileError(f"{path}: unsupported version {version}")
    if len(raw) != _LABELS_HEADER.size + 5 * m:
        raise MalformedFileError(
            f"{path}: {len(raw)} bytes, layout requires {_LABELS_HEADER.size + 5 * m}"
        )

    off = _LABELS_HEADER.size
    labels = np.frombuffer(raw, dtype="<u4", count=m, offset=off)
    source = np.frombuffer(raw, dtype="u1", count=m, offset=off + 4 * m)

    if frame_id is None:
        frame_id = Path(path).stem
    pl = PseudoLabels(frame_id, labels, source)
    if num_classes is not None:
        pl.validate_classes(num_classes)
    return pl


# -- manifest -------------------------------------------------------------------

def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "num_classes": manifest.num_classes,
        "class_names": list(manifest.class_names),
        "feature_dim": manifest.feature_dim,
        "ignore_classes": list(manifest.ignore_classes),
        "sequences": [
            {
                "sequence_id": seq.sequence_id,
                "frames": [{"frame_id": f.frame_id, "path": f.path} for f in seq.frames],
            }
            for seq in manifest.sequences
        ],
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise IOFailureError(f"cannot write {path}: {exc}") from exc


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IOFailureError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{path}: invalid manifest: {exc}") from exc

    try:
        sequences = [
            ManifestSequence(
                sequence_id=s["sequence_id"],
                frames=[ManifestFrame(f["frame_id"], f["path"]) for f in s["frames"]],
            )
            for s in doc["sequences"]
        ]
        manifest = DatasetManifest(
            num_classes=int(doc["num_classes"]),
            class_names=list(doc["class_names"]),
            feature_dim=int(doc["feature_dim"]),
            sequences=sequences,
            ignore_classes=[int(c) for c in doc.get("ignore_classes", [])],
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"{path}: invalid manifest: {exc}") from exc

    seen: set[str] = set()
    for _, f in manifest.all_frames():
        if f.frame_id in seen:
            raise MalformedFileError(f"{path}: duplicate frame_id {f.frame_id!r}")
        seen.add(f.frame_id)
    return manifest


def load_manifest_frame(manifest: DatasetManifest, frame_id: str) -> Frame:
    """Load a frame through the manifest, tagging ids and checking D."""
    for seq in manifest.sequences:
        for f in seq.frames:
            if f.frame_id == frame_id:
                return load_frame(
                    manifest.root / f.path,
                    frame_id=f.frame_id,
                    sequence_id=seq.sequence_id,
                    expected_dim=manifest.feature_dim,
                )
    raise MalformedFileError(f"frame_id {frame_id!r} not in manifest")
