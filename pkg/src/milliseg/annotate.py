"""Annotation of selected frames and the pseudo-label quality metrics.

The oracle annotator replays ground truth for the queued cluster centers,
which is how all quantitative experiments run; a human behind the HTTP
service produces the same response format. Quality is reported as classwise
accuracy (correct pseudo-labels over ground-truth point count per class,
absent classes excluded from the average) and as mIoU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import Clustering, propagate_labels
from .datamodel import UNLABELED, Frame, PseudoLabels
from .errors import (
    LengthMismatchError,
    NoGroundTruthError,
    SessionIncompleteError,
)


@dataclass
class AnnotationSession:
    """One frame's click queue and the responses collected so far."""

    frame_id: str
    click_queue: list[int]
    responses: dict[int, int] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return all(p in self.responses for p in self.click_queue)

    @property
    def status(self) -> str:
        return "COMPLETE" if self.complete else "PENDING"


def oracle_annotate(frame: Frame, queue: np.ndarray | list[int]) -> dict[int, int]:
    """Answer every queued point with its ground-truth class."""
    if frame.gt_labels is None:
        raise NoGroundTruthError(f"frame {frame.frame_id} has no ground truth")
    queue = np.asarray(queue, dtype=np.int64)
    if queue.size and (queue.min() < 0 or queue.max() >= frame.num_points):
        raise NoGroundTruthError(f"frame {frame.frame_id}: queue index out of range")
    answers = frame.gt_labels[queue]
    if np.any(answers == UNLABELED):
        raise NoGroundTruthError(
            f"frame {frame.frame_id}: queued point has no ground-truth label"
        )
    return {int(p): int(c) for p, c in zip(queue, answers)}


def apply_click_noise(
    responses: dict[int, int],
    num_classes: int,
    noise: float,
    rng: np.random.Generator,
) -> dict[int, int]:
    """Flip each response to a uniformly random wrong class with prob ``noise``."""
    if noise <= 0.0:
        return dict(responses)
    out = {}
    for p, c in responses.items():
        if rng.random() < noise:
            wrong = int(rng.integers(num_classes - 1))
            out[p] = wrong if wrong < c else wrong + 1
        else:
            out[p] = c
    return out


def annotate_frame(
    frame: Frame,
    clustering: Clustering,
    annotator=oracle_annotate,
) -> PseudoLabels:
    """Collect one response per cluster center and propagate the labels.

    ``annotator`` is any callable (frame, queue) -> {point: class}; the
    default replays ground truth.
    """
    if clustering.center_points is None:
        raise SessionIncompleteError("clustering has no center points")
    if clustering.num_points != frame.num_points:
        raise LengthMismatchError(
            f"clustering covers {clustering.num_points} points, "
            f"frame has {frame.num_points}"
        )
    session = AnnotationSession(
        frame_id=frame.frame_id,
        click_queue=[int(p) for p in clustering.center_points],
    )
    session.responses = annotator(frame, clustering.center_points)
    if not session.complete:
        missing = sum(1 for p in session.click_queue if p not in session.responses)
        raise SessionIncompleteError(
            f"frame {frame.frame_id}: {missing} centers unanswered"
        )
    center_labels = np.array(
        [session.responses[p] for p in session.click_queue], dtype=np.uint32
    )
    return propagate_labels(clustering, center_labels, frame_id=frame.frame_id)


# -- metrics -------------------------------------------------------------------

@dataclass
class ClasswiseReport:
    """Per-class pseudo-label accuracy; classes never seen in gt are absent."""

    per_class: dict[int, float]
    average: float
    absent: list[int]


class ClasswiseTally:
    """Pools correct/total counts across frames (micro aggregation)."""

    def __init__(self, num_classes: int, ignore: tuple[int, ...] | list[int] = ()):
        self.num_classes = num_classes
        self.ignore = set(int(c) for c in ignore)
        self.correct = np.zeros(num_classes, dtype=np.int64)
        self.total = np.zeros(num_classes, dtype=np.int64)

    def add(self, pseudo: np.ndarray, gt: np.ndarray) -> None:
        pseudo = np.asarray(pseudo, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pseudo.shape != gt.shape:
            raise LengthMismatchError(
                f"pseudo has {pseudo.shape[0]} points, gt has {gt.shape[0]}"
            )
        valid = gt != np.int64(np.uint32(UNLABELED))
        gt = gt[valid]
        pseudo = pseudo[valid]
        self.total += np.bincount(gt, minlength=self.num_classes)
        hit = pseudo == gt
        self.correct += np.bincount(gt[hit], minlength=self.num_classes)

    def report(self) -> ClasswiseReport:
        per_class = {}
        absent = []
        for c in range(self.num_classes):
            if c in self.ignore:
                continue
            if self.total[c] == 0:
                absent.append(c)
            else:
                per_class[c] = float(self.correct[c] / self.total[c])
        average = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return ClasswiseReport(per_class=per_class, average=average, absent=absent)


def classwise_accuracy(
    pseudo: PseudoLabels | np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    ignore: tuple[int, ...] | list[int] = (),
) -> ClasswiseReport:
    """Correct pseudo-labels over ground-truth count, class by class."""
    labels = pseudo.labels if isinstance(pseudo, PseudoLabels) else pseudo
    tally = ClasswiseTally(num_classes, ignore)
    tally.add(labels, gt)
    return tally.report()


def miou(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    ignore: tuple[int, ...] | list[int] = (),
) -> float:
    """Mean intersection-over-union across classes with a nonzero union.

    Points whose ground truth is the UNLABELED sentinel are skipped, as are
    classes in ``ignore``.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise LengthMismatchError(
            f"pred has {pred.shape[0]} points, gt has {gt.shape[0]}"
        )
    ignore_set = set(int(c) for c in ignore)
    valid = gt != np.int64(np.uint32(UNLABELED))
    for c in ignore_set:
        valid &= gt != c
    pred = pred[valid]
    gt = gt[valid]

    ious = []
    for c in range(num_classes):
        if c in ignore_set:
            continue
        tp = int(np.count_nonzero((pred == c) & (gt == c)))
        fp = int(np.count_nonzero((pred == c) & (gt != c)))
        fn = int(np.count_nonzero((pred != c) & (gt == c)))
        union = tp + fp + fn
        if union == 0:
            continue
        ious.append(tp / union)
    return float(np.mean(ious)) if ious else 0.0
