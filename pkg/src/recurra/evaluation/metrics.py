"""Precision, recall and pose errors of detections against annotated scenes."""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from recurra.discovery.detection import DetectionResult
from recurra.frames.keypoints import Keypoint3D
from recurra.geometry.transforms import RigidTransform, rotation_angle
from recurra.synthetic.scenes import Annotation

DEFAULT_CONTAINMENT = 0.9
BACKGROUND_CLASS = -1
"""Class of false positives that fall in no annotation box."""


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


@dataclass(frozen=True)
class EvaluationCounts:
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0

    def __add__(self, other: "EvaluationCounts") -> "EvaluationCounts":
        return EvaluationCounts(
            true_positives=self.true_positives + other.true_positives,
            false_positives=self.false_positives + other.false_positives,
            false_negatives=self.false_negatives + other.false_negatives,
        )

    @property
    def precision(self) -> float:
        return _ratio(self.true_positives, self.true_positives + self.false_positives)

    @property
    def recall(self) -> float:
        return _ratio(self.true_positives, self.true_positives + self.false_negatives)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass(frozen=True, eq=False)
class EvaluationResult:
    counts: EvaluationCounts
    per_class: dict[int, EvaluationCounts] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.counts.precision

    @property
    def recall(self) -> float:
        return self.counts.recall

    @property
    def f1(self) -> float:
        return self.counts.f1


class PoseError(NamedTuple):
    rotation_deg: float
    translation_mm: float


def containment_fractions(
    detections: Sequence[DetectionResult],
    annotations: Sequence[Annotation],
    kps: Sequence[Keypoint3D],
) -> NDArray[np.float64]:
    """Fraction of each detection's inlier keypoints inside each annotation box."""
    fractions = np.zeros((len(detections), len(annotations)))
    for d, detection in enumerate(detections):
        if not detection.inliers:
            continue
        points = np.stack([kps[k].position for k in detection.keypoints])
        for a, annotation in enumerate(annotations):
            fractions[d, a] = np.count_nonzero(annotation.contains(points)) / len(points)
    return fractions


def location_errors(
    detections: Sequence[DetectionResult],
    annotations: Sequence[Annotation],
    kps: Sequence[Keypoint3D],
) -> NDArray[np.float64]:
    """Distance in mm from each detection's inlier centroid to each annotated instance position."""
    errors = np.full((len(detections), len(annotations)), np.inf)
    for d, detection in enumerate(detections):
        if not detection.inliers:
            continue
        centroid = np.stack([kps[k].position for k in detection.keypoints]).mean(axis=0)
        for a, annotation in enumerate(annotations):
            errors[d, a] = np.linalg.norm(centroid - annotation.pose.t)
    return errors


def evaluate(
    detections: Sequence[DetectionResult],
    annotations: Sequence[Annotation],
    kps: Sequence[Keypoint3D],
    containment: float = DEFAULT_CONTAINMENT,
) -> EvaluationResult:
    """Count true positives by greedy one-to-one assignment on containment.

    A detection is a true positive when at least `containment` of its inlier
    keypoints fall inside a not yet assigned annotation box; the best
    fractions are assigned first. Equal fractions go to the pair whose inlier
    centroid lies closest to the annotated instance position.
    """
    if not 0 < containment <= 1:
        raise ValueError(f"Containment must lie in (0, 1], got {containment}")
    fractions = containment_fractions(detections, annotations, kps)
    errors = location_errors(detections, annotations, kps)
    candidates = sorted(
        (-fractions[d, a], errors[d, a], d, a)
        for d in range(len(detections))
        for a in range(len(annotations))
        if fractions[d, a] >= containment
    )
    matched_detections: set[int] = set()
    matched_annotations: set[int] = set()
    for _, _, d, a in candidates:
        if d in matched_detections or a in matched_annotations:
            continue
        matched_detections.add(d)
        matched_annotations.add(a)

    per_class: dict[int, EvaluationCounts] = {}

    def count(object_id: int, counts: EvaluationCounts) -> None:
        per_class[object_id] = per_class.get(object_id, EvaluationCounts()) + counts

    for a, annotation in enumerate(annotations):
        if a in matched_annotations:
            count(annotation.object_id, EvaluationCounts(true_positives=1))
        else:
            count(annotation.object_id, EvaluationCounts(false_negatives=1))
    for d in range(len(detections)):
        if d in matched_detections:
            continue
        object_id = BACKGROUND_CLASS
        if annotations and fractions[d].max() > 0:
            object_id = annotations[int(np.argmax(fractions[d]))].object_id
        count(object_id, EvaluationCounts(false_positives=1))

    total = sum(per_class.values(), EvaluationCounts())
    return EvaluationResult(counts=total, per_class=dict(sorted(per_class.items())))


def pose_error(estimate: RigidTransform, truth: RigidTransform) -> PoseError:
    """Rotation angle of `R_est R_gt^T` in degrees and translation distance in mm."""
    return PoseError(
        rotation_deg=math.degrees(rotation_angle(estimate.R @ truth.R.T)),
        translation_mm=float(np.linalg.norm(estimate.t - truth.t)),
    )
