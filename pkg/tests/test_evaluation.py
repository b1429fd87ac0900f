import math

import numpy as np
import pytest

from recurra.discovery.detection import DetectionResult
from recurra.evaluation.metrics import (
    BACKGROUND_CLASS,
    EvaluationCounts,
    evaluate,
    pose_error,
)
from recurra.frames.keypoints import Keypoint3D, make_keypoint
from recurra.geometry.transforms import RigidTransform
from recurra.synthetic.scenes import Annotation


def box_annotation(object_id: int, x_offset: float) -> Annotation:
    """Helper function for a 10 mm box starting at `x_offset`, posed at its center."""
    return Annotation(
        object_id=object_id,
        pose=RigidTransform.from_translation([x_offset + 5.0, 5.0, 805.0]),
        box=[x_offset, 0.0, 800.0, x_offset + 10.0, 10.0, 810.0],
    )


def keypoints_at(x_values: list[float]) -> list[Keypoint3D]:
    """Helper function for keypoints on a line at y=5, z=805."""
    return [make_keypoint([x, 5.0, 805.0], [0.0, 0.0, -1.0], [0.0]) for x in x_values]


def detection_of(keypoints: range | list[int], model_id: int = 0) -> DetectionResult:
    """Helper function for a detection whose inliers are the given keypoints."""
    return DetectionResult(
        model_id=model_id,
        pose=RigidTransform.identity(),
        inliers=tuple((i, k) for i, k in enumerate(keypoints)),
        inlier_ratio=1.0,
    )


class TestEvaluate:
    """Test cases for evaluate function."""

    def test_nine_of_ten_inside_is_a_true_positive(self):
        """Test the containment boundary."""
        keypoints = keypoints_at([float(x) for x in range(1, 10)] + [50.0])

        result = evaluate([detection_of(range(10))], [box_annotation(0, 0.0)], keypoints)

        assert result.counts == EvaluationCounts(true_positives=1)
        assert (result.precision, result.recall, result.f1) == (1.0, 1.0, 1.0)

    def test_eight_of_ten_inside_is_a_miss(self):
        """Test that too few contained inliers give a false positive and a false negative."""
        keypoints = keypoints_at([float(x) for x in range(1, 9)] + [50.0, 60.0])

        result = evaluate([detection_of(range(10))], [box_annotation(0, 0.0)], keypoints)

        assert result.counts == EvaluationCounts(false_positives=1, false_negatives=1)
        assert result.f1 == 0.0

    def test_lower_containment(self):
        """Test that the containment fraction is configurable."""
        keypoints = keypoints_at([float(x) for x in range(1, 9)] + [50.0, 60.0])

        result = evaluate(
            [detection_of(range(10))], [box_annotation(0, 0.0)], keypoints, containment=0.8
        )

        assert result.counts.true_positives == 1

    def test_each_annotation_matched_once(self):
        """Test that two detections of one box give one true positive and one false positive."""
        keypoints = keypoints_at([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])

        result = evaluate(
            [detection_of([0, 1, 2]), detection_of([3, 4, 5])],
            [box_annotation(0, 0.0)],
            keypoints,
        )

        assert result.counts == EvaluationCounts(true_positives=1, false_positives=1)

    def test_best_fraction_assigned_first(self):
        """Test the greedy one-to-one assignment by containment fraction."""
        # box 0 spans x in [0, 10], box 1 spans x in [8, 18]
        keypoints = keypoints_at([9.0, 9.0, 9.0, 15.0, 1.0, 2.0, 3.0, 9.0])
        annotations = [box_annotation(0, 0.0), box_annotation(0, 8.0)]

        result = evaluate(
            [detection_of([0, 1, 2, 3]), detection_of([4, 5, 6, 7])],
            annotations,
            keypoints,
            containment=0.5,
        )

        assert result.counts == EvaluationCounts(true_positives=2)

    def test_per_class_counts(self):
        """Test that misses are counted under the class of the box they fall in."""
        keypoints = keypoints_at([1.0, 2.0, 21.0, 22.0, 100.0, 101.0])
        annotations = [box_annotation(0, 0.0), box_annotation(1, 20.0), box_annotation(1, 40.0)]
        detections = [
            detection_of([0, 1]),
            detection_of([2, 3]),
            detection_of([2, 4, 5]),
            detection_of([4, 5]),
        ]

        result = evaluate(detections, annotations, keypoints)

        assert result.per_class == {
            BACKGROUND_CLASS: EvaluationCounts(false_positives=1),
            0: EvaluationCounts(true_positives=1),
            1: EvaluationCounts(true_positives=1, false_positives=1, false_negatives=1),
        }
        assert result.counts == EvaluationCounts(
            true_positives=2, false_positives=2, false_negatives=1
        )

    def test_no_detections(self):
        """Test that zero detections give zero precision, recall and F1."""
        annotations = [box_annotation(0, x) for x in (0.0, 20.0, 40.0)]

        result = evaluate([], annotations, [])

        assert result.counts == EvaluationCounts(false_negatives=3)
        assert (result.precision, result.recall, result.f1) == (0.0, 0.0, 0.0)

    def test_order_does_not_matter(self):
        """Test that permuting detections and annotations keeps the counts."""
        rng = np.random.default_rng(0)
        keypoints = keypoints_at(rng.uniform(0.0, 60.0, size=40).tolist())
        annotations = [box_annotation(a % 2, 12.0 * a) for a in range(5)]
        detections = [
            detection_of(rng.choice(40, size=5, replace=False).tolist()) for _ in range(8)
        ]

        expected = evaluate(detections, annotations, keypoints, containment=0.6).counts
        for _ in range(10):
            shuffled_detections = [detections[d] for d in rng.permutation(len(detections))]
            shuffled_annotations = [annotations[a] for a in rng.permutation(len(annotations))]

            counts = evaluate(
                shuffled_detections, shuffled_annotations, keypoints, containment=0.6
            ).counts

            assert counts.true_positives == expected.true_positives
            assert counts.false_negatives == expected.false_negatives

    def test_equal_fractions_go_to_the_nearest_instance(self):
        """Test that exact containment ties are assigned the same way in any order."""
        # box 0 spans x in [0, 10], box 1 spans x in [4, 14]
        keypoints = keypoints_at([5.0, 6.0, 12.0, 13.0])
        annotations = [box_annotation(0, 0.0), box_annotation(0, 4.0)]
        detections = [detection_of([0, 1]), detection_of([2, 3])]

        forward = evaluate(detections, annotations, keypoints)
        backward = evaluate(detections[::-1], annotations[::-1], keypoints)

        assert forward.counts == EvaluationCounts(true_positives=2)
        assert backward.counts == EvaluationCounts(true_positives=2)

    @pytest.mark.parametrize("containment", [0.0, -0.5, 1.5])
    def test_invalid_containment(self, containment: float):
        """Test that the containment fraction lies in (0, 1]."""
        with pytest.raises(ValueError, match="Containment"):
            evaluate([], [], [], containment=containment)


class TestEvaluationCounts:
    """Test cases for EvaluationCounts."""

    def test_f1_is_harmonic_mean(self):
        """Test F1 for perfect precision and 37 of 39 instances found."""
        counts = EvaluationCounts(true_positives=37, false_positives=0, false_negatives=2)

        assert counts.precision == 1.0
        assert counts.recall == pytest.approx(0.949, abs=1e-3)
        assert counts.f1 == pytest.approx(0.974, abs=1e-3)
        assert counts.f1 == pytest.approx(74 / 76)

    def test_sum(self):
        """Test adding counts."""
        total = EvaluationCounts(1, 2, 3) + EvaluationCounts(4, 5, 6)

        assert total == EvaluationCounts(5, 7, 9)


class TestPoseError:
    """Test cases for pose_error function."""

    def test_rotation_and_translation(self):
        """Test a quarter turn with a 5 mm offset."""
        quarter_turn = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        estimate = RigidTransform(R=quarter_turn, t=[3.0, 4.0, 0.0])

        error = pose_error(estimate, RigidTransform.identity())

        assert error.rotation_deg == pytest.approx(90.0)
        assert error.translation_mm == pytest.approx(5.0)

    def test_identical_poses(self):
        """Test that a pose has no error against itself."""
        pose = RigidTransform(R=np.eye(3), t=[1.0, 2.0, 3.0])

        error = pose_error(pose, pose)

        assert error.rotation_deg == pytest.approx(0.0, abs=1e-9)
        assert math.isclose(error.translation_mm, 0.0)
