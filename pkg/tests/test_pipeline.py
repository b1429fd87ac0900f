import time
from pathlib import Path

import numpy as np
import pytest

from recurra.discovery.config import DiscoveryConfig
from recurra.discovery.detection import DetectionResult
from recurra.discovery.pipeline import NO_PATTERN_MESSAGE, DiscoveryResult, RunReport, discover
from recurra.evaluation.metrics import PoseError, evaluate, pose_error
from recurra.geometry.transforms import RigidTransform
from recurra.synthetic.scenes import ObjectSpec, Scene, SceneSpec, generate_scene

SEEDS = range(20)


def relative_pose_error(
    scene: Scene,
    anchor: DetectionResult,
    detection: DetectionResult,
) -> PoseError:
    """Helper function comparing a detected pose with its annotation.

    A model's frame is only known up to the pose of one instance, so it is tied
    to the scene through the annotation of `anchor`. The error then measures
    the recovered motion from the anchor instance to `detection`, in the
    object frame of the annotations.
    """
    a, b = scene.owner_of(anchor.keypoints), scene.owner_of(detection.keypoints)
    assert a is not None and b is not None
    estimate = detection.pose.compose(anchor.pose.inverse()).compose(scene.annotations[a].pose)
    return pose_error(estimate, scene.annotations[b].pose)


def recovered_exactly(scene: Scene, result: DiscoveryResult, instances: list[int]) -> bool:
    """Helper function checking models, instance ownership and relative poses (2 deg, 5 mm)."""
    if sorted(len(model.instances) for model in result.models) != sorted(instances):
        return False
    owners = [scene.owner_of(d.keypoints) for d in result.detections]
    resolved = [a for a in owners if a is not None]
    if len(set(resolved)) != len(owners):
        return False
    for model_id in range(len(result.models)):
        detections = [d for d in result.detections if d.model_id == model_id]
        objects = {
            scene.annotations[a].object_id
            for d, a in zip(result.detections, resolved, strict=True)
            if d.model_id == model_id
        }
        if len(objects) != 1:
            return False
        for other in detections[1:]:
            error = relative_pose_error(scene, detections[0], other)
            if error.rotation_deg > 2.0 or error.translation_mm > 5.0:
                return False
    return True


class TestDiscover:
    """Test cases for discover function."""

    def test_two_exact_instances(self):
        """Test that two noiseless copies give one model with two instances."""
        scene = generate_scene(SceneSpec(instances_per_object=2, position_noise=0.0, seed=1))

        result = discover(scene.keypoints, DiscoveryConfig())

        (model,) = result.models
        assert len(model.instances) == 2
        assert model.instances[0].is_close(RigidTransform.identity())
        first, second = result.detections
        error = relative_pose_error(scene, first, second)
        assert error.rotation_deg < 1e-3
        assert error.translation_mm < 1e-3
        assert evaluate(result.detections, scene.annotations, scene.keypoints).f1 == 1.0

    def test_two_objects(self):
        """Test that two object types give two models."""
        scene = generate_scene(
            SceneSpec(
                objects=[ObjectSpec(), ObjectSpec()],
                instances_per_object=2,
                position_noise=0.0,
                seed=2,
            )
        )

        result = discover(scene.keypoints, DiscoveryConfig())

        assert recovered_exactly(scene, result, [2, 2])

    def test_clutter_only(self):
        """Test that random keypoints hold no recurrent pattern."""
        scene = generate_scene(SceneSpec(instances_per_object=0, clutter=80, seed=3))

        result = discover(scene.keypoints, DiscoveryConfig())

        assert result.models == []
        assert result.detections == []
        assert result.report.message == NO_PATTERN_MESSAGE
        assert result.report.keypoints == 80

    def test_single_instance(self):
        """Test that an object seen once is not a model."""
        scene = generate_scene(SceneSpec(instances_per_object=1, clutter=100, seed=4))

        result = discover(scene.keypoints, DiscoveryConfig())

        assert result.models == []
        assert result.report.message == NO_PATTERN_MESSAGE

    def test_no_keypoints(self):
        """Test an empty frame."""
        result = discover([], DiscoveryConfig())

        assert result.models == []
        assert result.report.matches == 0

    def test_report(self, tmp_path: Path):
        """Test the stage counts and their YAML file."""
        scene = generate_scene(SceneSpec(instances_per_object=2, clutter=50, seed=5))
        config = DiscoveryConfig(seed=5)

        report = discover(scene.keypoints, config).report
        path = tmp_path / "report.txt"
        report.to_yaml(path)

        assert report.keypoints == 170
        assert report.accepted_triplets <= report.geometric_triplets <= report.candidate_triplets
        assert set(report.timings_ms) == {"matching", "clustering", "model_creation", "detection"}
        assert report.seed == 5
        assert RunReport.from_yaml(path) == report

    def test_same_seed_same_result(self):
        """Test that discovery is deterministic."""
        scene = generate_scene(SceneSpec(instances_per_object=2, clutter=50, seed=6))

        first = discover(scene.keypoints, DiscoveryConfig())
        second = discover(scene.keypoints, DiscoveryConfig())

        assert len(first.models) == len(second.models)
        for a, b in zip(first.models, second.models, strict=True):
            np.testing.assert_array_equal(a.positions, b.positions)
        assert [d.inliers for d in first.detections] == [d.inliers for d in second.detections]


@pytest.mark.slow
class TestDiscoverScenarios:
    """Test cases for discover function over many synthetic scenes."""

    def test_three_instances_in_clutter(self):
        """Test one object placed three times among 150 clutter keypoints."""
        successes = 0
        for seed in SEEDS:
            scene = generate_scene(SceneSpec(instances_per_object=3, clutter=150, seed=seed))

            result = discover(scene.keypoints, DiscoveryConfig(seed=seed))

            successes += recovered_exactly(scene, result, [3])
        assert successes >= 19

    def test_two_objects_in_clutter(self):
        """Test two object types placed twice each, without cross-object instances."""
        successes = 0
        for seed in SEEDS:
            scene = generate_scene(
                SceneSpec(
                    objects=[ObjectSpec(), ObjectSpec()],
                    instances_per_object=2,
                    clutter=150,
                    seed=seed,
                )
            )

            result = discover(scene.keypoints, DiscoveryConfig(seed=seed))

            for model_id in range(len(result.models)):
                owners = [
                    scene.owner_of(d.keypoints)
                    for d in result.detections
                    if d.model_id == model_id
                ]
                objects = {scene.annotations[a].object_id for a in owners if a is not None}
                assert len(objects) <= 1
            successes += recovered_exactly(scene, result, [2, 2])
        assert successes >= 18

    def test_instance_hidden_from_matching(self):
        """Test that model-based detection recovers an instance with shifted descriptors."""
        successes = 0
        for seed in SEEDS:
            scene = generate_scene(
                SceneSpec(
                    instances_per_object=3,
                    shifted_instances=1,
                    descriptor_shift=0.3,
                    clutter=150,
                    seed=seed,
                )
            )

            result = discover(scene.keypoints, DiscoveryConfig(seed=seed))

            successes += (
                result.report.additional_instances == 1
                and recovered_exactly(scene, result, [3])
            )
        assert successes >= 18

    def test_threads_do_not_change_result(self):
        """Test that worker threads leave models and instances unchanged."""
        scene = generate_scene(SceneSpec(instances_per_object=3, clutter=150, seed=7))

        inline = discover(scene.keypoints, DiscoveryConfig())
        threaded = discover(scene.keypoints, DiscoveryConfig(), workers=4)

        assert len(inline.models) == len(threaded.models)
        for a, b in zip(inline.models, threaded.models, strict=True):
            np.testing.assert_array_equal(a.positions, b.positions)
        assert [d.inliers for d in inline.detections] == [
            d.inliers for d in threaded.detections
        ]

    def test_runtime_of_a_cluttered_scene(self):
        """Test the mean wall time of discovery on three instances among 150 clutter keypoints."""
        elapsed = []
        for seed in range(5):
            scene = generate_scene(SceneSpec(instances_per_object=3, clutter=150, seed=seed))

            start = time.perf_counter()
            discover(scene.keypoints, DiscoveryConfig(seed=seed))
            elapsed.append(time.perf_counter() - start)

        assert sum(elapsed) / len(elapsed) < 5.0
