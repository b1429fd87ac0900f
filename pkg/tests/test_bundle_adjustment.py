import numpy as np
import pytest

from recurra.discovery.bundle_adjustment import run_bundle_adjustment, support_observations
from recurra.discovery.object_model import Landmark, ObjectModel
from recurra.geometry.transforms import DegenerateGeometryError, RigidTransform
from tests.helpers import keypoints_from_arrays, random_transform, unit_vectors

LANDMARKS = 12


def observed_object(
    rng: np.random.Generator,
    instances: int = 3,
    noise: float = 0.0,
) -> tuple[ObjectModel, list[list[tuple[int, np.ndarray]]]]:
    """Helper function for a perturbed model and observations of the true object.

    Every instance observes every landmark; the reference instance observes
    them in the model frame.
    """
    truth = rng.uniform(-50.0, 50.0, size=(LANDMARKS, 3))
    poses = [RigidTransform.identity()] + [
        random_transform(rng, translation_scale=300.0) for _ in range(instances - 1)
    ]
    observations = [
        [(i, point + rng.normal(scale=noise, size=3)) for i, point in enumerate(pose(truth))]
        for pose in poses
    ]
    start = ObjectModel(
        landmarks=tuple(
            Landmark(position=p + rng.normal(scale=2.0, size=3), descriptor=np.zeros(4))
            for p in truth
        ),
        instances=(RigidTransform.identity(),)
        + tuple(
            pose.compose(RigidTransform.from_translation(rng.normal(scale=3.0, size=3)))
            for pose in poses[1:]
        ),
    )
    return start, observations


class TestRunBundleAdjustment:
    """Test cases for run_bundle_adjustment function."""

    def test_cost_never_increases(self):
        """Test the monotone cost on noisy observations of 100 random objects."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            model, observations = observed_object(rng, instances=4, noise=1.0)

            result = run_bundle_adjustment(model, observations, max_iters=30, tol=0.0)

            costs = np.array(result.costs)
            assert np.all(costs[1:] <= costs[:-1] * (1.0 + 1e-9) + 1e-12)
            assert result.final_rms <= result.initial_rms

    def test_noiseless_observations_converge(self):
        """Test that exact observations are fitted exactly."""
        model, observations = observed_object(np.random.default_rng(1))

        result = run_bundle_adjustment(model, observations, max_iters=300, tol=0.0)

        assert result.initial_rms > 1.0
        assert result.final_rms < 1e-4
        assert result.observation_count == 3 * LANDMARKS

    def test_reference_pose_stays_identity(self):
        """Test that instance 0 fixes the model frame."""
        model, observations = observed_object(np.random.default_rng(2), noise=0.5)

        result = run_bundle_adjustment(model, observations)

        assert result.model.instances[0].is_close(RigidTransform.identity())
        assert len(result.model.instances) == 3
        assert result.iterations >= 1

    def test_descriptors_and_observation_counts_kept(self):
        """Test that only positions and poses change."""
        model, observations = observed_object(np.random.default_rng(3), noise=0.5)

        result = run_bundle_adjustment(model, observations)

        np.testing.assert_array_equal(result.model.descriptors, model.descriptors)
        assert [lm.observations for lm in result.model.landmarks] == [1] * LANDMARKS

    def test_unobserved_landmark_keeps_position(self):
        """Test that landmarks without observations do not move."""
        model, observations = observed_object(np.random.default_rng(4), noise=0.5)
        observations = [[(i, p) for i, p in obs if i != 5] for obs in observations]

        result = run_bundle_adjustment(model, observations)

        np.testing.assert_array_equal(result.model.positions[5], model.positions[5])

    def test_workers_do_not_change_result(self):
        """Test that threaded pose refits give the same model."""
        model, observations = observed_object(np.random.default_rng(5), instances=5, noise=1.0)

        inline = run_bundle_adjustment(model, observations)
        threaded = run_bundle_adjustment(model, observations, workers=3)

        np.testing.assert_array_equal(inline.model.positions, threaded.model.positions)
        assert inline.costs == threaded.costs

    def test_instance_with_two_landmarks(self):
        """Test that a pose cannot be refit from fewer than 3 landmarks."""
        model, observations = observed_object(np.random.default_rng(6))
        observations[2] = observations[2][:2]

        with pytest.raises(DegenerateGeometryError):
            run_bundle_adjustment(model, observations)

    def test_observations_per_instance(self):
        """Test that observation lists must match the instances."""
        model, observations = observed_object(np.random.default_rng(7))

        with pytest.raises(ValueError, match="Observations given for 2 instances"):
            run_bundle_adjustment(model, observations[:2])


class TestSupportObservations:
    """Test cases for support_observations function."""

    def test_keypoint_positions_per_instance(self):
        """Test that support pairs become landmark observations."""
        rng = np.random.default_rng(8)
        positions = rng.uniform(0.0, 100.0, size=(4, 3))
        keypoints = keypoints_from_arrays(positions, unit_vectors(rng, 4), np.zeros((4, 2)))
        model = ObjectModel(
            landmarks=tuple(Landmark(position=p, descriptor=np.zeros(2)) for p in positions[:2]),
            instances=(RigidTransform.identity(), random_transform(rng)),
            support=(((0, 0), (1, 1)), ((1, 3),)),
        )

        observations = support_observations(model, keypoints)

        assert [[i for i, _ in obs] for obs in observations] == [[0, 1], [1]]
        np.testing.assert_array_equal(observations[1][0][1], positions[3])
