from collections.abc import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

from recurra.discovery.object_model import Landmark, ObjectModel
from recurra.frames.keypoints import Keypoint3D, make_keypoint
from recurra.geometry.transforms import RigidTransform
from recurra.synthetic.scenes import Scene


def random_transform(rng: np.random.Generator, translation_scale: float = 100.0) -> RigidTransform:
    """Helper function to draw a uniformly random rotation with a random translation."""
    return RigidTransform(
        R=Rotation.random(None, rng).as_matrix(),
        t=rng.uniform(-translation_scale, translation_scale, size=3),
    )


def unit_vectors(rng: np.random.Generator, count: int, dim: int = 3) -> NDArray[np.float64]:
    """Helper function to draw random unit vectors."""
    values = rng.normal(size=(count, dim))
    return values / np.linalg.norm(values, axis=-1, keepdims=True)


def keypoints_from_arrays(
    positions: NDArray[np.float64],
    normals: NDArray[np.float64],
    descriptors: NDArray[np.float64],
) -> list[Keypoint3D]:
    """Helper function to build keypoints from stacked attributes."""
    return [
        make_keypoint(position, normal, descriptor)
        for position, normal, descriptor in zip(positions, normals, descriptors, strict=True)
    ]


def two_instance_keypoints(
    rng: np.random.Generator,
    count: int = 10,
    extent: float = 100.0,
    descriptor_dim: int = 8,
) -> tuple[list[Keypoint3D], RigidTransform]:
    """Helper function for a noiseless object seen twice, far apart.

    Keypoints `0..count-1` form the first instance and `count..2*count-1` the
    second; keypoint `k` and `k + count` share a descriptor. Returns the
    keypoints and the transform from the first instance onto the second.
    """
    first = rng.uniform(-extent / 2, extent / 2, size=(count, 3)) + np.array([0.0, 0.0, 800.0])
    normals = unit_vectors(rng, count)
    descriptors = unit_vectors(rng, count, descriptor_dim)
    moved = RigidTransform(R=Rotation.random(None, rng).as_matrix(), t=np.zeros(3))
    center = first.mean(axis=0)
    # rotate about the instance center, then shift well beyond the object size
    transform = RigidTransform.from_translation(center + np.array([400.0, 0.0, 0.0])).compose(
        moved.compose(RigidTransform.from_translation(-center))
    )
    keypoints = keypoints_from_arrays(first, normals, descriptors) + keypoints_from_arrays(
        transform(first), normals @ transform.R.T, descriptors
    )
    return keypoints, transform


def instance_keypoint_map(scene: Scene, annotation: int) -> dict[int, int]:
    """Helper function mapping object landmark ids to keypoint indices of one instance."""
    return {scene.landmark_index[k]: k for k in scene.instance_keypoints(annotation)}


def ground_truth_model(
    scene: Scene,
    annotations: Sequence[int],
    landmark_ids: Sequence[int] | None = None,
) -> ObjectModel:
    """Helper function for the model a perfect discovery would return.

    The model frame is the scene frame of the first annotation; landmarks
    are that instance's keypoints.
    """
    reference = scene.annotations[annotations[0]].pose
    reference_map = instance_keypoint_map(scene, annotations[0])
    ids = sorted(reference_map) if landmark_ids is None else list(landmark_ids)
    landmarks = tuple(
        Landmark(
            position=scene.keypoints[reference_map[i]].position,
            descriptor=scene.keypoints[reference_map[i]].descriptor,
        )
        for i in ids
    )
    instances = (RigidTransform.identity(),) + tuple(
        scene.annotations[a].pose.compose(reference.inverse()) for a in annotations[1:]
    )
    support = []
    for a in annotations:
        keypoint_of = instance_keypoint_map(scene, a)
        support.append(tuple((landmark_id, keypoint_of[i]) for landmark_id, i in enumerate(ids)))
    return ObjectModel(landmarks=landmarks, instances=instances, support=tuple(support))
