"""Alternating bundle adjustment of landmark positions and instance poses.

Minimizes `sum_j sum_i |T_j(x_i) - p_ij|^2` by alternating two closed-form
half-steps: every non-reference pose is refit by SVD registration with the
landmarks held fixed, then every observed landmark moves to the mean of its
observations pulled back into the model frame. Each half-step is a global
minimizer of its block, so the cost never increases.
"""

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from loguru import logger
from numpy.typing import NDArray

from recurra.discovery.object_model import Landmark, ObjectModel
from recurra.frames.keypoints import Keypoint3D
from recurra.geometry.transforms import RigidTransform, fit_rigid_transform
from recurra.utils.parallel import ordered_map

DEFAULT_MAX_ITERATIONS = 50
DEFAULT_TOLERANCE = 1e-8

type Observation = tuple[int, NDArray[np.float64]]
"""`(landmark id, scene position)` of one landmark seen in one instance."""


@dataclass(frozen=True, eq=False)
class BundleAdjustmentResult:
    model: ObjectModel
    costs: tuple[float, ...]
    """Cost before the first iteration and after every iteration."""
    observation_count: int

    @property
    def iterations(self) -> int:
        return len(self.costs) - 1

    @property
    def initial_rms(self) -> float:
        return self._rms(self.costs[0])

    @property
    def final_rms(self) -> float:
        return self._rms(self.costs[-1])

    def _rms(self, cost: float) -> float:
        if not self.observation_count:
            return 0.0
        return float(np.sqrt(cost / self.observation_count))


def support_observations(
    model: ObjectModel,
    kps: Sequence[Keypoint3D],
) -> list[list[Observation]]:
    return [[(landmark_id, kps[k].position) for landmark_id, k in s] for s in model.support]


def _stack(observations: Sequence[Observation]) -> tuple[NDArray[np.intp], NDArray[np.float64]]:
    if not observations:
        return np.zeros(0, dtype=np.intp), np.zeros((0, 3))
    ids = np.array([landmark_id for landmark_id, _ in observations], dtype=np.intp)
    points = np.stack([np.asarray(p, dtype=np.float64) for _, p in observations])
    return ids, points


def _cost(
    landmarks: NDArray[np.float64],
    poses: Sequence[RigidTransform],
    stacked: Sequence[tuple[NDArray[np.intp], NDArray[np.float64]]],
) -> float:
    return float(
        sum(
            np.sum((pose(landmarks[ids]) - points) ** 2)
            for pose, (ids, points) in zip(poses, stacked, strict=True)
        )
    )


def run_bundle_adjustment(
    model: ObjectModel,
    observations: Sequence[Sequence[Observation]],
    max_iters: int = DEFAULT_MAX_ITERATIONS,
    tol: float = DEFAULT_TOLERANCE,
    workers: int = 1,
) -> BundleAdjustmentResult:
    """Refine landmarks and poses; instance 0 stays at identity.

    Raises:
        DegenerateGeometryError: if a non-reference instance observes fewer
            than 3 landmarks or only collinear ones.
    """
    if len(observations) != len(model.instances):
        raise ValueError(
            f"Observations given for {len(observations)} instances, "
            f"model has {len(model.instances)}"
        )
    stacked = [_stack(obs) for obs in observations]
    landmarks = model.positions.copy()
    poses = list(model.instances)
    costs = [_cost(landmarks, poses, stacked)]

    all_ids = np.concatenate([ids for ids, _ in stacked])
    observation_counts = np.bincount(all_ids, minlength=len(model.landmarks))
    observed = observation_counts > 0

    def refit_pose(index: int) -> RigidTransform:
        ids, points = stacked[index]
        return fit_rigid_transform(landmarks[ids], points)

    for iteration in range(1, max_iters + 1):
        poses[1:] = ordered_map(refit_pose, range(1, len(poses)), workers=workers)

        sums = np.zeros_like(landmarks)
        for pose, (ids, points) in zip(poses, stacked, strict=True):
            np.add.at(sums, ids, pose.inverse()(points))
        landmarks[observed] = sums[observed] / observation_counts[observed, None]

        costs.append(_cost(landmarks, poses, stacked))
        previous, current = costs[-2], costs[-1]
        if previous <= 0 or (previous - current) / previous < tol:
            logger.debug(f"Bundle adjustment stopped after {iteration} iterations")
            break

    refined = ObjectModel(
        landmarks=tuple(
            Landmark(
                position=position,
                descriptor=landmark.descriptor,
                observations=landmark.observations,
            )
            for position, landmark in zip(landmarks, model.landmarks, strict=True)
        ),
        instances=(RigidTransform.identity(), *poses[1:]),
        support=model.support,
    )
    logger.info(f"Bundle adjustment: cost {costs[0]:.6g} -> {costs[-1]:.6g}")
    return BundleAdjustmentResult(
        model=refined, costs=tuple(costs), observation_count=int(all_ids.size)
    )
