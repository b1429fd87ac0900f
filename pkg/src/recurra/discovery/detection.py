"""Model-based instance detection, cross-model merging and the instances file.

```
INST 1 <K>
model=<id> inliers=<n> ratio=<r> [landmarks=<l1,...>] [keypoints=<k1,...>]
r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz
```
"""

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from scipy.spatial.distance import cdist

from recurra.discovery.config import DiscoveryConfig
from recurra.discovery.object_model import (
    Landmark,
    ObjectModel,
    Support,
    nearest_running_mean,
)
from recurra.frames.keypoints import Keypoint3D, descriptor_dim_of, keypoint_arrays
from recurra.geometry.transforms import (
    MIN_TRIANGLE_AREA,
    DegenerateGeometryError,
    RigidTransform,
    fit_rigid_transform,
    fit_rigid_transforms_batch,
)
from recurra.utils.parallel import chunk_ranges, ordered_map
from recurra.utils.text import (
    FileFormatError,
    format_float,
    format_row,
    iter_data_lines,
    next_data_line,
    parse_floats,
    parse_header,
    parse_ints,
)

INSTANCES_MAGIC = "INST"
INSTANCES_VERSION = 1
RANSAC_BATCH_SIZE = 250
SEED_BOUND = 2**63
UNKNOWN_LANDMARK = -1

type Correspondence = tuple[int, int]
"""`(landmark id, keypoint index)`."""


class DimensionMismatchError(ValueError):
    """Raised when model and scene descriptors differ in length."""

    def __init__(self, model_dim: int, scene_dim: int):
        super().__init__(
            f"Model descriptors have length {model_dim}, scene descriptors {scene_dim}"
        )
        self.model_dim = model_dim
        self.scene_dim = scene_dim


@dataclass(frozen=True, eq=False)
class DetectionResult:
    """A posed instance of a model.

    `stated_inliers` holds the inlier count of an instances file written
    without the `landmarks=`/`keypoints=` lists; `inliers` is then empty.
    """

    model_id: int
    pose: RigidTransform
    inliers: tuple[Correspondence, ...]
    inlier_ratio: float
    stated_inliers: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.inlier_ratio <= 1.0:
            raise ValueError(f"Inlier ratio must lie in [0, 1], got {self.inlier_ratio}")
        if self.stated_inliers is not None and (
            self.stated_inliers < 0 or (self.inliers and self.stated_inliers != len(self.inliers))
        ):
            raise ValueError(
                f"Inlier count {self.stated_inliers} does not match {len(self.inliers)} inliers"
            )

    @property
    def inlier_count(self) -> int:
        if self.stated_inliers is not None:
            return self.stated_inliers
        return len(self.inliers)

    @property
    def keypoints(self) -> tuple[int, ...]:
        return tuple(k for _, k in self.inliers)


def model_correspondences(
    model: ObjectModel,
    kps: Sequence[Keypoint3D],
    max_desc_dist: float,
    candidates: Iterable[int] | None = None,
) -> list[Correspondence]:
    """Nearest landmark by descriptor for each candidate keypoint, within `max_desc_dist`.

    A landmark may serve several keypoints. Correspondences are ordered by
    keypoint index.

    Raises:
        DimensionMismatchError: if model and scene descriptor lengths differ.
    """
    selected = sorted(set(candidates)) if candidates is not None else range(len(kps))
    indices = np.array(selected, dtype=np.intp)
    if indices.size == 0 or not model.landmarks:
        return []
    scene_dim = descriptor_dim_of([kps[k] for k in indices]) or 0
    if scene_dim != model.descriptor_dim:
        raise DimensionMismatchError(model.descriptor_dim, scene_dim)
    descriptors = keypoint_arrays([kps[k] for k in indices]).descriptors
    distances = cdist(descriptors, model.descriptors)
    nearest = np.argmin(distances, axis=1)
    close = distances[np.arange(indices.size), nearest] <= max_desc_dist
    return [
        (int(landmark_id), int(k))
        for landmark_id, k in zip(nearest[close], indices[close], strict=True)
    ]


def _claim_inliers(
    residuals: NDArray[np.float64],
    landmark_ids: NDArray[np.intp],
    keypoint_ids: NDArray[np.intp],
    threshold: float,
) -> NDArray[np.intp]:
    """Correspondences within `threshold`, one per landmark and per keypoint, best first."""
    within = np.flatnonzero(residuals <= threshold)
    order = within[np.argsort(residuals[within], kind="stable")]
    taken_landmarks: set[int] = set()
    taken_keypoints: set[int] = set()
    kept: list[int] = []
    for c in order:
        landmark_id, k = int(landmark_ids[c]), int(keypoint_ids[c])
        if landmark_id in taken_landmarks or k in taken_keypoints:
            continue
        taken_landmarks.add(landmark_id)
        taken_keypoints.add(k)
        kept.append(int(c))
    return np.array(sorted(kept), dtype=np.intp)


class _Hypothesis(NamedTuple):
    count: int
    residual_sum: float
    iteration: int
    pose: RigidTransform
    inliers: NDArray[np.intp]

    @property
    def rank(self) -> tuple[int, float, int]:
        return -self.count, self.residual_sum, self.iteration


class _RansacProblem(NamedTuple):
    landmarks: NDArray[np.float64]
    scene: NDArray[np.float64]
    landmark_ids: NDArray[np.intp]
    keypoint_ids: NDArray[np.intp]
    near: NDArray[np.bool_]
    threshold: float


def _sample_triples(
    problem: _RansacProblem,
    iterations: range,
    rng: np.random.Generator,
) -> tuple[NDArray[np.intp], NDArray[np.intp]]:
    """Triples of correspondences whose scene points are pairwise within the model diameter."""
    n = problem.near.shape[0]
    kept_iterations: list[int] = []
    triples: list[tuple[int, int, int]] = []
    for iteration in iterations:
        i = int(rng.integers(n))
        second = np.flatnonzero(problem.near[i])
        second = second[second != i]
        if second.size == 0:
            continue
        j = int(rng.choice(second))
        third = np.flatnonzero(problem.near[i] & problem.near[j])
        third = third[(third != i) & (third != j)]
        if third.size == 0:
            continue
        triples.append((i, j, int(rng.choice(third))))
        kept_iterations.append(iteration)
    return np.array(kept_iterations, dtype=np.intp), np.array(triples, dtype=np.intp).reshape(-1, 3)


def _best_in_batch(
    problem: _RansacProblem,
    iterations: range,
    rng: np.random.Generator,
) -> _Hypothesis | None:
    iteration_ids, triples = _sample_triples(problem, iterations, rng)
    P = problem.landmarks[triples]
    areas = 0.5 * np.linalg.norm(np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]), axis=-1)
    valid = areas > MIN_TRIANGLE_AREA
    iteration_ids, triples, P = iteration_ids[valid], triples[valid], P[valid]
    if triples.shape[0] == 0:
        return None
    R, t = fit_rigid_transforms_batch(P, problem.scene[triples])
    moved = np.einsum("bij,nj->bni", R, problem.landmarks) + t[:, None, :]
    residuals = np.linalg.norm(moved - problem.scene[None], axis=-1)
    upper_bounds = np.sum(residuals <= problem.threshold, axis=1)

    best: _Hypothesis | None = None
    for b in np.lexsort((iteration_ids, -upper_bounds)):
        if best is not None and upper_bounds[b] < best.count:
            break
        inliers = _claim_inliers(
            residuals[b], problem.landmark_ids, problem.keypoint_ids, problem.threshold
        )
        hypothesis = _Hypothesis(
            count=int(inliers.size),
            residual_sum=float(residuals[b, inliers].sum()),
            iteration=int(iteration_ids[b]),
            pose=RigidTransform(R=R[b], t=t[b]),
            inliers=inliers,
        )
        if best is None or hypothesis.rank < best.rank:
            best = hypothesis
    return best


def _accepts(count: int, total: int, config: DiscoveryConfig) -> bool:
    return count >= config.min_inliers and count / total > config.min_inlier_ratio


def ransac_detect(
    model: ObjectModel,
    kps: Sequence[Keypoint3D],
    correspondences: Sequence[Correspondence],
    config: DiscoveryConfig,
    rng: np.random.Generator,
    model_id: int = 0,
    workers: int = 1,
) -> DetectionResult | None:
    """3-point RANSAC over model-to-scene correspondences.

    Iterations run in fixed-size batches, each seeded from one draw of `rng`
    and the batch index; the best hypothesis is the one with the most
    inliers, then the lowest inlier residual sum, then the earliest
    iteration, so the result does not depend on `workers`.
    """
    n = len(correspondences)
    base_seed = int(rng.integers(SEED_BOUND))
    if n < max(3, config.min_inliers) or model.diameter <= 0:
        return None
    landmark_ids = np.array([landmark_id for landmark_id, _ in correspondences], dtype=np.intp)
    keypoint_ids = np.array([k for _, k in correspondences], dtype=np.intp)
    scene = np.stack([kps[k].position for k in keypoint_ids])
    problem = _RansacProblem(
        landmarks=model.positions[landmark_ids],
        scene=scene,
        landmark_ids=landmark_ids,
        keypoint_ids=keypoint_ids,
        near=cdist(scene, scene) <= model.diameter,
        threshold=config.inlier_threshold,
    )

    batches = chunk_ranges(config.ransac_iterations, RANSAC_BATCH_SIZE)
    candidates = ordered_map(
        lambda b: _best_in_batch(
            problem, batches[b], np.random.default_rng([base_seed, b])
        ),
        range(len(batches)),
        workers=workers,
    )
    found = [h for h in candidates if h is not None]
    if not found:
        return None
    best = min(found, key=lambda h: h.rank)
    if not _accepts(best.count, n, config):
        return None

    pose, inliers = best.pose, best.inliers
    try:
        refit = fit_rigid_transform(problem.landmarks[inliers], problem.scene[inliers])
    except DegenerateGeometryError:
        refit = None
    if refit is not None:
        residuals = np.linalg.norm(refit(problem.landmarks) - problem.scene, axis=-1)
        refit_inliers = _claim_inliers(residuals, landmark_ids, keypoint_ids, problem.threshold)
        if _accepts(refit_inliers.size, n, config) and refit_inliers.size >= inliers.size:
            pose, inliers = refit, refit_inliers

    result = DetectionResult(
        model_id=model_id,
        pose=pose,
        inliers=tuple((int(landmark_ids[c]), int(keypoint_ids[c])) for c in inliers),
        inlier_ratio=inliers.size / n,
    )
    logger.debug(
        f"Model {model_id}: detection with {inliers.size}/{n} inliers "
        f"(ratio {result.inlier_ratio:.3f})"
    )
    return result


def support_detections(
    models: Sequence[ObjectModel],
    kps: Sequence[Keypoint3D],
    threshold: float,
) -> list[DetectionResult]:
    """One detection per model instance, from the support that lies within `threshold`."""
    results: list[DetectionResult] = []
    for model_id, model in enumerate(models):
        for pose, support in zip(model.instances, model.support, strict=True):
            inliers = tuple(
                (landmark_id, k)
                for landmark_id, k in support
                if np.linalg.norm(pose(model.landmarks[landmark_id].position) - kps[k].position)
                <= threshold
            )
            ratio = len(inliers) / len(support) if support else 0.0
            results.append(
                DetectionResult(model_id=model_id, pose=pose, inliers=inliers, inlier_ratio=ratio)
            )
    return results


def mean_landmark_distance(
    first: RigidTransform,
    second: RigidTransform,
    points: NDArray[np.float64],
) -> float:
    """Mean distance between the images of `points` under two poses."""
    if points.shape[0] == 0:
        return float("inf")
    return float(np.linalg.norm(first(points) - second(points), axis=-1).mean())


def _matching_instance(model: ObjectModel, pose: RigidTransform, threshold: float) -> int | None:
    """Index of an existing instance placed where `pose` places the model."""
    distances = [
        mean_landmark_distance(instance, pose, model.positions) for instance in model.instances
    ]
    best = int(np.argmin(distances))
    return best if distances[best] <= threshold else None


def _merge_support(first: Support, second: Iterable[Correspondence]) -> Support:
    seen = {k for _, k in first}
    merged = list(first)
    for landmark_id, k in second:
        if k not in seen:
            seen.add(k)
            merged.append((landmark_id, k))
    return tuple(sorted(merged))


def add_instance(
    model: ObjectModel,
    detection: DetectionResult,
    kps: Sequence[Keypoint3D],
    config: DiscoveryConfig,
) -> tuple[ObjectModel, bool]:
    """Fold a detection into the model; returns the model and whether the instance is new.

    Inlier keypoints are pulled back into the model frame and averaged into
    their landmarks. A detection that coincides with an existing instance
    only extends that instance's support.
    """
    inverse = detection.pose.inverse()
    landmarks = list(model.landmarks)
    for landmark_id, k in detection.inliers:
        landmark = landmarks[landmark_id]
        total = landmark.observations
        landmarks[landmark_id] = Landmark(
            position=(landmark.position * total + inverse(kps[k].position)) / (total + 1),
            descriptor=landmark.descriptor,
            observations=total + 1,
        )
    instances = list(model.instances)
    support = list(model.support)
    existing = _matching_instance(model, detection.pose, config.inlier_threshold)
    if existing is None:
        instances.append(detection.pose)
        support.append(tuple(sorted(detection.inliers)))
    else:
        support[existing] = _merge_support(support[existing], detection.inliers)
    updated = ObjectModel(
        landmarks=tuple(landmarks), instances=tuple(instances), support=tuple(support)
    )
    return updated, existing is None


def detect_remaining(
    models: Sequence[ObjectModel],
    kps: Sequence[Keypoint3D],
    used_indices: Iterable[int],
    config: DiscoveryConfig,
    rng: np.random.Generator,
    workers: int = 1,
) -> tuple[list[ObjectModel], list[DetectionResult]]:
    """Detect further instances of every model among the keypoints not yet used.

    Models are tried in order, again and again, until a full round detects
    nothing. Inlier keypoints are claimed, so no keypoint serves two
    instances.
    """
    models = list(models)
    used = set(used_indices)
    new_instances: list[DetectionResult] = []
    detected = True
    while detected:
        detected = False
        for model_id, model in enumerate(models):
            unused = [k for k in range(len(kps)) if k not in used]
            correspondences = model_correspondences(
                model, kps, config.correspondence_threshold, candidates=unused
            )
            result = ransac_detect(model, kps, correspondences, config, rng, model_id, workers)
            if result is None:
                continue
            models[model_id], is_new = add_instance(model, result, kps, config)
            used.update(result.keypoints)
            detected = True
            if is_new:
                new_instances.append(result)
    logger.info(f"Detected {len(new_instances)} additional instances")
    return models, new_instances


def detect_model_instances(
    model: ObjectModel,
    kps: Sequence[Keypoint3D],
    config: DiscoveryConfig,
    rng: np.random.Generator,
    model_id: int = 0,
    workers: int = 1,
) -> list[DetectionResult]:
    """All instances of a known model in a scene, claiming inlier keypoints as it goes."""
    used: set[int] = set()
    results: list[DetectionResult] = []
    while True:
        unused = [k for k in range(len(kps)) if k not in used]
        correspondences = model_correspondences(
            model, kps, config.correspondence_threshold, candidates=unused
        )
        result = ransac_detect(model, kps, correspondences, config, rng, model_id, workers)
        if result is None:
            return results
        results.append(result)
        used.update(result.keypoints)


def _pose_consistent_transform(
    first: ObjectModel,
    second: ObjectModel,
    threshold: float,
) -> RigidTransform | None:
    """A first-to-second model frame transform agreed on by two or more instance pairs.

    Instance `i` of `first` and instance `k` of `second` observing the same
    physical object imply `X = inverse(Q2_k) o Q1_i`. Pairs agree when their
    transforms move the first model's landmarks by at most `threshold` on
    average, and agreement must involve distinct instances on both sides.
    """
    points = first.positions
    pairs = [
        (i, k, second.instances[k].inverse().compose(first.instances[i]))
        for i in range(len(first.instances))
        for k in range(len(second.instances))
    ]
    best: list[tuple[int, int, RigidTransform]] = []
    for _, _, candidate in pairs:
        agreeing = [
            pair
            for pair in pairs
            if mean_landmark_distance(candidate, pair[2], points) <= threshold
        ]
        if (
            len({i for i, _, _ in agreeing}) >= 2
            and len({k for _, k, _ in agreeing}) >= 2
            and len(agreeing) > len(best)
        ):
            best = agreeing
    if not best:
        return None
    source = np.concatenate([points] * len(best))
    target = np.concatenate([transform(points) for _, _, transform in best])
    try:
        return fit_rigid_transform(source, target)
    except DegenerateGeometryError:
        return best[0][2]


def _detected_transform(
    first: ObjectModel,
    second: ObjectModel,
    kps: Sequence[Keypoint3D],
    config: DiscoveryConfig,
    rng: np.random.Generator,
    workers: int,
) -> RigidTransform | None:
    """Detect `first` among the keypoints of `second` and relate the two model frames."""
    correspondences = model_correspondences(
        first, kps, config.correspondence_threshold, candidates=second.supported_keypoints
    )
    result = ransac_detect(first, kps, correspondences, config, rng, workers=workers)
    if result is None:
        return None
    detected = set(result.keypoints)
    overlaps = [len(detected & {k for _, k in support}) for support in second.support]
    k = int(np.argmax(overlaps))
    return second.instances[k].inverse().compose(result.pose)


def merge_models(
    larger: ObjectModel,
    smaller: ObjectModel,
    transform: RigidTransform,
    config: DiscoveryConfig,
) -> ObjectModel:
    """Fold `smaller` into `larger`; `transform` maps the smaller model frame into the larger.

    Landmarks within the merge radius are combined, weighted by their
    observation counts. Instances that coincide with an existing one only
    add their support.
    """
    sums = [landmark.position * landmark.observations for landmark in larger.landmarks]
    counts = [landmark.observations for landmark in larger.landmarks]
    descriptors = [landmark.descriptor for landmark in larger.landmarks]
    remap: dict[int, int] = {}
    for landmark_id, landmark in enumerate(smaller.landmarks):
        point = transform(landmark.position)
        nearest = nearest_running_mean(
            point, sums, counts, config.merge_radius, set(remap.values())
        )
        if nearest is not None:
            sums[nearest] = sums[nearest] + point * landmark.observations
            counts[nearest] += landmark.observations
            remap[landmark_id] = nearest
        else:
            remap[landmark_id] = len(sums)
            sums.append(point * landmark.observations)
            counts.append(landmark.observations)
            descriptors.append(landmark.descriptor)

    landmarks = tuple(
        Landmark(position=total / count, descriptor=descriptor, observations=count)
        for total, count, descriptor in zip(sums, counts, descriptors, strict=True)
    )
    merged = ObjectModel(landmarks=landmarks, instances=larger.instances, support=larger.support)
    instances = list(merged.instances)
    support = list(merged.support)
    inverse = transform.inverse()
    for pose, instance_support in zip(smaller.instances, smaller.support, strict=True):
        moved_pose = pose.compose(inverse)
        remapped = [(remap[landmark_id], k) for landmark_id, k in instance_support]
        existing = _matching_instance(merged, moved_pose, config.inlier_threshold)
        if existing is None:
            instances.append(moved_pose)
            support.append(_merge_support((), remapped))
        else:
            support[existing] = _merge_support(support[existing], remapped)
    return ObjectModel(landmarks=landmarks, instances=tuple(instances), support=tuple(support))


def cross_model_merge(
    models: Sequence[ObjectModel],
    kps: Sequence[Keypoint3D],
    config: DiscoveryConfig,
    rng: np.random.Generator,
    workers: int = 1,
) -> list[ObjectModel]:
    """Merge models that turn out to describe the same object.

    Ordered model pairs are tested by instance-pose consistency, then by
    detecting one model among the other's keypoints. The model with fewer
    landmarks folds into the other (ties keep the lower index), and the
    scan restarts until no pair merges.
    """
    models = list(models)
    merged_any = True
    while merged_any:
        merged_any = False
        for a, b in ((a, b) for a in range(len(models)) for b in range(len(models)) if a != b):
            transform = _pose_consistent_transform(models[a], models[b], config.inlier_threshold)
            if transform is None:
                transform = _detected_transform(models[a], models[b], kps, config, rng, workers)
            if transform is None:
                continue
            larger_first = len(models[a].landmarks) > len(models[b].landmarks) or (
                len(models[a].landmarks) == len(models[b].landmarks) and a < b
            )
            if larger_first:
                keep, drop, into_keep = a, b, transform.inverse()
            else:
                keep, drop, into_keep = b, a, transform
            logger.info(f"Merging model {drop} into model {keep}")
            models[keep] = merge_models(models[keep], models[drop], into_keep, config)
            del models[drop]
            merged_any = True
            break
    return models


def save_instances(path: Path, detections: Sequence[DetectionResult]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        f.write(f"{INSTANCES_MAGIC} {INSTANCES_VERSION} {len(detections)}\n")
        for detection in detections:
            line = (
                f"model={detection.model_id} inliers={detection.inlier_count} "
                f"ratio={format_float(detection.inlier_ratio)}"
            )
            if detection.inliers:
                landmark_ids = ",".join(str(landmark_id) for landmark_id, _ in detection.inliers)
                keypoint_ids = ",".join(str(k) for _, k in detection.inliers)
                line += f" landmarks={landmark_ids} keypoints={keypoint_ids}"
            f.write(line + "\n")
            f.write(format_row(detection.pose.to_row()) + "\n")


def _parse_id_list(path: Path, line_number: int, value: str) -> list[int]:
    return parse_ints(path, line_number, value.split(",")) if value else []


def _parse_inliers(
    path: Path, line_number: int, fields: dict[str, str], inlier_count: int
) -> tuple[Correspondence, ...]:
    """Inlier pairs from the optional `landmarks=` and `keypoints=` lists.

    Without `landmarks=`, landmark ids are `UNKNOWN_LANDMARK`.
    """
    if "keypoints" not in fields:
        if "landmarks" in fields:
            raise FileFormatError(path, line_number, "landmarks= given without keypoints=")
        return ()
    keypoint_ids = _parse_id_list(path, line_number, fields["keypoints"])
    if "landmarks" in fields:
        landmark_ids = _parse_id_list(path, line_number, fields["landmarks"])
    else:
        landmark_ids = [UNKNOWN_LANDMARK] * len(keypoint_ids)
    for name, ids in (("landmarks", landmark_ids), ("keypoints", keypoint_ids)):
        if len(ids) != inlier_count:
            raise FileFormatError(
                path, line_number, f"inliers={inlier_count} but {len(ids)} {name}= entries"
            )
    return tuple(zip(landmark_ids, keypoint_ids, strict=True))


def load_instances(path: Path) -> list[DetectionResult]:
    """Read an instances file.

    Raises:
        FileFormatError: on a malformed header, instance line or pose row.
    """
    lines = iter_data_lines(path)
    (count,) = parse_header(path, lines, INSTANCES_MAGIC, INSTANCES_VERSION, 1)
    line_number = 1
    detections: list[DetectionResult] = []
    for index in range(count):
        line_number, line = next_data_line(path, lines, f"instance {index + 1}", line_number)
        fields: dict[str, str] = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise FileFormatError(path, line_number, f"expected 'key=value', got '{token}'")
            fields[key] = value
        missing = {"model", "inliers", "ratio"} - fields.keys()
        if missing:
            raise FileFormatError(path, line_number, f"missing fields {sorted(missing)}")
        model_id, inlier_count = parse_ints(path, line_number, [fields["model"], fields["inliers"]])
        (ratio,) = parse_floats(path, line_number, [fields["ratio"]])
        if inlier_count < 0:
            raise FileFormatError(path, line_number, f"negative inlier count {inlier_count}")
        inliers = _parse_inliers(path, line_number, fields, inlier_count)
        pose_line, pose_text = next_data_line(path, lines, "pose row", line_number)
        values = parse_floats(path, pose_line, pose_text.split())
        try:
            detections.append(
                DetectionResult(
                    model_id=model_id,
                    pose=RigidTransform.from_row(values),
                    inliers=inliers,
                    inlier_ratio=ratio,
                    stated_inliers=None if inliers or not inlier_count else inlier_count,
                )
            )
        except ValueError as e:
            raise FileFormatError(path, pose_line, str(e)) from e
        line_number = pose_line
    for extra_line, _ in lines:
        raise FileFormatError(path, extra_line, "unexpected content after the last instance")
    return detections
