"""Synthetic multi-instance scenes with ground-truth annotations.

A scene places rigid copies of random landmark objects in a workspace in
front of the camera and adds clutter keypoints. Annotations are written as

```
ANN 1 <K>
obj=<id> box=(xmin ymin zmin xmax ymax zmax)     # per instance
r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz     # model-to-scene pose
```
"""

import math
import re
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Self

import numpy as np
import yaml
from loguru import logger
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from recurra.frames.camera import CameraIntrinsics, project
from recurra.frames.keypoints import Keypoint3D, save_keypoints
from recurra.geometry.transforms import RigidTransform
from recurra.utils.text import (
    FileFormatError,
    format_row,
    iter_data_lines,
    next_data_line,
    parse_floats,
    parse_header,
    parse_ints,
)

ANNOTATIONS_MAGIC = "ANN"
ANNOTATIONS_VERSION = 1
SCENE_KEYPOINTS_FILE = "scene.kp3"
ANNOTATIONS_FILE = "annotations.txt"

WORKSPACE_DEPTH = 800.0  # mm, distance of the workspace center from the camera
BOX_MARGIN = 5.0  # mm
INSTANCE_GAP = 10.0  # mm between the bounding spheres of two instances
DESCRIPTOR_SEPARATION = 3.0  # in units of the expected noisy-pair descriptor distance
MAX_ATTEMPTS = 1000

_ANNOTATION_LINE = re.compile(r"obj=(?P<obj>\S+)\s+box=\((?P<box>[^)]*)\)")


class InfeasibleSceneError(ValueError):
    """Raised when a scene cannot be sampled within the attempt limit."""

    def __init__(self, reason: str, attempts: int = MAX_ATTEMPTS):
        super().__init__(f"Infeasible scene after {attempts} attempts: {reason}")
        self.reason = reason
        self.attempts = attempts


class ObjectSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    landmarks: Annotated[int, Field(ge=3, description="Landmarks on the object")] = 60
    extent: Annotated[float, Field(gt=0, description="Side of the sampling cube (mm)")] = 100.0


class SceneSpec(BaseModel):
    """Recipe of a synthetic scene; the same spec and seed give the same scene.

    ```yaml
    objects:
      - landmarks: 60
        extent: 100.0
    instances_per_object: 3
    position_noise: 1.0
    clutter: 150
    seed: 7
    ```
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    objects: Annotated[
        list[ObjectSpec], Field(description="Object types placed in the scene")
    ] = [ObjectSpec()]
    instances_per_object: Annotated[
        int, Field(ge=0, description="Instances placed of every object type")
    ] = 2
    position_noise: Annotated[
        float, Field(ge=0, description="Gaussian position noise per coordinate (mm)")
    ] = 1.0
    descriptor_noise: Annotated[
        float, Field(ge=0, description="Gaussian descriptor noise per component")
    ] = 0.01
    clutter: Annotated[int, Field(ge=0, description="Clutter keypoints")] = 0
    workspace_extent: Annotated[
        float, Field(gt=0, description="Side of the cubic workspace (mm)")
    ] = 600.0
    descriptor_dim: Annotated[int, Field(gt=0, description="Descriptor length")] = 32
    landmark_spacing: Annotated[
        float, Field(ge=0, description="Minimum distance between two landmarks (mm)")
    ] = 10.0
    shifted_instances: Annotated[
        int,
        Field(ge=0, description="Trailing instances per object with shifted descriptors"),
    ] = 0
    descriptor_shift: Annotated[
        float, Field(ge=0, description="Descriptor displacement of shifted instances")
    ] = 0.0
    seed: Annotated[int, Field(ge=0, description="Random seed")] = 0

    @model_validator(mode="after")
    def validate_scene_fits(self) -> Self:
        if self.shifted_instances > self.instances_per_object:
            raise ValueError(
                f"Cannot shift {self.shifted_instances} of "
                f"{self.instances_per_object} instances per object"
            )
        largest = max((obj.extent for obj in self.objects), default=0.0)
        if self.workspace_extent / 2 + largest * math.sqrt(3) >= WORKSPACE_DEPTH:
            raise ValueError(
                f"Workspace of {self.workspace_extent} mm with objects of {largest} mm "
                f"reaches behind the camera"
            )
        return self

    @classmethod
    def from_yaml(cls, path: Path) -> Self:
        with path.open() as f:
            return cls.model_validate(yaml.safe_load(f) or {})


@dataclass(frozen=True, eq=False)
class Annotation:
    object_id: int
    pose: RigidTransform
    box: NDArray[np.float64]
    """`(xmin, ymin, zmin, xmax, ymax, zmax)` in mm."""

    def __post_init__(self) -> None:
        box = np.array(self.box, dtype=np.float64).reshape(6)
        if np.any(box[:3] > box[3:]):
            raise ValueError(f"Box minimum exceeds maximum: {box.tolist()}")
        box.flags.writeable = False
        object.__setattr__(self, "box", box)

    def contains(self, points: ArrayLike) -> NDArray[np.bool_]:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.box[:3]) & (p <= self.box[3:]), axis=-1)


@dataclass(frozen=True, eq=False)
class Scene:
    keypoints: list[Keypoint3D]
    annotations: list[Annotation]
    membership: tuple[int, ...]
    """Annotation index of every keypoint, -1 for clutter."""
    landmark_index: tuple[int, ...]
    """Object landmark behind every keypoint, -1 for clutter."""

    def instance_keypoints(self, annotation: int) -> list[int]:
        return [k for k, owner in enumerate(self.membership) if owner == annotation]

    def owner_of(self, keypoints: Sequence[int]) -> int | None:
        """Annotation owning most of `keypoints`, None if they are all clutter."""
        owners = [self.membership[k] for k in keypoints if self.membership[k] >= 0]
        if not owners:
            return None
        return Counter(owners).most_common(1)[0][0]


def _unit_rows(values: NDArray[np.float64]) -> NDArray[np.float64]:
    return values / np.linalg.norm(values, axis=-1, keepdims=True)


def _sample_descriptors(spec: SceneSpec, rng: np.random.Generator) -> list[NDArray[np.float64]]:
    counts = [obj.landmarks for obj in spec.objects]
    required = DESCRIPTOR_SEPARATION * spec.descriptor_noise * math.sqrt(2 * spec.descriptor_dim)
    for _ in range(MAX_ATTEMPTS):
        descriptors = _unit_rows(rng.normal(size=(sum(counts), spec.descriptor_dim)))
        if len(descriptors) < 2 or pdist(descriptors).min() >= required:
            return np.split(descriptors, np.cumsum(counts)[:-1])
    raise InfeasibleSceneError(f"descriptor separation {required:.3g} not reached")


def _sample_landmarks(
    obj: ObjectSpec, spacing: float, rng: np.random.Generator
) -> NDArray[np.float64]:
    """Landmarks uniform in the object cube, at least `spacing` apart, centered on the origin."""
    points: list[NDArray[np.float64]] = []
    for _ in range(MAX_ATTEMPTS * obj.landmarks):
        candidate = rng.uniform(-obj.extent / 2, obj.extent / 2, size=3)
        if all(np.linalg.norm(candidate - p) >= spacing for p in points):
            points.append(candidate)
            if len(points) == obj.landmarks:
                positions = np.stack(points)
                return positions - positions.mean(axis=0)
    raise InfeasibleSceneError(
        f"{obj.landmarks} landmarks {spacing} mm apart in a {obj.extent} mm cube",
        attempts=MAX_ATTEMPTS * obj.landmarks,
    )


def _workspace_bounds(spec: SceneSpec) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    half = spec.workspace_extent / 2
    return (
        np.array([-half, -half, WORKSPACE_DEPTH - half]),
        np.array([half, half, WORKSPACE_DEPTH + half]),
    )


def _place_instance(
    spec: SceneSpec,
    radius: float,
    placed: Sequence[tuple[NDArray[np.float64], float]],
    rng: np.random.Generator,
) -> NDArray[np.float64]:
    low, high = _workspace_bounds(spec)
    for _ in range(MAX_ATTEMPTS):
        center = rng.uniform(low, high)
        if all(
            np.linalg.norm(center - other) >= radius + other_radius + INSTANCE_GAP
            for other, other_radius in placed
        ):
            return center
    raise InfeasibleSceneError(f"no room for instance {len(placed) + 1} in the workspace")


def _make_keypoints(
    intrinsics: CameraIntrinsics,
    positions: NDArray[np.float64],
    normals: NDArray[np.float64],
    descriptors: NDArray[np.float64],
) -> list[Keypoint3D]:
    keypoints: list[Keypoint3D] = []
    for position, normal, descriptor in zip(positions, normals, descriptors, strict=True):
        u, v, _ = project(intrinsics, position)
        keypoints.append(
            Keypoint3D(pixel=(u, v), position=position, normal=normal, descriptor=descriptor)
        )
    return keypoints


def generate_scene(
    spec: SceneSpec,
    rng: np.random.Generator | None = None,
    intrinsics: CameraIntrinsics | None = None,
) -> Scene:
    """Sample a scene; keypoints come out in shuffled order.

    Raises:
        InfeasibleSceneError: if descriptors cannot be separated, landmarks
            cannot be spaced or instances do not fit in the workspace.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    intrinsics = intrinsics or CameraIntrinsics.default_vga()

    object_descriptors = _sample_descriptors(spec, rng)
    object_landmarks = [_sample_landmarks(obj, spec.landmark_spacing, rng) for obj in spec.objects]
    object_normals = [_unit_rows(rng.normal(size=(obj.landmarks, 3))) for obj in spec.objects]

    keypoints: list[Keypoint3D] = []
    owners: list[int] = []
    landmark_ids: list[int] = []
    annotations: list[Annotation] = []
    placed: list[tuple[NDArray[np.float64], float]] = []
    for object_id, obj in enumerate(spec.objects):
        landmarks = object_landmarks[object_id]
        radius = float(np.linalg.norm(landmarks, axis=-1).max())
        for index in range(spec.instances_per_object):
            center = _place_instance(spec, radius, placed, rng)
            placed.append((center, radius))
            pose = RigidTransform(R=Rotation.random(None, rng).as_matrix(), t=center)
            exact = pose(landmarks)
            annotations.append(
                Annotation(
                    object_id=object_id,
                    pose=pose,
                    box=np.concatenate([exact.min(axis=0), exact.max(axis=0)])
                    + np.repeat([-BOX_MARGIN, BOX_MARGIN], 3),
                )
            )
            descriptors = object_descriptors[object_id] + rng.normal(
                scale=spec.descriptor_noise, size=(obj.landmarks, spec.descriptor_dim)
            )
            if index >= spec.instances_per_object - spec.shifted_instances:
                descriptors += spec.descriptor_shift * _unit_rows(
                    rng.normal(size=(obj.landmarks, spec.descriptor_dim))
                )
            keypoints.extend(
                _make_keypoints(
                    intrinsics,
                    exact + rng.normal(scale=spec.position_noise, size=exact.shape),
                    object_normals[object_id] @ pose.R.T,
                    descriptors,
                )
            )
            owners.extend([len(annotations) - 1] * obj.landmarks)
            landmark_ids.extend(range(obj.landmarks))

    low, high = _workspace_bounds(spec)
    keypoints.extend(
        _make_keypoints(
            intrinsics,
            rng.uniform(low, high, size=(spec.clutter, 3)),
            _unit_rows(rng.normal(size=(spec.clutter, 3))),
            _unit_rows(rng.normal(size=(spec.clutter, spec.descriptor_dim))),
        )
    )
    owners.extend([-1] * spec.clutter)
    landmark_ids.extend([-1] * spec.clutter)

    order = rng.permutation(len(keypoints))
    logger.info(
        f"Generated {len(keypoints)} keypoints: {len(annotations)} instances, "
        f"{spec.clutter} clutter"
    )
    return Scene(
        keypoints=[keypoints[k] for k in order],
        annotations=annotations,
        membership=tuple(owners[k] for k in order),
        landmark_index=tuple(landmark_ids[k] for k in order),
    )


def save_annotations(path: Path, annotations: Sequence[Annotation]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        f.write(f"{ANNOTATIONS_MAGIC} {ANNOTATIONS_VERSION} {len(annotations)}\n")
        for annotation in annotations:
            f.write(f"obj={annotation.object_id} box=({format_row(annotation.box)})\n")
            f.write(format_row(annotation.pose.to_row()) + "\n")


def load_annotations(path: Path) -> list[Annotation]:
    """Read an annotations file.

    Raises:
        FileFormatError: on a malformed header, annotation line or pose row.
    """
    lines = iter_data_lines(path)
    (count,) = parse_header(path, lines, ANNOTATIONS_MAGIC, ANNOTATIONS_VERSION, 1)
    line_number = 1
    annotations: list[Annotation] = []
    for index in range(count):
        line_number, line = next_data_line(path, lines, f"annotation {index + 1}", line_number)
        match = _ANNOTATION_LINE.fullmatch(line)
        if match is None:
            raise FileFormatError(path, line_number, "expected 'obj=<id> box=(<6 values>)'")
        (object_id,) = parse_ints(path, line_number, [match["obj"]])
        box = parse_floats(path, line_number, match["box"].split())
        if len(box) != 6:
            raise FileFormatError(path, line_number, f"box needs 6 values, got {len(box)}")
        pose_line, pose_text = next_data_line(path, lines, "pose row", line_number)
        values = parse_floats(path, pose_line, pose_text.split())
        try:
            annotations.append(
                Annotation(object_id=object_id, pose=RigidTransform.from_row(values), box=box)
            )
        except ValueError as e:
            raise FileFormatError(path, pose_line, str(e)) from e
        line_number = pose_line
    for extra_line, _ in lines:
        raise FileFormatError(path, extra_line, "unexpected content after the last annotation")
    return annotations


def save_scene(directory: Path, scene: Scene, descriptor_dim: int) -> None:
    """Write `scene.kp3` and `annotations.txt` into `directory`."""
    directory.mkdir(parents=True, exist_ok=True)
    save_keypoints(directory / SCENE_KEYPOINTS_FILE, scene.keypoints, descriptor_dim)
    save_annotations(directory / ANNOTATIONS_FILE, scene.annotations)


