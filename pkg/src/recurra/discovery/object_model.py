"""Sparse landmark object models and the `.objm` model file.

```
OBJM 1 <L> <D> <K>
x y z obs d1 ... dD                              # L landmark rows
r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz     # K instance rows
```
"""

from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.distance import pdist

from recurra.geometry.transforms import RigidTransform
from recurra.utils.text import (
    FileFormatError,
    format_row,
    iter_data_lines,
    next_data_line,
    parse_floats,
    parse_header,
)

OBJM_MAGIC = "OBJM"
OBJM_VERSION = 1

type Support = tuple[tuple[int, int], ...]
"""`(landmark id, keypoint index)` pairs observed for one instance."""


@dataclass(frozen=True, eq=False)
class Landmark:
    position: NDArray[np.float64]
    descriptor: NDArray[np.float64]
    observations: int = 1

    def __post_init__(self) -> None:
        if self.observations < 1:
            raise ValueError(f"Landmark needs at least 1 observation, got {self.observations}")
        position = np.array(self.position, dtype=np.float64).reshape(3)
        descriptor = np.array(self.descriptor, dtype=np.float64).reshape(-1)
        position.flags.writeable = False
        descriptor.flags.writeable = False
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "descriptor", descriptor)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Landmarks in the model frame plus one model-to-scene pose per instance.

    Instance 0 is the reference instance and its pose is the identity.
    """

    landmarks: tuple[Landmark, ...]
    instances: tuple[RigidTransform, ...]
    support: tuple[Support, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.instances:
            raise ValueError("An object model needs at least one instance")
        if not self.instances[0].is_close(RigidTransform.identity()):
            raise ValueError(f"Reference instance pose must be identity, got {self.instances[0]}")
        dims = {landmark.descriptor.shape[0] for landmark in self.landmarks}
        if len(dims) > 1:
            raise ValueError(f"Landmarks have mixed descriptor lengths: {sorted(dims)}")
        support = self.support or tuple(() for _ in self.instances)
        if len(support) != len(self.instances):
            raise ValueError(
                f"Support given for {len(support)} instances, model has {len(self.instances)}"
            )
        object.__setattr__(self, "landmarks", tuple(self.landmarks))
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "support", tuple(tuple(s) for s in support))

    @property
    def positions(self) -> NDArray[np.float64]:
        if not self.landmarks:
            return np.zeros((0, 3))
        return np.stack([landmark.position for landmark in self.landmarks])

    @property
    def descriptors(self) -> NDArray[np.float64]:
        if not self.landmarks:
            return np.zeros((0, 0))
        return np.stack([landmark.descriptor for landmark in self.landmarks])

    @property
    def descriptor_dim(self) -> int:
        return int(self.landmarks[0].descriptor.shape[0]) if self.landmarks else 0

    @property
    def diameter(self) -> float:
        """Largest distance between two landmarks, 0 below two landmarks."""
        if len(self.landmarks) < 2:
            return 0.0
        return float(pdist(self.positions).max())

    @property
    def supported_keypoints(self) -> frozenset[int]:
        return frozenset(k for support in self.support for _, k in support)


def load_model(path: Path) -> ObjectModel:
    """Read a `.objm` file; instance support is not stored and comes back empty.

    Raises:
        FileFormatError: on a malformed header or row.
    """
    lines = iter_data_lines(path)
    landmark_count, dim, instance_count = parse_header(path, lines, OBJM_MAGIC, OBJM_VERSION, 3)
    line_number = 1
    landmarks: list[Landmark] = []
    for index in range(landmark_count):
        line_number, line = next_data_line(path, lines, f"landmark row {index + 1}", line_number)
        values = parse_floats(path, line_number, line.split())
        if len(values) != 4 + dim:
            raise FileFormatError(
                path, line_number, f"landmark row needs {4 + dim} values, got {len(values)}"
            )
        if not values[3].is_integer() or values[3] < 1:
            raise FileFormatError(path, line_number, f"invalid observation count {values[3]}")
        landmarks.append(
            Landmark(
                position=np.asarray(values[:3]),
                descriptor=np.asarray(values[4:]),
                observations=int(values[3]),
            )
        )
    instances: list[RigidTransform] = []
    for index in range(instance_count):
        line_number, line = next_data_line(path, lines, f"instance row {index + 1}", line_number)
        values = parse_floats(path, line_number, line.split())
        try:
            instances.append(RigidTransform.from_row(values))
        except ValueError as e:
            raise FileFormatError(path, line_number, str(e)) from e
    for extra_line, _ in lines:
        raise FileFormatError(path, extra_line, "unexpected content after the instance rows")
    try:
        return ObjectModel(landmarks=tuple(landmarks), instances=tuple(instances))
    except ValueError as e:
        raise FileFormatError(path, line_number, str(e)) from e


def save_model(path: Path, model: ObjectModel) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        f.write(
            f"{OBJM_MAGIC} {OBJM_VERSION} {len(model.landmarks)} {model.descriptor_dim} "
            f"{len(model.instances)}\n"
        )
        for landmark in model.landmarks:
            f.write(
                format_row(landmark.position)
                + f" {landmark.observations}"
                + (" " + format_row(landmark.descriptor) if landmark.descriptor.size else "")
                + "\n"
            )
        for pose in model.instances:
            f.write(format_row(pose.to_row()) + "\n")


def nearest_running_mean(
    point: NDArray[np.float64],
    sums: Sequence[NDArray[np.float64]],
    counts: Sequence[int],
    radius: float,
    excluded: set[int] | frozenset[int] = frozenset(),
) -> int | None:
    """Index of the closest landmark mean `sums[i] / counts[i]` within `radius`."""
    if not sums:
        return None
    means = np.stack(sums) / np.asarray(counts, dtype=np.float64)[:, None]
    distances = np.linalg.norm(means - point, axis=-1)
    if excluded:
        distances[list(excluded)] = np.inf
    best = int(np.argmin(distances))
    return best if distances[best] <= radius else None
