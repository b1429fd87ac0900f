"""3D keypoints and the `.kp3` keypoint file format.

```
KP3 1 <N> <D>
u v x y z nx ny nz d1 ... dD     # N rows
```
"""

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from recurra.utils.text import (
    FileFormatError,
    format_row,
    iter_data_lines,
    parse_floats,
    parse_header,
)

KP3_MAGIC = "KP3"
KP3_VERSION = 1
DEFAULT_DESCRIPTOR_DIM = 128
UNIT_NORMAL_TOLERANCE = 1e-6


class DescriptorDimensionError(FileFormatError):
    """Raised when a keypoint row disagrees with the declared descriptor length."""

    def __init__(self, path: Path | str, line_number: int, expected: int, actual: int):
        super().__init__(
            path,
            line_number,
            f"row has {actual} descriptor values, header declares D={expected}",
        )
        self.expected = expected
        self.actual = actual


@dataclass(frozen=True, eq=False)
class Keypoint3D:
    """A keypoint lifted to 3D: pixel, position (mm), unit normal and descriptor."""

    pixel: tuple[float, float]
    position: NDArray[np.float64]
    normal: NDArray[np.float64]
    descriptor: NDArray[np.float64]

    def __post_init__(self) -> None:
        position = np.array(self.position, dtype=np.float64).reshape(3)
        normal = np.array(self.normal, dtype=np.float64).reshape(3)
        descriptor = np.array(self.descriptor, dtype=np.float64).reshape(-1)
        if abs(np.linalg.norm(normal) - 1.0) > UNIT_NORMAL_TOLERANCE:
            raise ValueError(f"Keypoint normal is not unit length: {normal.tolist()}")
        if not position[2] > 0:
            raise ValueError(f"Keypoint must lie in front of the camera: z={position[2]}")
        for array in (position, normal, descriptor):
            array.flags.writeable = False
        object.__setattr__(self, "pixel", (float(self.pixel[0]), float(self.pixel[1])))
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "descriptor", descriptor)

    @property
    def descriptor_dim(self) -> int:
        return int(self.descriptor.shape[0])

    def to_row(self) -> list[float]:
        return [*self.pixel, *self.position, *self.normal, *self.descriptor]


class KeypointArrays(NamedTuple):
    """Stacked keypoint attributes for vectorised stages."""

    positions: NDArray[np.float64]
    normals: NDArray[np.float64]
    descriptors: NDArray[np.float64]


def keypoint_arrays(kps: Sequence[Keypoint3D], descriptor_dim: int = 0) -> KeypointArrays:
    if not kps:
        return KeypointArrays(
            positions=np.zeros((0, 3)),
            normals=np.zeros((0, 3)),
            descriptors=np.zeros((0, descriptor_dim)),
        )
    return KeypointArrays(
        positions=np.stack([kp.position for kp in kps]),
        normals=np.stack([kp.normal for kp in kps]),
        descriptors=np.stack([kp.descriptor for kp in kps]),
    )


def descriptor_dim_of(kps: Sequence[Keypoint3D]) -> int | None:
    """The shared descriptor length, or None for an empty list.

    Raises:
        ValueError: if keypoints disagree on the descriptor length.
    """
    dims = {kp.descriptor_dim for kp in kps}
    if len(dims) > 1:
        raise ValueError(f"Keypoints have mixed descriptor lengths: {sorted(dims)}")
    return dims.pop() if dims else None


def make_keypoint(
    position: ArrayLike,
    normal: ArrayLike,
    descriptor: ArrayLike,
    pixel: tuple[float, float] = (0.0, 0.0),
) -> Keypoint3D:
    return Keypoint3D(
        pixel=pixel,
        position=np.asarray(position, dtype=np.float64),
        normal=np.asarray(normal, dtype=np.float64),
        descriptor=np.asarray(descriptor, dtype=np.float64),
    )


def load_keypoints(path: Path) -> list[Keypoint3D]:
    """Read a `.kp3` file.

    Raises:
        FileFormatError: on a malformed header or row.
        DescriptorDimensionError: if a row disagrees with the declared D.
    """
    lines = iter_data_lines(path)
    count, dim = parse_header(path, lines, KP3_MAGIC, KP3_VERSION, 2)
    keypoints: list[Keypoint3D] = []
    for line_number, line in lines:
        if len(keypoints) == count:
            raise FileFormatError(path, line_number, f"more than the declared {count} rows")
        values = parse_floats(path, line_number, line.split())
        if len(values) < 8:
            raise FileFormatError(
                path, line_number, f"expected at least 8 values, got {len(values)}"
            )
        if len(values) - 8 != dim:
            raise DescriptorDimensionError(path, line_number, expected=dim, actual=len(values) - 8)
        try:
            keypoints.append(
                Keypoint3D(
                    pixel=(values[0], values[1]),
                    position=np.asarray(values[2:5]),
                    normal=np.asarray(values[5:8]),
                    descriptor=np.asarray(values[8:]),
                )
            )
        except ValueError as e:
            raise FileFormatError(path, line_number, str(e)) from e
    if len(keypoints) != count:
        raise FileFormatError(
            path, 1, f"header declares {count} keypoints, found {len(keypoints)}"
        )
    return keypoints


def save_keypoints(
    path: Path,
    kps: Sequence[Keypoint3D],
    descriptor_dim: int = DEFAULT_DESCRIPTOR_DIM,
) -> None:
    """Write a `.kp3` file; `descriptor_dim` only matters for an empty list."""
    dim = descriptor_dim_of(kps) or descriptor_dim
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        f.write(f"{KP3_MAGIC} {KP3_VERSION} {len(kps)} {dim}\n")
        for kp in kps:
            f.write(format_row(kp.to_row()) + "\n")
