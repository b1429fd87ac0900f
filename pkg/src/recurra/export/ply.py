"""ASCII PLY export of discovered models and their instances."""

from collections.abc import Sequence
from pathlib import Path

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray
from plyfile import PlyData, PlyElement

from recurra.discovery.detection import DetectionResult
from recurra.discovery.object_model import ObjectModel
from recurra.frames.keypoints import Keypoint3D

type Color = tuple[int, int, int]

VERTEX_DTYPE = np.dtype(
    [("x", "f8"), ("y", "f8"), ("z", "f8"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
)

MODEL_COLOR: Color = (255, 0, 0)
SCENE_COLOR: Color = (90, 90, 90)
# Instance colors, red is reserved for model landmarks.
INSTANCE_PALETTE: tuple[Color, ...] = (
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (188, 189, 34),
    (23, 190, 207),
    (174, 199, 232),
    (152, 223, 138),
    (255, 187, 120),
    (197, 176, 213),
)


def instance_color(index: int) -> Color:
    return INSTANCE_PALETTE[index % len(INSTANCE_PALETTE)]


def write_ply(path: Path, points: ArrayLike, colors: ArrayLike) -> None:
    """Write colored vertices as an ASCII PLY file."""
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(colors, dtype=np.int64).reshape(-1, 3)
    if xyz.shape[0] != rgb.shape[0]:
        raise ValueError(f"{xyz.shape[0]} points but {rgb.shape[0]} colors")
    vertices = np.empty(xyz.shape[0], dtype=VERTEX_DTYPE)
    for column, axis in enumerate("xyz"):
        vertices[axis] = xyz[:, column]
    for column, channel in enumerate(("red", "green", "blue")):
        vertices[channel] = rgb[:, column].astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(vertices, "vertex")], text=True).write(str(path))
    logger.info(f"Wrote {xyz.shape[0]} vertices to {path}")


def result_cloud(
    model: ObjectModel,
    detections: Sequence[DetectionResult],
    kps: Sequence[Keypoint3D] | None = None,
) -> tuple[NDArray[np.float64], NDArray[np.uint8]]:
    """Vertices of a result: model landmarks in red, then one color per instance.

    With scene keypoints, instances are drawn from their inlier keypoints and
    the remaining keypoints are added in gray; otherwise each instance is the
    model moved by its pose.
    """
    points: list[NDArray[np.float64]] = [model.positions]
    colors: list[NDArray[np.uint8]] = [_repeat(MODEL_COLOR, len(model.landmarks))]
    claimed: set[int] = set()
    for index, detection in enumerate(detections):
        if kps is not None:
            instance_points = np.array(
                [kps[k].position for k in detection.keypoints], dtype=np.float64
            ).reshape(-1, 3)
            claimed.update(detection.keypoints)
        else:
            instance_points = detection.pose(model.positions).reshape(-1, 3)
        points.append(instance_points)
        colors.append(_repeat(instance_color(index), len(instance_points)))
    if kps is not None:
        rest = [kp.position for k, kp in enumerate(kps) if k not in claimed]
        points.append(np.array(rest, dtype=np.float64).reshape(-1, 3))
        colors.append(_repeat(SCENE_COLOR, len(rest)))
    return np.concatenate(points), np.concatenate(colors)


def _repeat(color: Color, count: int) -> NDArray[np.uint8]:
    return np.tile(np.array(color, dtype=np.uint8), (count, 1))
