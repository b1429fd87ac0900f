"""RGB-D frames: directory I/O, surface normals and keypoint lifting.

A frame directory holds `color.ppm` (binary P6), `depth.pgm` (binary P5,
16-bit big-endian, mm) and `intrinsics.txt` (`fx fy cx cy width height`).
"""

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray
from PIL import Image

from recurra.frames.camera import CameraIntrinsics, backproject, backproject_pixels
from recurra.frames.keypoints import Keypoint3D
from recurra.utils.parallel import ordered_map

COLOR_FILE = "color.ppm"
DEPTH_FILE = "depth.pgm"
INTRINSICS_FILE = "intrinsics.txt"

DEFAULT_NORMAL_WINDOW = 11
DISCONTINUITY_RANGE = 50.0  # mm
DISCONTINUITY_BAND = 25.0  # mm


class InsufficientSupportError(ValueError):
    """Raised when a normal window holds fewer than 3 usable depth pixels."""

    def __init__(self, u: float, v: float, support: int):
        super().__init__(f"Only {support} valid depth pixels around ({u}, {v}), need 3")
        self.u = u
        self.v = v
        self.support = support


@dataclass(frozen=True, eq=False)
class RgbdFrame:
    color: NDArray[np.uint8]
    depth: NDArray[np.float64]
    intrinsics: CameraIntrinsics

    def __post_init__(self) -> None:
        expected = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.shape != expected or self.color.shape[:2] != expected:
            raise ValueError(
                f"Frame size mismatch: color {self.color.shape[:2]}, depth {self.depth.shape}, "
                f"intrinsics {expected}"
            )

    def nearest_pixel(self, u: float, v: float) -> tuple[int, int] | None:
        col, row = int(round(u)), int(round(v))
        if 0 <= col < self.intrinsics.width and 0 <= row < self.intrinsics.height:
            return col, row
        return None


class Keypoint2D(NamedTuple):
    u: float
    v: float
    descriptor: NDArray[np.float64]


class LiftedKeypoints(NamedTuple):
    keypoints: list[Keypoint3D]
    dropped: int


def load_frame(directory: Path) -> RgbdFrame:
    intrinsics = CameraIntrinsics.from_file(directory / INTRINSICS_FILE)
    with Image.open(directory / COLOR_FILE) as color_image:
        color = np.asarray(color_image.convert("RGB"), dtype=np.uint8)
    with Image.open(directory / DEPTH_FILE) as depth_image:
        depth = np.asarray(depth_image, dtype=np.float64)
    return RgbdFrame(color=color, depth=depth, intrinsics=intrinsics)


def save_frame(directory: Path, frame: RgbdFrame) -> None:
    """Write a frame directory; depth is rounded to whole millimeters."""
    directory.mkdir(parents=True, exist_ok=True)
    frame.intrinsics.to_file(directory / INTRINSICS_FILE)
    Image.fromarray(np.ascontiguousarray(frame.color, dtype=np.uint8)).save(directory / COLOR_FILE)
    depth = np.clip(np.rint(frame.depth), 0, np.iinfo(np.uint16).max).astype(np.uint16)
    Image.fromarray(depth).convert("I").save(directory / DEPTH_FILE)


def estimate_normal(
    frame: RgbdFrame,
    u: float,
    v: float,
    window: int = DEFAULT_NORMAL_WINDOW,
) -> NDArray[np.float64]:
    """Unit normal of the plane fit around `(u, v)`, pointing toward the camera.

    Raises:
        ValueError: if the window is even or smaller than 3, or the pixel is
            outside the image.
        InvalidDepthError: if the center pixel has no depth.
        InsufficientSupportError: if fewer than 3 valid pixels remain.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"Normal window must be odd and >= 3, got {window}")
    pixel = frame.nearest_pixel(u, v)
    if pixel is None:
        raise ValueError(f"Pixel ({u}, {v}) outside the image")
    col, row = pixel
    center_depth = float(frame.depth[row, col])
    center = backproject(frame.intrinsics, u, v, center_depth)

    half = window // 2
    rows = slice(max(row - half, 0), min(row + half + 1, frame.intrinsics.height))
    cols = slice(max(col - half, 0), min(col + half + 1, frame.intrinsics.width))
    patch = frame.depth[rows, cols]
    vv, uu = np.mgrid[rows, cols]
    valid = patch > 0
    if valid.any() and np.ptp(patch[valid]) > DISCONTINUITY_RANGE:
        valid &= np.abs(patch - center_depth) <= DISCONTINUITY_BAND
    support = int(valid.sum())
    if support < 3:
        raise InsufficientSupportError(u, v, support)

    points = backproject_pixels(
        frame.intrinsics,
        uu[valid].astype(np.float64),
        vv[valid].astype(np.float64),
        patch[valid],
    )
    covariance = np.cov(points, rowvar=False, bias=True)
    _, eigenvectors = np.linalg.eigh(covariance)
    normal = eigenvectors[:, 0]
    normal /= np.linalg.norm(normal)
    if normal @ center > 0:
        normal = -normal
    return normal


def lift_keypoints(
    frame: RgbdFrame,
    kps2d: Sequence[Keypoint2D] | Sequence[tuple[float, float, ArrayLike]],
    window: int = DEFAULT_NORMAL_WINDOW,
    workers: int = 1,
) -> LiftedKeypoints:
    """Lift 2D keypoints with valid depth to `Keypoint3D`, preserving order."""
    dims = {np.asarray(descriptor).reshape(-1).shape[0] for _, _, descriptor in kps2d}
    if len(dims) > 1:
        raise ValueError(f"Keypoints have mixed descriptor lengths: {sorted(dims)}")

    def lift(kp: tuple[float, float, ArrayLike]) -> Keypoint3D | None:
        u, v, descriptor = kp
        pixel = frame.nearest_pixel(u, v)
        if pixel is None or not frame.depth[pixel[1], pixel[0]] > 0:
            return None
        depth = float(frame.depth[pixel[1], pixel[0]])
        try:
            normal = estimate_normal(frame, u, v, window)
        except InsufficientSupportError:
            return None
        return Keypoint3D(
            pixel=(u, v),
            position=backproject(frame.intrinsics, u, v, depth),
            normal=normal,
            descriptor=np.asarray(descriptor, dtype=np.float64),
        )

    results = ordered_map(lift, list(kps2d), workers=workers)
    lifted = [kp for kp in results if kp is not None]
    dropped = len(results) - len(lifted)
    if dropped:
        logger.info(f"Dropped {dropped} of {len(results)} keypoints without usable depth")
    return LiftedKeypoints(keypoints=lifted, dropped=dropped)
