"""Pinhole camera intrinsics and depth back-projection."""

from pathlib import Path
from typing import Annotated, Self

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from recurra.utils.text import FileFormatError, format_row, iter_data_lines, parse_floats


class InvalidDepthError(ValueError):
    """Raised when back-projecting a pixel without a positive depth."""

    def __init__(self, u: float, v: float, depth: float):
        super().__init__(f"Invalid depth {depth} mm at pixel ({u}, {v})")
        self.u = u
        self.v = v
        self.depth = depth


class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    fx: Annotated[float, Field(gt=0, description="Horizontal focal length (pixels)")]
    fy: Annotated[float, Field(gt=0, description="Vertical focal length (pixels)")]
    cx: Annotated[float, Field(ge=0, description="Principal point column (pixels)")]
    cy: Annotated[float, Field(ge=0, description="Principal point row (pixels)")]
    width: Annotated[int, Field(gt=0, description="Image width (pixels)")]
    height: Annotated[int, Field(gt=0, description="Image height (pixels)")]

    @model_validator(mode="after")
    def validate_principal_point_inside_image(self) -> Self:
        if not (self.cx < self.width and self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        return self

    @classmethod
    def default_vga(cls) -> Self:
        """Nominal intrinsics of a VGA structured-light sensor."""
        return cls(fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480)

    @classmethod
    def from_file(cls, path: Path) -> Self:
        """Read `fx fy cx cy width height` (whitespace separated)."""
        tokens: list[str] = []
        last_line = 0
        for last_line, line in iter_data_lines(path):
            tokens.extend(line.split())
        if len(tokens) != 6:
            raise FileFormatError(path, max(last_line, 1), f"expected 6 values, got {len(tokens)}")
        fx, fy, cx, cy, width, height = parse_floats(path, last_line, tokens)
        if not (width.is_integer() and height.is_integer()):
            raise FileFormatError(path, last_line, "image size must be integral")
        return cls(fx=fx, fy=fy, cx=cx, cy=cy, width=int(width), height=int(height))

    def to_file(self, path: Path) -> None:
        row = format_row([self.fx, self.fy, self.cx, self.cy])
        path.write_text(f"{row} {self.width} {self.height}\n")


def backproject(intr: CameraIntrinsics, u: float, v: float, depth: float) -> NDArray[np.float64]:
    """3D point (mm) seen at pixel `(u, v)` with the given depth.

    Raises:
        InvalidDepthError: if `depth <= 0`.
    """
    if not depth > 0:
        raise InvalidDepthError(u, v, depth)
    return np.array(
        [(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth],
        dtype=np.float64,
    )


def backproject_pixels(
    intr: CameraIntrinsics,
    u: NDArray[np.float64],
    v: NDArray[np.float64],
    depth: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Vectorised `backproject` without the depth check, shape `(n, 3)`."""
    return np.stack(
        [(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth],
        axis=-1,
    )


def project(intr: CameraIntrinsics, point: NDArray[np.float64]) -> tuple[float, float, float]:
    """Inverse of `backproject`: `(u, v, depth)` of a point in front of the camera."""
    x, y, z = (float(c) for c in point)
    if not z > 0:
        raise InvalidDepthError(float("nan"), float("nan"), z)
    return intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy, z
