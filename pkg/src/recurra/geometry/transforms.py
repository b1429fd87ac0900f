"""Rigid-body transforms and least-squares rigid registration.

All distances are in millimeters. Rotations are stored as 3x3 matrices; the
12-number row layout (row-major rotation, then translation) is only used at
file boundaries.
"""

from collections.abc import Iterable
from dataclasses import dataclass
from typing import Self

import numpy as np
from numpy.typing import ArrayLike, NDArray

MIN_TRIANGLE_AREA = 1e-6  # mm^2
COLLINEARITY_TOLERANCE = 1e-6  # mm, second singular value of the centered points


class DegenerateGeometryError(ValueError):
    """Raised when points are too close to collinear to fix a rigid transform."""

    def __init__(self, reason: str, points: NDArray[np.float64] | None = None):
        super().__init__(f"Degenerate geometry: {reason}")
        self.points = points


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A 6-DOF pose `p -> R p + t`."""

    R: NDArray[np.float64]
    t: NDArray[np.float64]

    def __post_init__(self) -> None:
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Self:
        return cls(R=np.eye(3), t=np.zeros(3))

    @classmethod
    def from_translation(cls, t: ArrayLike) -> Self:
        return cls(R=np.eye(3), t=np.asarray(t, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> Self:
        """Build from a 4x4 homogeneous matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        return cls(R=m[:3, :3], t=m[:3, 3])

    @classmethod
    def from_row(cls, values: Iterable[float]) -> Self:
        """Build from `r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz`."""
        row = np.asarray(list(values), dtype=np.float64)
        if row.shape != (12,):
            raise ValueError(f"Expected 12 pose values, got {row.shape[0]}")
        return cls(R=row[:9].reshape(3, 3), t=row[9:])

    def to_row(self) -> list[float]:
        return [float(x) for x in (*self.R.reshape(-1), *self.t)]

    def as_matrix(self) -> NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def __call__(self, points: ArrayLike) -> NDArray[np.float64]:
        return apply(self, points)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def is_close(
        self,
        other: "RigidTransform",
        rotation_atol: float = 1e-9,
        translation_atol: float = 1e-6,
    ) -> bool:
        return bool(
            np.allclose(self.R, other.R, rtol=0.0, atol=rotation_atol)
            and np.allclose(self.t, other.t, rtol=0.0, atol=translation_atol)
        )

    def __repr__(self) -> str:
        return f"RigidTransform(R={self.R.tolist()}, t={self.t.tolist()})"


def apply(T: RigidTransform, points: ArrayLike) -> NDArray[np.float64]:
    """Apply `T` to a single point `(3,)` or to a stack of points `(..., 3)`."""
    p = np.asarray(points, dtype=np.float64)
    return p @ T.R.T + T.t


def compose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """Return the transform `p -> T1(T2(p))`."""
    return RigidTransform(R=T1.R @ T2.R, t=T1.R @ T2.t + T1.t)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.R.T
    return RigidTransform(R=Rt, t=-Rt @ T.t)


def triangle_area(P: ArrayLike) -> float:
    p = np.asarray(P, dtype=np.float64)
    return 0.5 * float(np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0])))


def umeyama3(P: ArrayLike, Q: ArrayLike) -> RigidTransform:
    """Least-squares rigid transform mapping the triangle `P` onto `Q`.

    Raises:
        DegenerateGeometryError: if `P` is (nearly) collinear.
    """
    p = np.asarray(P, dtype=np.float64).reshape(3, 3)
    q = np.asarray(Q, dtype=np.float64).reshape(3, 3)
    if triangle_area(p) <= MIN_TRIANGLE_AREA:
        raise DegenerateGeometryError("source triangle is collinear", points=p)
    R, t = fit_rigid_transforms_batch(p[None], q[None])
    return RigidTransform(R=R[0], t=t[0])


def fit_rigid_transform(P: ArrayLike, Q: ArrayLike) -> RigidTransform:
    """Least-squares rigid transform over `n >= 3` point correspondences.

    Raises:
        DegenerateGeometryError: if fewer than 3 points are given or the
            source points are collinear.
    """
    p = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError(f"Point sets differ in shape: {p.shape} != {q.shape}")
    if p.shape[0] < 3:
        raise DegenerateGeometryError(f"{p.shape[0]} correspondences, need 3", points=p)
    singular_values = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if singular_values[1] <= COLLINEARITY_TOLERANCE:
        raise DegenerateGeometryError("source points are collinear", points=p)
    R, t = fit_rigid_transforms_batch(p[None], q[None])
    return RigidTransform(R=R[0], t=t[0])


def fit_rigid_transforms_batch(
    P: NDArray[np.float64],
    Q: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """SVD closed form with reflection correction over stacks `(n, k, 3)`.

    Returns rotations `(n, 3, 3)` and translations `(n, 3)`. No degeneracy
    checks: callers filter their inputs first.
    """
    cp = P.mean(axis=1)
    cq = Q.mean(axis=1)
    H = np.einsum("nki,nkj->nij", P - cp[:, None, :], Q - cq[:, None, :])
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ np.swapaxes(U, 1, 2)
    t = cq - np.einsum("nij,nj->ni", R, cp)
    return R, t


def alignment_residuals(
    T: RigidTransform, P: ArrayLike, Q: ArrayLike
) -> NDArray[np.float64]:
    """Per-point distances `||T(p_i) - q_i||`."""
    return np.linalg.norm(apply(T, P) - np.asarray(Q, dtype=np.float64), axis=-1)


def alignment_rms(T: RigidTransform, P: ArrayLike, Q: ArrayLike) -> float:
    residuals = alignment_residuals(T, P, Q)
    return float(np.sqrt(np.mean(residuals**2))) if residuals.size else 0.0


def rotation_angle(R: ArrayLike) -> float:
    """Rotation angle of `R` in radians, stable near 0 and pi."""
    m = np.asarray(R, dtype=np.float64)
    axis_term = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(axis_term), 0.5 * (np.trace(m) - 1.0)))
