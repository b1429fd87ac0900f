"""Point pair features of two oriented surface points."""

from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

MIN_PAIR_DISTANCE = 1e-9  # mm


class DegeneratePairError(ValueError):
    """Raised when the two points of a pair coincide and the angles are undefined."""

    def __init__(self, distance: float):
        super().__init__(
            f"Point pair is degenerate: distance {distance:.3g} mm < {MIN_PAIR_DISTANCE} mm"
        )
        self.distance = distance


class PointPairFeature(NamedTuple):
    """`(|d|, angle(n1, d), angle(n2, d), angle(n1, n2))` with `d = m2 - m1`."""

    dist: float
    angle_n1_d: float
    angle_n2_d: float
    angle_n1_n2: float


def vector_angles(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    """Angles in `[0, pi]` between stacked vectors, via atan2 for accuracy."""
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.einsum("...i,...i->...", a, b)
    return np.arctan2(cross, dot)


def compute_ppf_batch(
    m1: ArrayLike,
    n1: ArrayLike,
    m2: ArrayLike,
    n2: ArrayLike,
) -> NDArray[np.float64]:
    """Point pair features for stacked pairs, shape `(..., 4)`.

    Coincident pairs yield a zero distance and zero angles; `compute_ppf`
    rejects them, the batch callers mask them out.
    """
    p1 = np.asarray(m1, dtype=np.float64)
    p2 = np.asarray(m2, dtype=np.float64)
    u1 = np.asarray(n1, dtype=np.float64)
    u2 = np.asarray(n2, dtype=np.float64)
    d = p2 - p1
    return np.stack(
        [
            np.linalg.norm(d, axis=-1),
            vector_angles(u1, d),
            vector_angles(u2, d),
            vector_angles(u1, u2),
        ],
        axis=-1,
    )


def compute_ppf(
    m1: ArrayLike,
    n1: ArrayLike,
    m2: ArrayLike,
    n2: ArrayLike,
) -> PointPairFeature:
    """Point pair feature of `(m1, n1)` and `(m2, n2)`.

    Raises:
        DegeneratePairError: if the points are closer than 1e-9 mm.
    """
    feature = compute_ppf_batch(m1, n1, m2, n2)
    if feature[0] < MIN_PAIR_DISTANCE:
        raise DegeneratePairError(float(feature[0]))
    return PointPairFeature(*(float(x) for x in feature))


def ppf_compatible(
    f1: PointPairFeature,
    f2: PointPairFeature,
    dist_tol: float,
    angle_tol: float,
) -> bool:
    return bool(
        ppf_compatible_batch(
            np.asarray(f1, dtype=np.float64),
            np.asarray(f2, dtype=np.float64),
            dist_tol,
            angle_tol,
        )
    )


def ppf_compatible_batch(
    f1: NDArray[np.float64],
    f2: NDArray[np.float64],
    dist_tol: float,
    angle_tol: float,
) -> NDArray[np.bool_]:
    diff = np.abs(f1 - f2)
    return (diff[..., 0] <= dist_tol) & np.all(diff[..., 1:] <= angle_tol, axis=-1)
