"""Triangle predicates used to filter triplet matches, and the triplet pair distance."""

import itertools

import numpy as np
from numpy.typing import ArrayLike, NDArray

from recurra.geometry.features import vector_angles
from recurra.geometry.transforms import RigidTransform, apply

CONTACT_TOLERANCE = 1e-6  # mm
_EDGE_PAIRS = ((0, 1), (0, 2), (1, 2))


class DegenerateTriangleError(ValueError):
    """Raised when a triangle has a zero edge cross product."""

    def __init__(self, triangle: NDArray[np.float64]):
        super().__init__(f"Degenerate triangle: {triangle.tolist()}")
        self.triangle = triangle


def triangle_edges(P: NDArray[np.float64]) -> NDArray[np.float64]:
    """Edge vectors `d0 = p1 - p0`, `d1 = p2 - p1`, `d2 = p0 - p2`, shape `(..., 3, 3)`."""
    return np.roll(P, -1, axis=-2) - P


def triplet_pair_distance(
    Tpq: RigidTransform,
    Tab: RigidTransform,
    P: ArrayLike,
    Q: ArrayLike,
    A: ArrayLike,
    B: ArrayLike,
) -> float:
    """Symmetric sum of point-to-point distances between two triplet matches."""
    forward = np.linalg.norm(apply(Tpq, A) - np.asarray(B, dtype=np.float64), axis=-1)
    backward = np.linalg.norm(apply(Tab, P) - np.asarray(Q, dtype=np.float64), axis=-1)
    return float(forward.sum() + backward.sum())


def _orientation_vectors(
    P: NDArray[np.float64],
    normals: NDArray[np.float64] | None,
) -> NDArray[np.float64]:
    """Unit orientation of `v_ij = d_i x d_j` for the three edge pairs, `(..., 3, k)`.

    Without normals these are the 3D cross products themselves. With normals
    they are projected onto the mean surface normal of the triangle, which
    makes the test invariant to rigid motion: the sign of `v_ij . n` only
    flips under a reflection.
    """
    edges = triangle_edges(P)
    v = np.stack(
        [np.cross(edges[..., i, :], edges[..., j, :]) for i, j in _EDGE_PAIRS],
        axis=-2,
    )
    if normals is None:
        norms = np.linalg.norm(v, axis=-1, keepdims=True)
        return np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)
    mean_normal = normals.sum(axis=-2)
    projected = np.einsum("...ki,...i->...k", v, mean_normal)
    return np.sign(projected)[..., None]


def sidedness_consistent_batch(
    P: NDArray[np.float64],
    Q: NDArray[np.float64],
    eps: float,
    normals_p: NDArray[np.float64] | None = None,
    normals_q: NDArray[np.float64] | None = None,
) -> NDArray[np.bool_]:
    with_normals = normals_p is not None and normals_q is not None
    vp = _orientation_vectors(P, normals_p if with_normals else None)
    vq = _orientation_vectors(Q, normals_q if with_normals else None)
    opposite = np.linalg.norm(vp + vq, axis=-1) < eps
    return ~np.any(opposite, axis=-1)


def sidedness_consistent(
    P: ArrayLike,
    Q: ArrayLike,
    eps: float,
    normals_p: ArrayLike | None = None,
    normals_q: ArrayLike | None = None,
) -> bool:
    """False iff some edge-pair orientation of `Q` is opposite to that of `P`.

    Raises:
        DegenerateTriangleError: if either triangle has a zero cross product.
    """
    p = np.asarray(P, dtype=np.float64)
    q = np.asarray(Q, dtype=np.float64)
    for triangle in (p, q):
        edges = triangle_edges(triangle)
        if np.linalg.norm(np.cross(edges[0], edges[1])) == 0.0:
            raise DegenerateTriangleError(triangle)
    np_ = None if normals_p is None else np.asarray(normals_p, dtype=np.float64)
    nq = None if normals_q is None else np.asarray(normals_q, dtype=np.float64)
    return bool(sidedness_consistent_batch(p, q, eps, np_, nq))


def triangle_valid_batch(
    P: NDArray[np.float64],
    min_edge: float,
    max_edge: float,
    min_angle: float,
) -> NDArray[np.bool_]:
    edges = triangle_edges(P)
    lengths = np.linalg.norm(edges, axis=-1)
    # interior angle at vertex k lies between -d_{k-1} and d_k
    angles = vector_angles(-np.roll(edges, 1, axis=-2), edges)
    return (
        np.all(lengths >= min_edge, axis=-1)
        & np.all(lengths <= max_edge, axis=-1)
        & np.all(angles >= min_angle, axis=-1)
    )


def triangle_valid(
    P: ArrayLike,
    min_edge: float,
    max_edge: float,
    min_angle: float,
) -> bool:
    return bool(
        triangle_valid_batch(np.asarray(P, dtype=np.float64), min_edge, max_edge, min_angle)
    )


def _bounding_spheres(P: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    centers = P.mean(axis=-2)
    radii = np.linalg.norm(P - centers[..., None, :], axis=-1).max(axis=-1)
    return centers, radii


def _segment_hits_triangle(
    a: NDArray[np.float64],
    b: NDArray[np.float64],
    tri: NDArray[np.float64],
    tol: float,
) -> bool:
    """Moller-Trumbore segment test; segments parallel to the plane never hit."""
    e1 = tri[1] - tri[0]
    e2 = tri[2] - tri[0]
    direction = b - a
    h = np.cross(direction, e2)
    det = float(e1 @ h)
    scale = max(np.linalg.norm(e1), np.linalg.norm(e2), np.linalg.norm(direction), 1.0)
    if abs(det) <= 1e-12 * scale**3:
        return False
    rel = tol / scale
    inv = 1.0 / det
    s = a - tri[0]
    u = inv * float(s @ h)
    if u < -rel or u > 1.0 + rel:
        return False
    q = np.cross(s, e1)
    v = inv * float(direction @ q)
    if v < -rel or u + v > 1.0 + rel:
        return False
    t = inv * float(e2 @ q)
    return -rel <= t <= 1.0 + rel


def _cross2(a: NDArray[np.float64], b: NDArray[np.float64]) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _segments_intersect_2d(
    a: NDArray[np.float64],
    b: NDArray[np.float64],
    c: NDArray[np.float64],
    d: NDArray[np.float64],
    tol: float,
) -> bool:
    def orientation(p: NDArray[np.float64], q: NDArray[np.float64], r: NDArray[np.float64]) -> int:
        value = _cross2(q - p, r - p)
        return 0 if abs(value) <= tol else (1 if value > 0 else -1)

    def on_segment(p: NDArray[np.float64], q: NDArray[np.float64], r: NDArray[np.float64]) -> bool:
        return bool(np.all(r >= np.minimum(p, q) - tol) and np.all(r <= np.maximum(p, q) + tol))

    o1, o2 = orientation(a, b, c), orientation(a, b, d)
    o3, o4 = orientation(c, d, a), orientation(c, d, b)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and on_segment(a, b, c))
        or (o2 == 0 and on_segment(a, b, d))
        or (o3 == 0 and on_segment(c, d, a))
        or (o4 == 0 and on_segment(c, d, b))
    )


def _point_in_triangle_2d(p: NDArray[np.float64], tri: NDArray[np.float64], tol: float) -> bool:
    signs = [_cross2(tri[(k + 1) % 3] - tri[k], p - tri[k]) for k in range(3)]
    return all(s >= -tol for s in signs) or all(s <= tol for s in signs)


def _coplanar_overlap(P: NDArray[np.float64], Q: NDArray[np.float64], tol: float) -> bool:
    normal = np.cross(P[1] - P[0], P[2] - P[0])
    drop = int(np.argmax(np.abs(normal)))
    keep = [axis for axis in range(3) if axis != drop]
    p2, q2 = P[:, keep], Q[:, keep]
    for (i, j), (k, m) in itertools.product(itertools.pairwise((0, 1, 2, 0)), repeat=2):
        if _segments_intersect_2d(p2[i], p2[j], q2[k], q2[m], tol):
            return True
    return _point_in_triangle_2d(p2[0], q2, tol) or _point_in_triangle_2d(q2[0], p2, tol)


def triangles_overlap(P: ArrayLike, Q: ArrayLike, tol: float = CONTACT_TOLERANCE) -> bool:
    """True iff the two 3D triangles intersect; touching within `tol` counts."""
    p = np.asarray(P, dtype=np.float64)
    q = np.asarray(Q, dtype=np.float64)
    (cp, rp), (cq, rq) = _bounding_spheres(p), _bounding_spheres(q)
    if np.linalg.norm(cp - cq) > rp + rq + tol:
        return False

    normal = np.cross(p[1] - p[0], p[2] - p[0])
    normal_norm = np.linalg.norm(normal)
    if normal_norm > 0:
        offsets = (q - p[0]) @ (normal / normal_norm)
        if np.all(np.abs(offsets) <= tol):
            return _coplanar_overlap(p, q, tol)

    for first, second in ((p, q), (q, p)):
        for i, j in itertools.pairwise((0, 1, 2, 0)):
            if _segment_hits_triangle(first[i], first[j], second, tol):
                return True
    return False


def triangles_overlap_batch(
    P: NDArray[np.float64],
    Q: NDArray[np.float64],
    tol: float = CONTACT_TOLERANCE,
) -> NDArray[np.bool_]:
    """Vectorised bounding-sphere rejection, exact test on the survivors."""
    (cp, rp), (cq, rq) = _bounding_spheres(P), _bounding_spheres(Q)
    near = np.linalg.norm(cp - cq, axis=-1) <= rp + rq + tol
    result = np.zeros(P.shape[0], dtype=bool)
    for index in np.flatnonzero(near):
        result[index] = triangles_overlap(P[index], Q[index], tol)
    return result
