"""Density-based clustering of triplet matches by relative pose."""

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from sklearn.cluster import DBSCAN

from recurra.discovery.matching import TripletMatch
from recurra.frames.keypoints import Keypoint3D, keypoint_arrays
from recurra.geometry.transforms import (
    DegenerateGeometryError,
    RigidTransform,
    alignment_residuals,
    fit_rigid_transform,
)
from recurra.utils.parallel import chunk_ranges, ordered_map

DISTANCE_ROWS_PER_CHUNK = 64


@dataclass(frozen=True, eq=False)
class Cluster:
    """Triplet matches sharing one relative pose.

    Members listed in `flipped` contribute their inverted triplet, so that
    every member maps the `src_points` side onto the `dst_points` side.
    """

    members: tuple[int, ...]
    flipped: frozenset[int]
    transform: RigidTransform
    src_points: frozenset[int]
    dst_points: frozenset[int]
    correspondences: tuple[tuple[int, int], ...]

    @property
    def size(self) -> int:
        return len(self.members)

    def member_triplets(self, triplets: Sequence[TripletMatch]) -> list[TripletMatch]:
        return [
            triplets[m].inverted() if m in self.flipped else triplets[m] for m in self.members
        ]


def triplet_distance_matrix(
    triplets: Sequence[TripletMatch],
    kps: Sequence[Keypoint3D],
    workers: int = 1,
) -> NDArray[np.float64]:
    """Symmetric matrix of `triplet_pair_distance` over all triplet pairs."""
    n = len(triplets)
    if n == 0:
        return np.zeros((0, 0))
    positions = keypoint_arrays(kps).positions
    src = positions[np.array([t.src for t in triplets], dtype=np.intp)]
    dst = positions[np.array([t.dst for t in triplets], dtype=np.intp)]
    rotations = np.stack([t.pose.R for t in triplets])
    translations = np.stack([t.pose.t for t in triplets])

    def rows(block: range) -> NDArray[np.float64]:
        # E[i, j] = sum_k |T_i(src_j,k) - dst_j,k|
        R = rotations[block.start : block.stop]
        t = translations[block.start : block.stop]
        moved = np.einsum("cab,nkb->cnka", R, src) + t[:, None, None, :]
        return np.linalg.norm(moved - dst[None], axis=-1).sum(axis=-1)

    one_sided = np.concatenate(
        ordered_map(rows, chunk_ranges(n, DISTANCE_ROWS_PER_CHUNK), workers=workers)
    )
    return one_sided + one_sided.T


def dbscan_triplets(
    triplets: Sequence[TripletMatch],
    kps: Sequence[Keypoint3D],
    eps: float,
    min_pts: int,
    workers: int = 1,
) -> list[list[int]]:
    """DBSCAN member lists over the triplet pair distance; noise is dropped.

    Clusters come out in the order of their lowest core member, so border
    triplets reachable from two clusters join the earlier one.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError(f"DBSCAN needs eps > 0 and min_pts >= 1, got {eps}, {min_pts}")
    if not triplets:
        return []
    distances = triplet_distance_matrix(triplets, kps, workers)
    labels = DBSCAN(eps=eps, min_samples=min_pts, metric="precomputed").fit(distances).labels_
    clusters = [
        np.flatnonzero(labels == label).tolist() for label in range(int(labels.max()) + 1)
    ]
    logger.info(f"DBSCAN: {len(clusters)} clusters, {int(np.sum(labels < 0))} noise triplets")
    return clusters


def cluster_correspondences(
    members: Sequence[int],
    flipped: frozenset[int],
    triplets: Sequence[TripletMatch],
) -> tuple[tuple[int, int], ...]:
    """Deduplicated `(src, dst)` keypoint correspondences of the members, sorted."""
    pairs: set[tuple[int, int]] = set()
    for m in members:
        triplet = triplets[m].inverted() if m in flipped else triplets[m]
        pairs.update(zip(triplet.src, triplet.dst, strict=True))
    return tuple(sorted(pairs))


def refit_cluster_transform(
    members: Sequence[int],
    triplets: Sequence[TripletMatch],
    kps: Sequence[Keypoint3D],
    flipped: frozenset[int] = frozenset(),
) -> RigidTransform:
    """Least-squares transform over all deduplicated member correspondences.

    Members in `flipped` contribute their inverted triplet.

    Raises:
        DegenerateGeometryError: if the correspondences are collinear.
    """
    correspondences = cluster_correspondences(members, flipped, triplets)
    return fit_rigid_transform(*_side_positions(correspondences, kps))


def make_cluster(
    members: Sequence[int],
    triplets: Sequence[TripletMatch],
    kps: Sequence[Keypoint3D],
    flipped: frozenset[int] = frozenset(),
) -> Cluster:
    """Build a cluster and refit its transform.

    Raises:
        DegenerateGeometryError: if the member correspondences are collinear.
    """
    ordered = tuple(sorted(members))
    correspondences = cluster_correspondences(ordered, flipped, triplets)
    return Cluster(
        members=ordered,
        flipped=frozenset(flipped),
        transform=refit_cluster_transform(ordered, triplets, kps, flipped),
        src_points=frozenset(s for s, _ in correspondences),
        dst_points=frozenset(d for _, d in correspondences),
        correspondences=correspondences,
    )


def build_clusters(
    member_lists: Sequence[Sequence[int]],
    triplets: Sequence[TripletMatch],
    kps: Sequence[Keypoint3D],
) -> list[Cluster]:
    clusters: list[Cluster] = []
    for members in member_lists:
        try:
            clusters.append(make_cluster(members, triplets, kps))
        except DegenerateGeometryError as e:
            logger.warning(f"Dropping cluster of {len(members)} triplets: {e}")
    return clusters


def _side_positions(
    correspondences: Sequence[tuple[int, int]],
    kps: Sequence[Keypoint3D],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    src = np.stack([kps[s].position for s, _ in correspondences])
    dst = np.stack([kps[d].position for _, d in correspondences])
    return src, dst


def inverse_distance(first: Cluster, second: Cluster, kps: Sequence[Keypoint3D]) -> float:
    """How far `first.transform` is from the inverse of `second.transform`.

    Each transform is applied to the destination points of the other
    cluster, where it should reproduce the source points. Mean errors are
    scaled by 3 per side, the scale of the triplet pair distance.
    """
    src1, dst1 = _side_positions(first.correspondences, kps)
    src2, dst2 = _side_positions(second.correspondences, kps)
    forward = alignment_residuals(first.transform, dst2, src2).mean()
    backward = alignment_residuals(second.transform, dst1, src1).mean()
    return float(3.0 * (forward + backward))


def merge_inverse_clusters(
    clusters: Sequence[Cluster],
    triplets: Sequence[TripletMatch],
    kps: Sequence[Keypoint3D],
    eps: float,
) -> list[Cluster]:
    """Fold every cluster whose transform inverts an earlier one into it.

    Pairs are scanned in index order and the scan restarts after each merge
    until no pair qualifies.
    """
    merged = list(clusters)
    changed = True
    while changed:
        changed = False
        for first_index in range(len(merged)):
            for second_index in range(first_index + 1, len(merged)):
                first, second = merged[first_index], merged[second_index]
                if inverse_distance(first, second, kps) > eps:
                    continue
                flipped = first.flipped | frozenset(
                    m for m in second.members if m not in second.flipped
                )
                try:
                    combined = make_cluster(
                        (*first.members, *second.members), triplets, kps, flipped
                    )
                except DegenerateGeometryError as e:
                    logger.warning(f"Inverse clusters not merged: {e}")
                    continue
                logger.debug(
                    f"Merged inverse clusters {first_index} and {second_index} "
                    f"({first.size} + {second.size} triplets)"
                )
                merged[first_index] = combined
                del merged[second_index]
                changed = True
                break
            if changed:
                break
    return merged


def filter_small_clusters(clusters: Sequence[Cluster], min_cluster_size: int) -> list[Cluster]:
    kept = [cluster for cluster in clusters if cluster.size >= min_cluster_size]
    if len(kept) < len(clusters):
        logger.info(
            f"Discarded {len(clusters) - len(kept)} clusters with fewer than "
            f"{min_cluster_size} triplets"
        )
    return kept
