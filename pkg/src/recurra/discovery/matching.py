"""Unique keypoint matching and geometric triplet-match generation.

A scene with two instances of an object yields keypoint matches between the
instances. Any three matches span a pair of corresponding triangles, and
each accepted triangle pair gives one candidate relative pose.
"""

from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple, Self

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from scipy.spatial.distance import cdist

from recurra.discovery.config import DiscoveryConfig
from recurra.frames.keypoints import Keypoint3D, keypoint_arrays
from recurra.geometry.features import MIN_PAIR_DISTANCE, compute_ppf_batch, ppf_compatible_batch
from recurra.geometry.transforms import (
    MIN_TRIANGLE_AREA,
    RigidTransform,
    fit_rigid_transforms_batch,
)
from recurra.geometry.triangles import (
    sidedness_consistent_batch,
    triangle_valid_batch,
    triangles_overlap_batch,
)
from recurra.utils.parallel import chunk_ranges, ordered_map

FIRST_MATCHES_PER_CHUNK = 16

# Orientation of the second and third match relative to the first: fixing the
# first match keeps one triplet out of each inverse-equivalent pair.
ORIENTATION_PATTERNS = ((False, False), (False, True), (True, False), (True, True))


@dataclass(frozen=True)
class KeypointMatch:
    i: int
    j: int
    desc_dist: float

    def __post_init__(self) -> None:
        if not self.i < self.j:
            raise ValueError(f"KeypointMatch requires i < j, got ({self.i}, {self.j})")
        if self.desc_dist < 0:
            raise ValueError(f"Descriptor distance must be non-negative, got {self.desc_dist}")


@dataclass(frozen=True, eq=False)
class TripletMatch:
    """Two corresponding keypoint triangles; `pose` maps `src` positions onto `dst`."""

    src: tuple[int, int, int]
    dst: tuple[int, int, int]
    pose: RigidTransform
    residual: float

    @property
    def key(self) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        return self.src, self.dst

    def inverted(self) -> "TripletMatch":
        return TripletMatch(
            src=self.dst, dst=self.src, pose=self.pose.inverse(), residual=self.residual
        )


class PairRelation(NamedTuple):
    """PPF compatibility of every pair of matches `k = (a_k, b_k)`, `l = (a_l, b_l)`.

    `aligned[k, l]` compares `F(a_k, a_l)` with `F(b_k, b_l)`; `crossed[k, l]`
    compares `F(a_k, b_l)` with `F(b_k, a_l)`, the pair with match `l` flipped.
    Both matrices are symmetric with a false diagonal.
    """

    aligned: NDArray[np.bool_]
    crossed: NDArray[np.bool_]

    @classmethod
    def unrestricted(cls, match_count: int) -> Self:
        full = ~np.eye(match_count, dtype=bool)
        return cls(aligned=full, crossed=full.copy())

    @property
    def match_count(self) -> int:
        return int(self.aligned.shape[0])

    def compatible(self, flipped: bool) -> NDArray[np.bool_]:
        return self.crossed if flipped else self.aligned


class TripletGeneration(NamedTuple):
    triplets: list[TripletMatch]
    candidates: int
    geometric: int


def match_descriptors(kps: Sequence[Keypoint3D], max_dist: float) -> list[KeypointMatch]:
    """Greedy unique matching: repeatedly take the closest pair of unused keypoints.

    Ties in descriptor distance are broken by `(i, j)`. Returned matches are
    in acceptance order.
    """
    if len(kps) < 2:
        return []
    descriptors = keypoint_arrays(kps).descriptors
    distances = cdist(descriptors, descriptors)
    i_idx, j_idx = np.triu_indices(len(kps), k=1)
    pair_dist = distances[i_idx, j_idx]
    close = pair_dist <= max_dist
    i_idx, j_idx, pair_dist = i_idx[close], j_idx[close], pair_dist[close]
    order = np.lexsort((j_idx, i_idx, pair_dist))

    used = np.zeros(len(kps), dtype=bool)
    matches: list[KeypointMatch] = []
    for index in order:
        i, j = int(i_idx[index]), int(j_idx[index])
        if used[i] or used[j]:
            continue
        used[i] = used[j] = True
        matches.append(KeypointMatch(i=i, j=j, desc_dist=float(pair_dist[index])))
    return matches


def prune_pairs_ppf(
    matches: Sequence[KeypointMatch],
    kps: Sequence[Keypoint3D],
    dist_tol: float,
    angle_tol: float,
) -> PairRelation:
    arrays = keypoint_arrays(kps)
    a = np.array([m.i for m in matches], dtype=np.intp)
    b = np.array([m.j for m in matches], dtype=np.intp)

    def features(first: NDArray[np.intp], second: NDArray[np.intp]) -> NDArray[np.float64]:
        return compute_ppf_batch(
            arrays.positions[first][:, None, :],
            arrays.normals[first][:, None, :],
            arrays.positions[second][None, :, :],
            arrays.normals[second][None, :, :],
        )

    def relation(src: NDArray[np.float64], dst: NDArray[np.float64]) -> NDArray[np.bool_]:
        compatible = ppf_compatible_batch(src, dst, dist_tol, angle_tol)
        compatible &= (src[..., 0] >= MIN_PAIR_DISTANCE) & (dst[..., 0] >= MIN_PAIR_DISTANCE)
        np.fill_diagonal(compatible, False)
        return compatible

    return PairRelation(
        aligned=relation(features(a, a), features(b, b)),
        crossed=relation(features(a, b), features(b, a)),
    )


def enumerate_candidates(
    relation: PairRelation,
    first_matches: range,
) -> tuple[NDArray[np.intp], NDArray[np.bool_]]:
    """Match triples `k1 < k2 < k3` whose three pairs are compatible.

    Returns the match indices `(n, 3)` and per-match flip flags `(n, 3)`; the
    first match is never flipped.
    """
    M = relation.match_count
    triples: list[NDArray[np.intp]] = []
    flips: list[NDArray[np.bool_]] = []
    for k1 in first_matches:
        rest = slice(k1 + 1, M)
        for flip2, flip3 in ORIENTATION_PATTERNS:
            c12 = relation.compatible(flip2)[k1, rest]
            c13 = relation.compatible(flip3)[k1, rest]
            c23 = relation.compatible(flip2 != flip3)[rest, rest]
            mask = np.triu(c23 & c12[:, None] & c13[None, :], k=1)
            k2, k3 = np.nonzero(mask)
            if k2.size == 0:
                continue
            triples.append(
                np.column_stack([np.full_like(k2, k1), k2 + k1 + 1, k3 + k1 + 1]).astype(np.intp)
            )
            flips.append(np.tile(np.array([False, flip2, flip3]), (k2.size, 1)))
    if not triples:
        return np.zeros((0, 3), dtype=np.intp), np.zeros((0, 3), dtype=bool)
    return np.concatenate(triples), np.concatenate(flips)


class _ChunkResult(NamedTuple):
    src: NDArray[np.intp]
    dst: NDArray[np.intp]
    R: NDArray[np.float64]
    t: NDArray[np.float64]
    residual: NDArray[np.float64]
    candidates: int


def _triangle_areas(P: NDArray[np.float64]) -> NDArray[np.float64]:
    return 0.5 * np.linalg.norm(np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]), axis=-1)


def _process_chunk(
    relation: PairRelation,
    first_matches: range,
    a: NDArray[np.intp],
    b: NDArray[np.intp],
    positions: NDArray[np.float64],
    normals: NDArray[np.float64],
    config: DiscoveryConfig,
) -> _ChunkResult:
    triples, flips = enumerate_candidates(relation, first_matches)
    candidates = triples.shape[0]
    src = np.where(flips, b[triples], a[triples])
    dst = np.where(flips, a[triples], b[triples])

    keep = np.ones(candidates, dtype=bool)
    P, Q = positions[src], positions[dst]
    if config.triangle_filter:
        keep &= triangle_valid_batch(P, config.min_edge, config.max_edge, config.min_triangle_angle)
        keep &= triangle_valid_batch(Q, config.min_edge, config.max_edge, config.min_triangle_angle)
    keep &= (_triangle_areas(P) > MIN_TRIANGLE_AREA) & (_triangle_areas(Q) > MIN_TRIANGLE_AREA)
    if config.sidedness_filter:
        index = np.flatnonzero(keep)
        keep[index] = sidedness_consistent_batch(
            P[index], Q[index], config.sidedness_eps, normals[src[index]], normals[dst[index]]
        )
    if config.overlap_filter:
        index = np.flatnonzero(keep)
        keep[index] = ~triangles_overlap_batch(P[index], Q[index])

    src, dst, P, Q = src[keep], dst[keep], P[keep], Q[keep]
    if src.shape[0] == 0:
        empty = np.zeros(0)
        return _ChunkResult(src, dst, np.zeros((0, 3, 3)), np.zeros((0, 3)), empty, candidates)
    R, t = fit_rigid_transforms_batch(P, Q)
    moved = np.einsum("nij,nkj->nki", R, P) + t[:, None, :]
    residual = np.sqrt(np.mean(np.sum((moved - Q) ** 2, axis=-1), axis=-1))
    return _ChunkResult(src, dst, R, t, residual, candidates)


def run_triplet_generation(
    matches: Sequence[KeypointMatch],
    relation: PairRelation,
    kps: Sequence[Keypoint3D],
    config: DiscoveryConfig,
    workers: int = 1,
) -> TripletGeneration:
    """Enumerate, filter and cap triplet matches, keeping the stage counts."""
    if relation.match_count != len(matches):
        raise ValueError(
            f"Pair relation covers {relation.match_count} matches, got {len(matches)} matches"
        )
    arrays = keypoint_arrays(kps)
    a = np.array([m.i for m in matches], dtype=np.intp)
    b = np.array([m.j for m in matches], dtype=np.intp)

    chunks = ordered_map(
        lambda first_matches: _process_chunk(
            relation, first_matches, a, b, arrays.positions, arrays.normals, config
        ),
        chunk_ranges(len(matches), FIRST_MATCHES_PER_CHUNK),
        workers=workers,
    )
    candidates = sum(chunk.candidates for chunk in chunks)
    if not chunks or sum(chunk.src.shape[0] for chunk in chunks) == 0:
        logger.info(f"Triplets: {candidates} candidates, 0 geometric, 0 accepted")
        return TripletGeneration(triplets=[], candidates=candidates, geometric=0)

    src = np.concatenate([chunk.src for chunk in chunks])
    dst = np.concatenate([chunk.dst for chunk in chunks])
    R = np.concatenate([chunk.R for chunk in chunks])
    t = np.concatenate([chunk.t for chunk in chunks])
    residual = np.concatenate([chunk.residual for chunk in chunks])

    order = np.lexsort((*dst.T[::-1], *src.T[::-1], residual))
    usage = np.zeros(len(kps), dtype=np.int64)
    accepted: list[int] = []
    for index in order:
        members = np.concatenate([src[index], dst[index]])
        if np.any(usage[members] >= config.keypoint_cap):
            continue
        usage[members] += 1
        accepted.append(int(index))

    triplets = [
        TripletMatch(
            src=(int(src[k, 0]), int(src[k, 1]), int(src[k, 2])),
            dst=(int(dst[k, 0]), int(dst[k, 1]), int(dst[k, 2])),
            pose=RigidTransform(R=R[k], t=t[k]),
            residual=float(residual[k]),
        )
        for k in accepted
    ]
    triplets.sort(key=lambda triplet: triplet.key)
    logger.info(
        f"Triplets: {candidates} candidates, {src.shape[0]} geometric, {len(triplets)} accepted"
    )
    return TripletGeneration(triplets=triplets, candidates=candidates, geometric=int(src.shape[0]))
