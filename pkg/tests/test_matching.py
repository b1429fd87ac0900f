import itertools
import math

import numpy as np
import pytest

from recurra.discovery.config import DiscoveryConfig
from recurra.discovery.matching import (
    KeypointMatch,
    PairRelation,
    TripletMatch,
    enumerate_candidates,
    match_descriptors,
    prune_pairs_ppf,
    run_triplet_generation,
)
from recurra.frames.keypoints import make_keypoint
from recurra.geometry.transforms import MIN_TRIANGLE_AREA, RigidTransform, triangle_area
from recurra.geometry.triangles import triangle_valid
from tests.helpers import keypoints_from_arrays, two_instance_keypoints, unit_vectors


def random_matches(rng: np.random.Generator, match_count: int) -> tuple[list, list[KeypointMatch]]:
    """Helper function for `match_count` matches between random keypoints."""
    positions = rng.uniform(-100.0, 100.0, size=(2 * match_count, 3)) + np.array([0, 0, 800.0])
    keypoints = keypoints_from_arrays(
        positions, unit_vectors(rng, 2 * match_count), unit_vectors(rng, 2 * match_count, 4)
    )
    matches = [KeypointMatch(i=2 * k, j=2 * k + 1, desc_dist=0.0) for k in range(match_count)]
    return keypoints, matches


class TestMatchDescriptors:
    """Test cases for match_descriptors function."""

    def test_closest_pairs_first(self):
        """Test that the globally closest pair is taken before others."""
        keypoints = [
            make_keypoint([0, 0, 800], [0, 0, 1], [0.0, 0.0]),
            make_keypoint([0, 0, 800], [0, 0, 1], [0.1, 0.0]),
            make_keypoint([0, 0, 800], [0, 0, 1], [0.15, 0.0]),
        ]

        matches = match_descriptors(keypoints, max_dist=0.25)

        # 1-2 is closest; 0 is left without a partner
        assert [(m.i, m.j) for m in matches] == [(1, 2)]
        assert matches[0].desc_dist == pytest.approx(0.05)

    def test_threshold_is_inclusive(self):
        """Test that a pair exactly at the threshold is matched."""
        keypoints = [
            make_keypoint([0, 0, 800], [0, 0, 1], [0.0]),
            make_keypoint([0, 0, 800], [0, 0, 1], [0.25]),
        ]

        assert len(match_descriptors(keypoints, max_dist=0.25)) == 1
        assert match_descriptors(keypoints, max_dist=0.2) == []

    def test_ties_broken_by_index(self):
        """Test that equal distances go to the lowest (i, j)."""
        keypoints = [make_keypoint([0, 0, 800], [0, 0, 1], [0.0]) for _ in range(4)]

        matches = match_descriptors(keypoints, max_dist=0.25)

        assert [(m.i, m.j) for m in matches] == [(0, 1), (2, 3)]

    def test_every_keypoint_matched_at_most_once(self):
        """Test uniqueness on random descriptors."""
        rng = np.random.default_rng(0)
        keypoints = keypoints_from_arrays(
            rng.uniform(1, 100, size=(60, 3)), unit_vectors(rng, 60), rng.normal(size=(60, 3))
        )

        matches = match_descriptors(keypoints, max_dist=1.0)
        used = [k for m in matches for k in (m.i, m.j)]

        assert len(used) == len(set(used))
        assert all(m.i < m.j and m.desc_dist <= 1.0 for m in matches)

    def test_fewer_than_two_keypoints(self):
        """Test that a single keypoint has no match."""
        assert match_descriptors([make_keypoint([0, 0, 1], [0, 0, 1], [0.0])], 0.25) == []

    def test_match_requires_ordered_indices(self):
        """Test the KeypointMatch invariant."""
        with pytest.raises(ValueError, match="i < j"):
            KeypointMatch(i=3, j=3, desc_dist=0.0)


class TestPruneAndEnumerate:
    """Test cases for prune_pairs_ppf and enumerate_candidates functions."""

    @pytest.mark.parametrize("match_count", [3, 4, 5, 6, 7, 8])
    def test_unfiltered_candidate_count(self, match_count: int):
        """Test that without filters every triple and orientation is a candidate."""
        keypoints, matches = random_matches(np.random.default_rng(match_count), match_count)
        config = DiscoveryConfig().disable_filters()

        generation = run_triplet_generation(
            matches, PairRelation.unrestricted(match_count), keypoints, config
        )

        M = match_count
        assert generation.candidates == 2 * M * (M - 1) * (M - 2) // 3

    def test_small_candidate_counts(self):
        """Test the first few candidate counts."""
        counts = [
            enumerate_candidates(PairRelation.unrestricted(M), range(M))[0].shape[0]
            for M in (3, 4, 5)
        ]

        assert counts == [4, 16, 40]

    def test_first_match_never_flipped(self):
        """Test that the first match of a triple keeps its orientation."""
        triples, flips = enumerate_candidates(PairRelation.unrestricted(6), range(6))

        assert not flips[:, 0].any()
        assert np.all(triples[:, 0] < triples[:, 1])
        assert np.all(triples[:, 1] < triples[:, 2])
        assert len({tuple(row) for row in np.hstack([triples, flips])}) == triples.shape[0]

    def test_incompatible_pair_removes_triples(self):
        """Test that a triple needs all three pairs compatible."""
        relation = PairRelation.unrestricted(4)
        relation.aligned[0, 1] = relation.aligned[1, 0] = False
        relation.crossed[0, 1] = relation.crossed[1, 0] = False

        triples, _ = enumerate_candidates(relation, range(4))

        assert not any({0, 1} <= set(row) for row in triples.tolist())
        assert triples.shape[0] == 8

    def test_relation_is_symmetric_with_false_diagonal(self):
        """Test the shape of the PPF pair relation."""
        rng = np.random.default_rng(1)
        keypoints, matches = random_matches(rng, 12)

        relation = prune_pairs_ppf(matches, keypoints, 5.0, math.radians(35.0))

        for matrix in (relation.aligned, relation.crossed):
            assert np.array_equal(matrix, matrix.T)
            assert not matrix.diagonal().any()

    def test_rigid_copies_are_ppf_compatible(self):
        """Test that matches between rigid copies keep every aligned pair."""
        keypoints, _ = two_instance_keypoints(np.random.default_rng(2))
        matches = [KeypointMatch(i=k, j=k + 10, desc_dist=0.0) for k in range(10)]

        relation = prune_pairs_ppf(matches, keypoints, 5.0, math.radians(35.0))

        assert np.array_equal(relation.aligned, ~np.eye(10, dtype=bool))


class TestRunTripletGeneration:
    """Test cases for run_triplet_generation function."""

    def test_noiseless_two_instances(self):
        """Test that every valid triangle yields the true relative pose."""
        keypoints, transform = two_instance_keypoints(np.random.default_rng(3))
        config = DiscoveryConfig()
        matches = match_descriptors(keypoints, config.descriptor_threshold)
        relation = prune_pairs_ppf(
            matches, keypoints, config.ppf_distance_tolerance, config.ppf_angle_tolerance
        )

        generation = run_triplet_generation(matches, relation, keypoints, config)

        first = np.stack([kp.position for kp in keypoints[:10]])
        expected = sum(
            1
            for triple in itertools.combinations(range(10), 3)
            if triangle_valid(first[list(triple)], 10.0, 125.0, config.min_triangle_angle)
            and triangle_area(first[list(triple)]) > MIN_TRIANGLE_AREA
        )
        assert [(m.i, m.j) for m in matches] == [(k, k + 10) for k in range(10)]
        assert len(generation.triplets) == expected
        for triplet in generation.triplets:
            assert max(triplet.src) < 10 <= min(triplet.dst)
            assert triplet.pose.is_close(transform, rotation_atol=1e-9, translation_atol=1e-6)
            assert triplet.residual < 1e-6

    def test_keypoint_cap(self):
        """Test that no keypoint appears in more triplets than the cap."""
        keypoints, _ = two_instance_keypoints(np.random.default_rng(4), count=16)
        config = DiscoveryConfig(keypoint_cap=5)
        matches = match_descriptors(keypoints, config.descriptor_threshold)
        relation = prune_pairs_ppf(
            matches, keypoints, config.ppf_distance_tolerance, config.ppf_angle_tolerance
        )

        generation = run_triplet_generation(matches, relation, keypoints, config)

        usage = np.zeros(len(keypoints), dtype=int)
        for triplet in generation.triplets:
            usage[list(triplet.src + triplet.dst)] += 1
        assert generation.triplets
        assert usage.max() <= 5
        assert generation.geometric > len(generation.triplets)

    def test_sorted_by_key_and_thread_invariant(self):
        """Test the output order and its independence of the worker count."""
        keypoints, _ = two_instance_keypoints(np.random.default_rng(5), count=40)
        config = DiscoveryConfig()
        matches = match_descriptors(keypoints, config.descriptor_threshold)
        relation = prune_pairs_ppf(
            matches, keypoints, config.ppf_distance_tolerance, config.ppf_angle_tolerance
        )

        inline = run_triplet_generation(matches, relation, keypoints, config)
        threaded = run_triplet_generation(matches, relation, keypoints, config, workers=4)

        keys = [t.key for t in inline.triplets]
        assert keys == sorted(keys)
        assert keys == [t.key for t in threaded.triplets]
        assert inline.candidates == threaded.candidates

    def test_relation_must_cover_matches(self):
        """Test that the relation size must equal the match count."""
        keypoints, matches = random_matches(np.random.default_rng(6), 4)

        with pytest.raises(ValueError, match="Pair relation"):
            run_triplet_generation(
                matches, PairRelation.unrestricted(3), keypoints, DiscoveryConfig()
            )

    def test_no_matches(self):
        """Test that no matches give no candidates."""
        generation = run_triplet_generation(
            [], PairRelation.unrestricted(0), [], DiscoveryConfig()
        )

        assert generation.triplets == []
        assert generation.candidates == 0

    def test_inverted_triplet(self):
        """Test that inverting swaps the sides and inverts the pose."""
        pose = RigidTransform.from_translation([1.0, 2.0, 3.0])
        triplet = TripletMatch(src=(0, 1, 2), dst=(3, 4, 5), pose=pose, residual=0.5)

        inverted = triplet.inverted()

        assert inverted.key == ((3, 4, 5), (0, 1, 2))
        assert inverted.pose.is_close(pose.inverse())
        assert inverted.residual == 0.5
