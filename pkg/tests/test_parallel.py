import threading
import time

import pytest

from recurra.utils.parallel import chunk_ranges, ordered_map


def slow_square(x: int) -> int:
    """Helper function that finishes later for smaller inputs."""
    time.sleep(0.001 * (10 - x))
    return x * x


class TestOrderedMap:
    """Test cases for ordered_map function."""

    def test_ordered_map_inline(self):
        """Test mapping on the calling thread."""
        result = ordered_map(lambda x: x + 1, [1, 2, 3])

        assert result == [2, 3, 4]

    def test_ordered_map_preserves_order(self):
        """Test that results come back in input order despite finishing out of order."""
        result = ordered_map(slow_square, range(10), workers=4)

        assert result == [x * x for x in range(10)]

    def test_ordered_map_worker_count_invariant(self):
        """Test that the worker count never changes the output."""
        items = list(range(25))

        results = [ordered_map(slow_square, items, workers=w) for w in (1, 2, 8)]

        assert results[0] == results[1] == results[2]

    def test_ordered_map_uses_threads(self):
        """Test that several workers run on pool threads."""
        names = ordered_map(lambda _: threading.current_thread().name, range(4), workers=2)

        assert all(name != threading.main_thread().name for name in names)

    def test_ordered_map_empty(self):
        """Test mapping over no items."""
        assert ordered_map(slow_square, [], workers=3) == []

    def test_ordered_map_propagates_errors(self):
        """Test that an exception in a worker reaches the caller."""

        def fail(x: int) -> int:
            if x == 2:
                raise ValueError("boom")
            return x

        with pytest.raises(ValueError, match="boom"):
            ordered_map(fail, range(4), workers=2)


class TestChunkRanges:
    """Test cases for chunk_ranges function."""

    def test_chunk_ranges_even_split(self):
        """Test splitting into equal chunks."""
        assert chunk_ranges(6, 2) == [range(0, 2), range(2, 4), range(4, 6)]

    def test_chunk_ranges_remainder(self):
        """Test that the last chunk holds the remainder."""
        assert chunk_ranges(7, 3) == [range(0, 3), range(3, 6), range(6, 7)]

    def test_chunk_ranges_covers_everything(self):
        """Test that chunks cover the range exactly once."""
        chunks = chunk_ranges(2000, 250)

        assert [i for chunk in chunks for i in chunk] == list(range(2000))
        assert len(chunks) == 8

    def test_chunk_ranges_empty(self):
        """Test an empty range."""
        assert chunk_ranges(0, 5) == []

    def test_chunk_ranges_rejects_non_positive_size(self):
        """Test that the chunk size must be positive."""
        with pytest.raises(ValueError, match="positive"):
            chunk_ranges(10, 0)
