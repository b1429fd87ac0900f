"""Helpers for the whitespace-separated text formats (`.kp3`, `.objm`, annotations)."""

from collections.abc import Iterator, Sequence
from pathlib import Path


class FileFormatError(ValueError):
    """Raised on malformed input, naming the file and the 1-based line number."""

    def __init__(self, path: Path | str, line_number: int, reason: str):
        super().__init__(f"{path}:{line_number}: {reason}")
        self.path = Path(path)
        self.line_number = line_number
        self.reason = reason


def iter_data_lines(path: Path) -> Iterator[tuple[int, str]]:
    """Yield `(line_number, stripped_line)`, skipping blank and '#' comment lines."""
    with path.open() as f:
        for line_number, line in enumerate(f, start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                yield line_number, stripped


def parse_header(
    path: Path,
    lines: Iterator[tuple[int, str]],
    magic: str,
    version: int,
    field_count: int,
) -> list[int]:
    """Parse `<MAGIC> <version> <n1> ... <nk>` and return the integer fields."""
    try:
        line_number, line = next(lines)
    except StopIteration:
        raise FileFormatError(path, 1, f"missing '{magic}' header") from None
    tokens = line.split()
    if len(tokens) != 2 + field_count or tokens[0] != magic:
        raise FileFormatError(
            path, line_number, f"expected '{magic} {version}' header with {field_count} counts"
        )
    if tokens[1] != str(version):
        raise FileFormatError(path, line_number, f"unsupported {magic} version {tokens[1]}")
    counts = parse_ints(path, line_number, tokens[2:])
    if any(count < 0 for count in counts):
        raise FileFormatError(path, line_number, "header counts must be non-negative")
    return counts


def parse_floats(path: Path, line_number: int, tokens: Sequence[str]) -> list[float]:
    try:
        return [float(token) for token in tokens]
    except ValueError as e:
        raise FileFormatError(path, line_number, f"invalid number: {e}") from e


def parse_ints(path: Path, line_number: int, tokens: Sequence[str]) -> list[int]:
    try:
        return [int(token) for token in tokens]
    except ValueError as e:
        raise FileFormatError(path, line_number, f"invalid integer: {e}") from e


def next_data_line(
    path: Path,
    lines: Iterator[tuple[int, str]],
    what: str,
    after_line: int,
) -> tuple[int, str]:
    try:
        return next(lines)
    except StopIteration:
        raise FileFormatError(
            path, after_line + 1, f"unexpected end of file, expected {what}"
        ) from None


def format_float(value: float) -> str:
    """Shortest representation that round-trips exactly."""
    return repr(float(value))


def format_row(values: Sequence[float]) -> str:
    return " ".join(format_float(value) for value in values)
