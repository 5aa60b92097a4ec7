from __future__ import annotations

from dataclasses import dataclass


class DataError(ValueError):
    """Malformed or insufficient input data."""


class InsufficientHistoryError(DataError):
    pass


def intervals_per_week(interval_hours: int = 1) -> int:
    if interval_hours < 1 or 24 % interval_hours != 0:
        raise ValueError("interval_hours must be a positive divisor of 24")
    return 7 * 24 // interval_hours


@dataclass(frozen=True)
class HistoricalWindow:
    target: int
    short: tuple[int, ...]
    long: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.short) + len(self.long)

    @property
    def indices(self) -> tuple[int, ...]:
        """Sequence order: long-term oldest first, then short-term oldest first."""
        return tuple(reversed(self.long)) + tuple(reversed(self.short))


def build_window(target: int, p: int, q: int, w: int) -> HistoricalWindow:
    if p < 0 or q < 0 or p + q < 1:
        raise ValueError("window needs p, q >= 0 and p + q >= 1")
    if w < 1:
        raise ValueError("intervals per week must be >= 1")
    if target - q * w < 0 or target - p < 0:
        raise InsufficientHistoryError(
            f"target={target} needs {max(p, q * w)} intervals of history (p={p} q={q} w={w})"
        )
    short = tuple(target - k for k in range(1, p + 1))
    long = tuple(target - k * w for k in range(1, q + 1))
    return HistoricalWindow(target=target, short=short, long=long)


def first_valid_target(p: int, q: int, w: int) -> int:
    return max(p, q * w)
