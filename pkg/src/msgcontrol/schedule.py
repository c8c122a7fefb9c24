"""Piecewise-constant rate schedules and timestamped glucose traces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class ScheduleError(ValueError):
    """Malformed schedule or trace."""


class ScheduleGapError(ScheduleError):
    """A schedule does not cover the requested time span."""


@dataclass(frozen=True)
class RateSchedule:
    """Right-continuous piecewise-constant rate function.

    ``rates[i]`` applies on ``[breakpoints[i], breakpoints[i + 1])`` and the
    last rate runs up to ``horizon``. Rates are U/hr for insulin or
    carb-units/hr for nutrition (1 carb-unit = 1 g carbohydrate).
    """

    breakpoints: np.ndarray
    rates: np.ndarray
    horizon: float

    def __init__(self, breakpoints: Sequence[float], rates: Sequence[float], horizon: float):
        b = np.asarray(breakpoints, dtype=float).copy()
        r = np.asarray(rates, dtype=float).copy()
        if b.ndim != 1 or r.ndim != 1 or len(b) == 0 or len(b) != len(r):
            raise ScheduleError("breakpoints and rates must be equal-length, non-empty 1-d sequences")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(r)) and np.isfinite(horizon)):
            raise ScheduleError("schedule values must be finite")
        if np.any(np.diff(b) <= 0):
            raise ScheduleError("breakpoints must be strictly increasing")
        if np.any(r < 0):
            raise ScheduleError("rates must be non-negative")
        if horizon <= b[-1]:
            raise ScheduleError(f"horizon {horizon} must exceed the last breakpoint {b[-1]}")
        b.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "rates", r)
        object.__setattr__(self, "horizon", float(horizon))

    @classmethod
    def constant(cls, rate: float, start: float, horizon: float) -> RateSchedule:
        return cls([start], [rate], horizon)

    @property
    def start(self) -> float:
        return float(self.breakpoints[0])

    def covers(self, t0: float, t1: float) -> bool:
        return self.start <= t0 and t1 <= self.horizon

    def require_cover(self, t0: float, t1: float, what: str = "schedule") -> None:
        if not self.covers(t0, t1):
            raise ScheduleGapError(
                f"{what} covers [{self.start}, {self.horizon}] but [{t0}, {t1}] was requested"
            )

    def rate_at(self, t: float) -> float:
        if t < self.start or t > self.horizon:
            raise ScheduleGapError(f"time {t} outside schedule [{self.start}, {self.horizon}]")
        i = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return float(self.rates[i])

    def change_times(self) -> np.ndarray:
        """Interior times where the rate actually changes value."""
        idx = np.nonzero(np.diff(self.rates) != 0)[0] + 1
        return self.breakpoints[idx].copy()

    def pieces(self, t0: float, t1: float) -> Iterator[tuple[float, float, float]]:
        """Yield ``(a, b, rate)`` constant pieces tiling ``[t0, t1]``."""
        self.require_cover(t0, t1)
        if t1 <= t0:
            return
        edges = np.append(self.breakpoints, self.horizon)
        i = int(np.searchsorted(self.breakpoints, t0, side="right")) - 1
        a = t0
        while a < t1:
            b = min(float(edges[i + 1]), t1)
            yield a, b, float(self.rates[i])
            a = b
            i += 1

    def restrict(self, t0: float, t1: float) -> RateSchedule:
        ps = list(self.pieces(t0, t1))
        if not ps:
            raise ScheduleError("empty restriction")
        return RateSchedule([p[0] for p in ps], [p[2] for p in ps], t1)

    def extend(self, start: float, rate: float, horizon: float) -> RateSchedule:
        """Replace everything from ``start`` on with ``rate`` until ``horizon``."""
        if start < self.start:
            raise ScheduleError("extension starts before the schedule")
        if start > self.horizon:
            raise ScheduleGapError(f"extension at {start} leaves a gap after {self.horizon}")
        keep = self.breakpoints < start
        b = list(self.breakpoints[keep]) + [start]
        r = list(self.rates[keep]) + [rate]
        return RateSchedule(b, r, horizon)

    def mean_rate(self, t0: float, t1: float) -> float:
        if t1 <= t0:
            return self.rate_at(t0)
        return sum((b - a) * r for a, b, r in self.pieces(t0, t1)) / (t1 - t0)

    def has_positive_interval(self, t0: float | None = None, t1: float | None = None) -> bool:
        t0 = self.start if t0 is None else t0
        t1 = self.horizon if t1 is None else t1
        return any(r > 0 and b > a for a, b, r in self.pieces(t0, t1))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RateSchedule):
            return NotImplemented
        return (
            np.array_equal(self.breakpoints, other.breakpoints)
            and np.array_equal(self.rates, other.rates)
            and self.horizon == other.horizon
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class GlucoseTrace:
    """Timestamped BG measurements (hr, mg/dL)."""

    times: np.ndarray
    values: np.ndarray = field(repr=False)

    def __init__(self, times: Sequence[float], values: Sequence[float]):
        t = np.asarray(times, dtype=float).copy()
        v = np.asarray(values, dtype=float).copy()
        if t.ndim != 1 or t.shape != v.shape:
            raise ScheduleError("times and values must be equal-length 1-d sequences")
        if np.any(np.diff(t) <= 0):
            raise ScheduleError("trace times must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ScheduleError("trace values must be finite")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.times)

    def window(self, t0: float, t1: float) -> GlucoseTrace:
        keep = (self.times >= t0) & (self.times <= t1)
        return GlucoseTrace(self.times[keep], self.values[keep])

    def append(self, t: float, value: float) -> GlucoseTrace:
        return GlucoseTrace(np.append(self.times, t), np.append(self.values, value))

    def last_at_or_before(self, t: float) -> tuple[float, float] | None:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        if i < 0:
            return None
        return float(self.times[i]), float(self.values[i])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GlucoseTrace):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.values, other.values)

    __hash__ = None  # type: ignore[assignment]
