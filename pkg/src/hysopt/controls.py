"""Piecewise-constant control schedules shared by the simulators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class ControlSchedule:
    """Controls held constant between breakpoints.

    ``values[k]`` applies on ``[times[k], times[k+1])``; the last value is
    held to the end of the horizon.  An empty schedule (``n_u == 0``) is the
    autonomous case.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(len(times), -1)
        if len(times) == 0:
            raise ValueError("schedule needs at least one breakpoint")
        if np.any(np.diff(times) <= 0):
            raise ValueError("schedule breakpoints must be strictly increasing")
        if values.shape[0] != times.shape[0]:
            raise ValueError(
                f"{values.shape[0]} control values for {times.shape[0]} breakpoints"
            )
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, u, t0: float = 0.0) -> "ControlSchedule":
        return cls(np.array([t0]), np.asarray(u, dtype=float).reshape(1, -1))

    @classmethod
    def empty(cls, t0: float = 0.0) -> "ControlSchedule":
        return cls(np.array([t0]), np.zeros((1, 0)))

    @property
    def n_u(self) -> int:
        return self.values.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        return self.values[max(k, 0)]

    def breakpoints_within(self, t0: float, t1: float) -> list[float]:
        """Interior breakpoints in (t0, t1), for segmenting integrations."""
        return [float(t) for t in self.times if t0 < t < t1]
