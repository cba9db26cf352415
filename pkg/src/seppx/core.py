"""Domain types shared across the package.

Events live in a rectangular space-time observation window with integer
casualty marks.  All model code operates on unit-scaled coordinates
(time, both spatial axes and the mark mapped into [0, 1]); the
:class:`UnitScaler` records the affine maps so patterns and fitted
intensities can be taken back to original units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

BACKGROUND = -1

__all__ = [
    "BACKGROUND",
    "MarkedEvent",
    "ObservationDomain",
    "PointPattern",
    "BranchingStructure",
    "UnitScaler",
    "scale_to_unit",
]


@dataclass(frozen=True)
class MarkedEvent:
    """One event: identifier, time, planar location and casualty mark.

    ``t`` is measured in the domain's time unit (days for ingested data,
    already-unit time for simulated patterns).  ``m`` is a non-negative
    casualty count; it is stored as a float so unit-scaled patterns can
    hold fractional mark values, but raw data always carries integers.
    """

    id: str
    t: float
    x: float
    y: float
    m: float

    def __post_init__(self):
        if not np.isfinite(self.t) or not np.isfinite(self.x) or not np.isfinite(self.y):
            raise ValueError(f"event {self.id}: non-finite coordinates")
        if not np.isfinite(self.m) or self.m < 0:
            raise ValueError(f"event {self.id}: mark must be finite and >= 0, got {self.m}")

    @property
    def s(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class ObservationDomain:
    """Rectangular space-time window with a mark ceiling.

    ``mark_ceiling`` bounds the casualty scale used when mapping marks to
    (0, 1); ``None`` means "derive from data" (max observed mark + 1).
    """

    t_range: tuple[float, float]
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    mark_ceiling: float | None = None

    def __post_init__(self):
        for name, (lo, hi) in (
            ("t_range", self.t_range),
            ("x_range", self.x_range),
            ("y_range", self.y_range),
        ):
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
                raise ValueError(f"{name} must have positive extent, got ({lo}, {hi})")
        if self.mark_ceiling is not None and self.mark_ceiling <= 0:
            raise ValueError("mark_ceiling must be positive")

    @property
    def volume(self) -> float:
        """Space-time volume |W x T| (mark axis excluded)."""
        return (
            (self.t_range[1] - self.t_range[0])
            * (self.x_range[1] - self.x_range[0])
            * (self.y_range[1] - self.y_range[0])
        )

    def contains(self, t, x, y) -> bool:
        return (
            self.t_range[0] <= t <= self.t_range[1]
            and self.x_range[0] <= x <= self.x_range[1]
            and self.y_range[0] <= y <= self.y_range[1]
        )

    @classmethod
    def unit(cls, mark_ceiling: float = 1.0) -> "ObservationDomain":
        return cls((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), mark_ceiling)


class PointPattern:
    """Strictly time-ordered collection of marked events inside a domain.

    Exposes the coordinate columns as numpy arrays; these are read-only
    views shared by the inference code, so treat patterns as immutable.
    """

    def __init__(self, events: Sequence[MarkedEvent], domain: ObservationDomain):
        events = tuple(events)
        self.domain = domain
        self.events = events
        n = len(events)
        self.times = np.array([e.t for e in events], dtype=float)
        self.xs = np.array([e.x for e in events], dtype=float)
        self.ys = np.array([e.y for e in events], dtype=float)
        self.marks = np.array([e.m for e in events], dtype=float)
        self.ids = tuple(e.id for e in events)
        if n > 1 and not np.all(np.diff(self.times) > 0):
            k = int(np.argmin(np.diff(self.times)))
            raise ValueError(
                f"event times must be strictly increasing; tie or inversion at index {k}"
            )
        for e in events:
            if not domain.contains(e.t, e.x, e.y):
                raise ValueError(f"event {e.id} at ({e.t}, {e.x}, {e.y}) outside domain")
        for arr in (self.times, self.xs, self.ys, self.marks):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, i: int) -> MarkedEvent:
        return self.events[i]

    def mark_ceiling(self) -> float:
        """Effective mark ceiling: configured value or max observed + 1."""
        if self.domain.mark_ceiling is not None:
            return float(self.domain.mark_ceiling)
        if len(self) == 0:
            return 1.0
        return float(np.max(self.marks) + 1.0)

    @classmethod
    def from_arrays(cls, times, xs, ys, marks, domain, ids=None) -> "PointPattern":
        times = np.asarray(times, dtype=float)
        if ids is None:
            ids = [str(i) for i in range(len(times))]
        events = [
            MarkedEvent(str(i_), float(t), float(x), float(y), float(m))
            for i_, t, x, y, m in zip(ids, times, xs, ys, marks)
        ]
        return cls(events, domain)


class BranchingStructure:
    """Parent assignment for every event: an earlier event index or BACKGROUND.

    Because patterns are strictly time ordered, requiring parent[i] < i
    rules out cycles and future parents at once.
    """

    def __init__(self, parents: Iterable[int]):
        parents = np.asarray(list(parents), dtype=int)
        bad = np.nonzero((parents >= np.arange(len(parents))) & (parents != BACKGROUND))[0]
        if bad.size:
            raise ValueError(f"parent of event {bad[0]} is not an earlier event")
        if np.any(parents < BACKGROUND):
            raise ValueError("parent indices must be >= -1")
        self.parents = parents
        self.parents.setflags(write=False)

    def __len__(self) -> int:
        return len(self.parents)

    def __eq__(self, other) -> bool:
        return isinstance(other, BranchingStructure) and np.array_equal(
            self.parents, other.parents
        )

    @property
    def background_indices(self) -> np.ndarray:
        return np.nonzero(self.parents == BACKGROUND)[0]

    @property
    def triggered_indices(self) -> np.ndarray:
        return np.nonzero(self.parents != BACKGROUND)[0]

    def roots(self) -> np.ndarray:
        """Cluster root (background ancestor index) of every event."""
        n = len(self.parents)
        roots = np.empty(n, dtype=int)
        for i in range(n):
            j = i
            while self.parents[j] != BACKGROUND:
                j = self.parents[j]
            roots[i] = j
        return roots

    def clusters(self) -> list[tuple[int, list[int]]]:
        """Partition events into clusters (root index, time-ordered members).

        Members include the root itself and are sorted by event index,
        which equals time order for a valid pattern.
        """
        roots = self.roots()
        order: dict[int, list[int]] = {}
        for i, r in enumerate(roots):
            order.setdefault(int(r), []).append(i)
        return [(r, members) for r, members in sorted(order.items())]

    @classmethod
    def all_background(cls, n: int) -> "BranchingStructure":
        return cls(np.full(n, BACKGROUND, dtype=int))


@dataclass(frozen=True)
class UnitScaler:
    """Affine maps taking a domain's (t, x, y, m) onto the unit hypercube.

    ``volume`` is the space-time Jacobian |T x W|; intensities fitted on
    the unit cube divide by it to get original-unit intensities (events
    per time-unit per area-unit), keeping expected counts invariant.
    """

    t0: float
    t_scale: float
    x0: float
    x_scale: float
    y0: float
    y_scale: float
    mark_ceiling: float

    def __post_init__(self):
        if min(self.t_scale, self.x_scale, self.y_scale, self.mark_ceiling) <= 0:
            raise ValueError("scale factors must be positive")

    @property
    def volume(self) -> float:
        return self.t_scale * self.x_scale * self.y_scale

    # -- forward maps ---------------------------------------------------
    def t_to_unit(self, t):
        return (np.asarray(t, dtype=float) - self.t0) / self.t_scale

    def x_to_unit(self, x):
        return (np.asarray(x, dtype=float) - self.x0) / self.x_scale

    def y_to_unit(self, y):
        return (np.asarray(y, dtype=float) - self.y0) / self.y_scale

    def m_to_unit(self, m):
        return np.asarray(m, dtype=float) / self.mark_ceiling

    # -- inverse maps ---------------------------------------------------
    def t_from_unit(self, t):
        return np.asarray(t, dtype=float) * self.t_scale + self.t0

    def x_from_unit(self, x):
        return np.asarray(x, dtype=float) * self.x_scale + self.x0

    def y_from_unit(self, y):
        return np.asarray(y, dtype=float) * self.y_scale + self.y0

    def m_from_unit(self, m):
        return np.asarray(m, dtype=float) * self.mark_ceiling

    def scale_pattern(self, pattern: PointPattern) -> PointPattern:
        dom = ObservationDomain((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), mark_ceiling=1.0)
        t = self.t_to_unit(pattern.times)
        # compressing by 1/t_scale can merge distinct times onto one float
        for i in range(1, t.size):
            if t[i] <= t[i - 1]:
                t[i] = np.nextafter(t[i - 1], np.inf)
        return PointPattern.from_arrays(
            t,
            self.x_to_unit(pattern.xs),
            self.y_to_unit(pattern.ys),
            self.m_to_unit(pattern.marks),
            dom,
            ids=pattern.ids,
        )

    def unscale_pattern(self, pattern: PointPattern, domain: ObservationDomain) -> PointPattern:
        return PointPattern.from_arrays(
            self.t_from_unit(pattern.times),
            self.x_from_unit(pattern.xs),
            self.y_from_unit(pattern.ys),
            self.m_from_unit(pattern.marks),
            domain,
            ids=pattern.ids,
        )

    def unscale_intensity(self, value):
        """Unit-cube intensity -> original units (per time-unit per area)."""
        return np.asarray(value, dtype=float) / self.volume

    @classmethod
    def for_domain(cls, domain: ObservationDomain, mark_ceiling: float) -> "UnitScaler":
        return cls(
            t0=domain.t_range[0],
            t_scale=domain.t_range[1] - domain.t_range[0],
            x0=domain.x_range[0],
            x_scale=domain.x_range[1] - domain.x_range[0],
            y0=domain.y_range[0],
            y_scale=domain.y_range[1] - domain.y_range[0],
            mark_ceiling=mark_ceiling,
        )


def scale_to_unit(pattern: PointPattern) -> tuple[PointPattern, UnitScaler]:
    """Map a pattern onto the unit cube and return it with its scaler."""
    scaler = UnitScaler.for_domain(pattern.domain, pattern.mark_ceiling())
    return scaler.scale_pattern(pattern), scaler
