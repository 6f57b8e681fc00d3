"""Roundabout layout, route paths and the merge-point Z-axis.

The ring is a single circulating lane of radius ``ring_radius`` traversed
counter-clockwise.  Each leg ``j`` has a straight entry ramp that joins the
ring tangentially at merge point ``j`` and a straight exit ramp that leaves
the ring tangentially a short arc distance upstream of that merge point.

A route ``(entry, exit)`` is therefore three pieces laid end to end:

    entry ramp  ->  ring arc  ->  exit ramp

and every vehicle position is described by its *progress* along that path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Position outside the domain of a geometric operation."""


class NotApplicableError(GeometryError):
    """The vehicle's route does not pass through the requested merge point."""


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    if -math.pi < theta <= math.pi:
        return theta
    t = math.fmod(theta + math.pi, TWO_PI)
    if t <= 0.0:
        t += TWO_PI
    return t - math.pi


@dataclass(frozen=True)
class MergePoint:
    id: int
    angle: float  # rad, position on the ring
    s_arc: float  # m, arc coordinate of the merge point


@dataclass(frozen=True)
class Ramp:
    leg: int
    anchor_angle: float
    length: float


@dataclass(frozen=True)
class RoundaboutLayout:
    center: tuple[float, float] = (0.0, 0.0)
    ring_radius: float = 30.0
    lane_width: float = 4.0
    n_legs: int = 3
    ramp_length: float = 60.0
    exit_ramp_length: float = 60.0
    exit_offset: float = 20.0  # arc metres between a leg's exit and its merge point
    merge_points: tuple[MergePoint, ...] = field(init=False)
    entries: tuple[Ramp, ...] = field(init=False)
    exits: tuple[Ramp, ...] = field(init=False)
    segment_lengths: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.ring_radius <= 0 or self.lane_width <= 0:
            raise GeometryError("ring radius and lane width must be positive")
        if self.n_legs < 1:
            raise GeometryError("at least one leg is required")
        if self.ramp_length <= 0 or self.exit_ramp_length <= 0:
            raise GeometryError("ramp lengths must be positive")
        circ = TWO_PI * self.ring_radius
        if not 0.0 < self.exit_offset < circ / self.n_legs:
            raise GeometryError("exit offset must lie inside one ring segment")
        angles = [TWO_PI * j / self.n_legs for j in range(self.n_legs)]
        mps = tuple(MergePoint(j, a, a * self.ring_radius) for j, a in enumerate(angles))
        object.__setattr__(self, "merge_points", mps)
        object.__setattr__(
            self, "entries", tuple(Ramp(j, a, self.ramp_length) for j, a in enumerate(angles))
        )
        exit_angles = [a - self.exit_offset / self.ring_radius for a in angles]
        object.__setattr__(
            self,
            "exits",
            tuple(Ramp(j, a % TWO_PI, self.exit_ramp_length) for j, a in enumerate(exit_angles)),
        )
        # segment j runs from merge point j to merge point j+1
        seg = []
        for j in range(self.n_legs):
            nxt = mps[(j + 1) % self.n_legs].s_arc if j + 1 < self.n_legs else circ
            seg.append(nxt - mps[j].s_arc if self.n_legs > 1 else circ)
        object.__setattr__(self, "segment_lengths", tuple(seg))

    @property
    def circumference(self) -> float:
        return TWO_PI * self.ring_radius

    def segment_of(self, s_arc: float) -> int:
        """Index of the ring segment containing arc coordinate ``s_arc``."""
        s = s_arc % self.circumference
        for j in range(self.n_legs - 1, -1, -1):
            if s >= self.merge_points[j].s_arc - 1e-12:
                return j
        return 0


def arc_to_cartesian(s_arc: float, layout: RoundaboutLayout) -> tuple[float, float, float]:
    """Point and tangent heading on the ring centre line at arc coordinate ``s_arc``."""
    circ = layout.circumference
    if not (0.0 <= s_arc < circ) or not math.isfinite(s_arc):
        raise GeometryError(f"arc coordinate {s_arc} outside [0, {circ})")
    phi = s_arc / layout.ring_radius
    cx, cy = layout.center
    x = cx + layout.ring_radius * math.cos(phi)
    y = cy + layout.ring_radius * math.sin(phi)
    return x, y, wrap_angle(phi + math.pi / 2)


def _ring_point(phi: float, layout: RoundaboutLayout) -> tuple[float, float]:
    cx, cy = layout.center
    return cx + layout.ring_radius * math.cos(phi), cy + layout.ring_radius * math.sin(phi)


@dataclass(frozen=True)
class PathPoint:
    x: float
    y: float
    theta: float
    curvature: float
    piece: str  # "entry", "ring" or "exit"


class Route:
    """Path geometry of one (entry, exit) pair."""

    __slots__ = (
        "entry", "exit", "layout", "ramp_length", "ring_length", "exit_length",
        "length", "_entry_start", "_entry_dir", "_exit_start", "_exit_dir", "_phi0",
        "_merge_offsets",
    )

    def __init__(self, entry: int, exit: int, layout: RoundaboutLayout):
        if not (0 <= entry < layout.n_legs and 0 <= exit < layout.n_legs):
            raise GeometryError(f"unknown leg in route ({entry}, {exit})")
        self.entry = entry
        self.exit = exit
        self.layout = layout
        circ = layout.circumference
        mp = layout.merge_points[entry]
        s_exit = layout.merge_points[exit].s_arc - layout.exit_offset
        self.ramp_length = layout.ramp_length
        self.ring_length = (s_exit - mp.s_arc) % circ
        self.exit_length = layout.exit_ramp_length
        self.length = self.ramp_length + self.ring_length + self.exit_length
        self._phi0 = mp.angle
        px, py = _ring_point(mp.angle, layout)
        tx, ty = -math.sin(mp.angle), math.cos(mp.angle)
        self._entry_dir = (tx, ty)
        self._entry_start = (px - self.ramp_length * tx, py - self.ramp_length * ty)
        phi_x = (mp.s_arc + self.ring_length) / layout.ring_radius
        qx, qy = _ring_point(phi_x, layout)
        self._exit_start = (qx, qy)
        self._exit_dir = (-math.sin(phi_x), math.cos(phi_x))
        # ring progress at which each merge point is crossed (None if never)
        offs = []
        for m in layout.merge_points:
            q = (m.s_arc - mp.s_arc) % circ
            offs.append(q if q <= self.ring_length else None)
        self._merge_offsets = tuple(offs)

    def __repr__(self):
        return f"Route({self.entry}, {self.exit})"

    @property
    def ring_start(self) -> float:
        return self.ramp_length

    @property
    def ring_end(self) -> float:
        return self.ramp_length + self.ring_length

    def piece(self, p: float) -> str:
        if p < self.ramp_length:
            return "entry"
        if p < self.ring_end:
            return "ring"
        return "exit"

    def ring_arc(self, p: float) -> float:
        """Ring arc coordinate of a point at progress ``p`` (ring piece only)."""
        return (self.layout.merge_points[self.entry].s_arc + (p - self.ramp_length)) % (
            self.layout.circumference
        )

    def point(self, p: float) -> PathPoint:
        if p < self.ramp_length:
            sx, sy = self._entry_start
            tx, ty = self._entry_dir
            return PathPoint(sx + p * tx, sy + p * ty, math.atan2(ty, tx), 0.0, "entry")
        if p < self.ring_end:
            phi = self._phi0 + (p - self.ramp_length) / self.layout.ring_radius
            x, y = _ring_point(phi, self.layout)
            return PathPoint(x, y, wrap_angle(phi + math.pi / 2), 1.0 / self.layout.ring_radius, "ring")
        d = p - self.ring_end
        sx, sy = self._exit_start
        tx, ty = self._exit_dir
        return PathPoint(sx + d * tx, sy + d * ty, math.atan2(ty, tx), 0.0, "exit")

    def curvature(self, p: float) -> float:
        return 1.0 / self.layout.ring_radius if self.ramp_length <= p < self.ring_end else 0.0

    def project(self, x: float, y: float, p_hint: float) -> float:
        """Progress of the path point nearest to (x, y), searched near ``p_hint``."""
        best, best_d = p_hint, math.inf
        for cand in (self._project_entry(x, y), self._project_ring(x, y, p_hint),
                     self._project_exit(x, y)):
            if cand is None:
                continue
            pt = self.point(cand)
            d = (pt.x - x) ** 2 + (pt.y - y) ** 2
            # prefer the candidate closest to the hint when distances tie
            if d < best_d - 1e-12 or (abs(d - best_d) <= 1e-12 and abs(cand - p_hint) < abs(best - p_hint)):
                best, best_d = cand, d
        return best

    def _project_entry(self, x, y):
        sx, sy = self._entry_start
        tx, ty = self._entry_dir
        p = (x - sx) * tx + (y - sy) * ty
        return p if p < self.ramp_length else None

    def _project_ring(self, x, y, p_hint):
        cx, cy = self.layout.center
        phi = math.atan2(y - cy, x - cx)
        hint = min(max(p_hint, self.ramp_length), self.ring_end)
        phi_hint = self._phi0 + (hint - self.ramp_length) / self.layout.ring_radius
        p = hint + wrap_angle(phi - phi_hint) * self.layout.ring_radius
        return p if self.ramp_length <= p < self.ring_end else None

    def _project_exit(self, x, y):
        sx, sy = self._exit_start
        tx, ty = self._exit_dir
        d = (x - sx) * tx + (y - sy) * ty
        return self.ring_end + d if d >= 0.0 else None

    def merge_offset(self, merge_id: int):
        """Ring progress at which this route crosses merge point ``merge_id``."""
        return self._merge_offsets[merge_id]

    def passes(self, merge_id: int) -> bool:
        return self._merge_offsets[merge_id] is not None


@dataclass(frozen=True)
class ZProjection:
    merge_point_id: int
    z: float


def project_to_z(route: Route, progress: float, merge_point: MergePoint | int) -> ZProjection:
    """Signed position of a vehicle on a merge point's virtual Z-axis.

    ``z`` is minus the remaining path distance to the merge point, so that ramp
    and ring vehicles approaching the same point share one ordered axis.
    """
    mid = merge_point if isinstance(merge_point, int) else merge_point.id
    off = route.merge_offset(mid)
    if off is None:
        raise NotApplicableError(f"{route!r} does not pass merge point {mid}")
    return ZProjection(mid, progress - route.ramp_length - off)


def distance_to_merge(route: Route, progress: float, merge_point: MergePoint | int) -> float:
    """Remaining path distance to the merge point (0 once it has been reached)."""
    return max(-project_to_z(route, progress, merge_point).z, 0.0)


def annulus_bounds(layout: RoundaboutLayout) -> tuple[float, float]:
    half = layout.lane_width / 2.0
    return layout.ring_radius - half, layout.ring_radius + half


def radial_distance(x: float, y: float, layout: RoundaboutLayout) -> float:
    cx, cy = layout.center
    return float(np.hypot(x - cx, y - cy))
