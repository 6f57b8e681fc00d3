"""Traffic generation, human-driven behaviour, TTC and neighbour identification."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Category, ControlInput, VehicleState
from .geometry import Route, RoundaboutLayout, wrap_angle

LOG = logging.getLogger(__name__)

COORDINATION_RADIUS = 60.0


def ttc(d_ego: float, d_i: float, v_ego_bar: float, v_i: float):
    """Time to collision at a merge point, or ``None`` when the pair is not closing.

    ``v_ego_bar`` is the communicated (delayed) speed of the potential ego vehicle.
    """
    if d_ego < 0 or d_i < 0:
        raise ValueError("distances to the merge point must be non-negative")
    dv = v_ego_bar - v_i
    if dv == 0.0:
        return None
    t = (d_ego - d_i) / dv
    return t if t > 0.0 else None


def in_conflict(ttc_value, ttc_th: float = 2.5) -> bool:
    return ttc_value is not None and 0.0 < ttc_value < ttc_th


@dataclass(frozen=True)
class NeighborPair:
    merge_point_id: int
    preceding: int | None = None
    following: int | None = None


def identify_neighbors(vehicle_id: int, z_by_id: dict[int, float], merge_point_id: int,
                       radius: float = COORDINATION_RADIUS) -> NeighborPair:
    """Nearest vehicle ahead (larger z) and behind (smaller z) on one merge axis.

    Equal z is resolved by id: the lower id is treated as being ahead.
    """
    if vehicle_id not in z_by_id or abs(z_by_id[vehicle_id]) > radius:
        return NeighborPair(merge_point_id)
    key = lambda i: (-z_by_id[i], i)  # noqa: E731  sort front to back
    order = sorted((i for i, z in z_by_id.items() if abs(z) <= radius), key=key)
    k = order.index(vehicle_id)
    pre = order[k - 1] if k > 0 else None
    fol = order[k + 1] if k + 1 < len(order) else None
    return NeighborPair(merge_point_id, pre, fol)


@dataclass
class Arrival:
    id: int
    entry: int
    exit: int
    category: Category
    t_arrival: float


@dataclass
class ArrivalProcess:
    """Poisson arrivals per entry with random exits and CAV penetration."""

    rates: tuple[float, ...] = (396.0, 396.0, 396.0)  # veh/h per entry
    penetration: float = 0.6
    seed: int = 0
    allow_u_turn: bool = False
    exit_demand: float = 0.0  # extra veh/h delivered to every exit
    max_vehicles: int | None = None
    rng: np.random.Generator = field(init=False, repr=False)
    spawned: int = field(default=0, init=False)

    def __post_init__(self):
        if not 0.0 <= self.penetration <= 1.0:
            raise ValueError("penetration must lie in [0, 1]")
        if any(r < 0 for r in self.rates) or self.exit_demand < 0:
            raise ValueError("rates must be non-negative")
        self.rng = np.random.default_rng(self.seed)

    @property
    def n_legs(self) -> int:
        return len(self.rates)

    def _exits_for(self, entry: int) -> list[int]:
        return [m for m in range(self.n_legs) if self.allow_u_turn or m != entry or self.n_legs == 1]

    def od_rates(self) -> np.ndarray:
        """Origin-destination demand matrix in veh/h."""
        n = self.n_legs
        od = np.zeros((n, n))
        for j, r in enumerate(self.rates):
            ex = self._exits_for(j)
            od[j, ex] += r / len(ex)
        if self.exit_demand > 0:
            for m in range(n):
                src = [j for j in range(n) if m in self._exits_for(j)]
                od[src, m] += self.exit_demand / len(src)
        return od

    def expected_per_tick(self, dt: float) -> np.ndarray:
        return self.od_rates().sum(axis=1) * dt / 3600.0

    def draw(self, tick: int, dt: float) -> list[Arrival]:
        out = []
        od = self.od_rates()
        lam = od.sum(axis=1) * dt / 3600.0
        counts = self.rng.poisson(lam)
        for j, c in enumerate(counts):
            for _ in range(int(c)):
                if self.max_vehicles is not None and self.spawned >= self.max_vehicles:
                    return out
                p = od[j] / od[j].sum()
                m = int(self.rng.choice(self.n_legs, p=p))
                cat = Category.CAV if self.rng.random() < self.penetration else Category.HDV
                out.append(Arrival(self.spawned, j, m, cat, tick * dt))
                self.spawned += 1
        return out


class Spawner:
    """Queues arrivals per entry and releases them when the ramp start is clear."""

    def __init__(self, process: ArrivalProcess, layout: RoundaboutLayout, dt: float,
                 initial_speed: float = 10.0, headroom: float = 23.5, wheelbase: float = 2.7,
                 body_length: float = 4.5):
        self.process = process
        self.layout = layout
        self.dt = dt
        self.initial_speed = initial_speed
        self.headroom = headroom
        self.wheelbase = wheelbase
        self.body_length = body_length
        self.queues = [deque() for _ in range(layout.n_legs)]
        self.routes = {}

    def route(self, entry: int, exit: int) -> Route:
        key = (entry, exit)
        if key not in self.routes:
            self.routes[key] = Route(entry, exit, self.layout)
        return self.routes[key]

    @property
    def queued(self) -> int:
        return sum(len(q) for q in self.queues)

    def spawn(self, tick: int, clearance: dict[int, tuple[float, float]]) -> list[VehicleState]:
        """Draw this tick's arrivals and release queued vehicles.

        ``clearance[entry]`` is ``(distance, speed)`` of the rearmost vehicle on
        that entry ramp (absent when the ramp is empty).
        """
        for arr in self.process.draw(tick, self.dt):
            self.queues[arr.entry].append(arr)
        out = []
        for j, q in enumerate(self.queues):
            if not q:
                continue
            gap, v_lead = clearance.get(j, (math.inf, self.initial_speed))
            if gap < self.headroom:
                continue
            arr = q.popleft()
            r = self.route(j, arr.exit)
            pt = r.point(0.0)
            v0 = min(self.initial_speed, max(v_lead, 0.0) + 5.0)
            out.append(VehicleState(
                id=arr.id, x=pt.x, y=pt.y, theta=pt.theta, v=v0, wheelbase=self.wheelbase,
                category=arr.category, route=(j, arr.exit), entered_at=arr.t_arrival,
                progress=0.0, length=self.body_length))
        return out


def spawn(tick: int, spawner: Spawner, clearance=None) -> list[VehicleState]:
    return spawner.spawn(tick, clearance or {})


def pure_pursuit(state: VehicleState, route: Route, lookahead: float | None = None,
                 max_steer: float = 0.6) -> float:
    """Steering angle that tracks the route centre line."""
    ld = lookahead if lookahead is not None else max(6.0, 0.8 * state.v)
    tgt = route.point(min(state.progress + ld, route.length))
    alpha = wrap_angle(math.atan2(tgt.y - state.y, tgt.x - state.x) - state.theta)
    dist = max(math.hypot(tgt.x - state.x, tgt.y - state.y), 1e-6)
    steer = math.atan2(2.0 * state.wheelbase * math.sin(alpha), dist)
    return float(min(max(steer, -max_steer), max_steer))


@dataclass
class HdvParams:
    v_target: float = 15.0
    gain: float = 1.0  # 1/s
    a_max: float = 5.0
    reaction: float = 1.8  # s, spacing time gap
    standstill: float = 4.5  # m
    margin: float = 0.5
    dt: float = 0.1


def hdv_step(state: VehicleState, leaders=(), params: HdvParams | None = None,
             route: Route | None = None, tick: int = 0,
             lookahead: float | None = None) -> ControlInput:
    """Constant-speed human driver with a spacing floor.

    ``leaders`` holds ``(gap, leader_speed)`` pairs along the driver's path.
    The cruise command drives the speed to ``v_target``; whenever keeping it
    would break ``gap >= reaction * v + standstill`` the floor takes over.
    """
    p = params or HdvParams()
    if state.category is not Category.HDV:
        raise ValueError("hdv_step is only defined for human-driven vehicles")
    a = min(p.a_max, max(-p.a_max, p.gain * (p.v_target - state.v)))
    for gap, v_lead in leaders:
        gap_next = gap + (v_lead - state.v) * p.dt
        v_ok = (gap_next - p.standstill - p.margin) / p.reaction
        a = min(a, (v_ok - state.v) / p.dt)
    a = min(p.a_max, max(-p.a_max, a))
    steer = pure_pursuit(state, route, lookahead) if route is not None else 0.0
    return ControlInput(a, steer, tick)
