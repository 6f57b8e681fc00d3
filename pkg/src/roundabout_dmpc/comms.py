"""Simulated V2X layer: delayed per-link delivery, delay indicator and state fusion."""
from __future__ import annotations

import csv
import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlInput, VehicleState, linearize, step


class TopologyError(KeyError):
    pass


def delay_indicator(k_d: int, t_th: int) -> int:
    """1 if information aged ``k_d`` ticks is still within the threshold, else 0."""
    if k_d < 0:
        raise ValueError("delay must be non-negative")
    return 1 if k_d <= t_th else 0


def predict_state(s: VehicleState, u_prev: ControlInput, dt: float, v_min: float = 0.0,
                  v_max: float = 20.0) -> VehicleState:
    """One-step prediction with the most recent known input (nonlinear model)."""
    return step(s, u_prev, dt, v_min, v_max)


def predict_state_linear(s: VehicleState, u_prev: ControlInput, dt: float,
                         about: tuple[VehicleState, ControlInput] | None = None) -> np.ndarray:
    """One-step prediction with the linear model ``F s + G u`` around ``about``.

    ``about`` defaults to ``(s, zero input)``.  Returns the state array.
    """
    s_bar, u_bar = about if about is not None else (s, ControlInput(0.0, 0.0))
    F, G = linearize(s_bar, u_bar, dt)
    s_next_bar = step(s_bar, u_bar, dt).as_array()
    s_next_bar[2] = s_bar.theta + (s_next_bar[2] - s_bar.theta + np.pi) % (2 * np.pi) - np.pi
    ds = s.as_array() - s_bar.as_array()
    du = u_prev.as_array() - u_bar.as_array()
    return s_next_bar + F @ ds + G @ du


def fuse(delta: int, s_true, s_pred):
    """State used by the controller: fresh information when available, else prediction."""
    return s_true if delta == 1 else s_pred


def effective_input(delta: int, u_now, u_prev):
    return u_now if delta == 1 else u_prev


@dataclass(frozen=True)
class StateMessage:
    sender: int
    receiver: int
    state: VehicleState
    input: ControlInput
    sent_at: int
    deliver_at: int

    @property
    def delay(self) -> int:
        return self.deliver_at - self.sent_at


@dataclass
class DelayModel:
    """Integer delay in ticks: fixed ``lo`` when ``hi`` is None, else uniform on [lo, hi]."""

    lo: int = 1
    hi: int | None = 3

    def __post_init__(self):
        if self.lo < 0 or (self.hi is not None and self.hi < self.lo):
            raise ValueError(f"bad delay range [{self.lo}, {self.hi}]")

    @property
    def fixed(self) -> bool:
        return self.hi is None or self.hi == self.lo

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.fixed:
            return np.full(n, self.lo, dtype=np.int64)
        return rng.integers(self.lo, self.hi + 1, size=n)


class DelayChannel:
    """Per-link FIFO message delivery with stochastic integer delays.

    With ``complete=True`` every ordered pair of registered nodes is a link of
    weight 1; otherwise links are added explicitly with :meth:`add_link`.
    """

    def __init__(self, delay: DelayModel | None = None, t_th: int = 2, dt: float = 0.1,
                 seed: int = 0, window: int = 50, complete: bool = True,
                 record_trace: bool = False):
        self.delay = delay or DelayModel()
        self.t_th = t_th
        self.dt = dt
        self.window = window
        self.complete = complete
        self.rng = np.random.default_rng(seed)
        self._nodes: dict[int, bool] = {}  # node -> may send
        self._links: dict[int, dict[int, float]] = {}
        self._pending: dict[tuple[int, int], deque] = {}
        self._last_deliver: dict[tuple[int, int], int] = {}
        self._delays: deque = deque(maxlen=max(window, 100_000))
        self.trace: list[tuple[int, int, int, int, int]] | None = [] if record_trace else None

    # topology -----------------------------------------------------------
    def add_node(self, node: int, sender: bool = True):
        self._nodes[node] = sender
        self._links.setdefault(node, {})

    def remove_node(self, node: int):
        if node not in self._nodes:
            raise TopologyError(node)
        del self._nodes[node]
        self._links.pop(node, None)
        for out in self._links.values():
            out.pop(node, None)
        for key in [k for k in self._pending if node in k]:
            del self._pending[key]
            self._last_deliver.pop(key, None)

    def add_link(self, i: int, j: int, weight: float = 1.0):
        if i not in self._nodes or j not in self._nodes:
            raise TopologyError((i, j))
        if weight < 0:
            raise ValueError("link weights must be non-negative")
        self._links[i][j] = weight

    @property
    def nodes(self) -> list[int]:
        return sorted(self._nodes)

    def out_neighbors(self, i: int) -> list[int]:
        if i not in self._nodes:
            raise TopologyError(i)
        if self.complete:
            return [j for j in sorted(self._nodes) if j != i]
        return sorted(self._links[i])

    def weight(self, i: int, j: int) -> float:
        if self.complete:
            return 1.0 if i != j and i in self._nodes and j in self._nodes else 0.0
        return self._links.get(i, {}).get(j, 0.0)

    def is_connected(self) -> bool:
        """True if an undirected path joins every pair of nodes."""
        nodes = list(self._nodes)
        if len(nodes) <= 1:
            return True
        adj = {n: set() for n in nodes}
        for i in nodes:
            for j in self.out_neighbors(i):
                adj[i].add(j)
                adj[j].add(i)
        seen, stack = {nodes[0]}, [nodes[0]]
        while stack:
            for m in adj[stack.pop()]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return len(seen) == len(nodes)

    # traffic ------------------------------------------------------------
    def broadcast(self, sender: int, tick: int, state: VehicleState, u: ControlInput):
        receivers = self.out_neighbors(sender)
        if not receivers:
            return
        delays = self.delay.sample(self.rng, len(receivers))
        for j, d in zip(receivers, delays):
            key = (sender, j)
            deliver = max(tick + int(d), self._last_deliver.get(key, tick))
            self._last_deliver[key] = deliver
            self._pending.setdefault(key, deque()).append(
                StateMessage(sender, j, state, u, tick, deliver))

    def poll(self, receiver: int, tick: int) -> list[StateMessage]:
        if receiver not in self._nodes:
            raise TopologyError(receiver)
        out = []
        for i in sorted(self._nodes):
            q = self._pending.get((i, receiver))
            while q and q[0].deliver_at <= tick:
                msg = q.popleft()
                out.append(msg)
                self._delays.append(msg.delay)
                if self.trace is not None:
                    self.trace.append((tick, msg.sender, msg.receiver, msg.sent_at, msg.deliver_at))
        return out

    def mean_delay(self, window: int | None = None) -> float:
        """Mean delivery delay in seconds over the last ``window`` delivered messages."""
        w = self.window if window is None else window
        if not self._delays or w <= 0:
            return 0.0
        n = min(w, len(self._delays))
        tail = itertools.islice(self._delays, len(self._delays) - n, None)
        return float(sum(tail)) / n * self.dt

    def dump_trace(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["tick", "sender", "receiver", "sent_at", "deliver_at"])
            wr.writerows(self.trace or [])


@dataclass
class NeighborInfo:
    """What a receiver currently believes about one sender."""

    state: VehicleState
    input: ControlInput
    delta: int
    age: int


@dataclass
class FusedNeighborView:
    """Freshest delivered message per sender, with threshold-based extrapolation.

    When the freshest information is older than ``t_th`` ticks the stale state
    is chained forward one prediction step per excess tick using the last
    delivered input.  With ``compensate=False`` the raw message is returned.
    """

    t_th: int
    dt: float
    compensate: bool = True
    v_min: float = 0.0
    v_max: float = 20.0
    latest: dict[int, StateMessage] = field(default_factory=dict)

    def ingest(self, messages):
        for m in messages:
            cur = self.latest.get(m.sender)
            if cur is None or m.sent_at > cur.sent_at:
                self.latest[m.sender] = m

    def forget(self, sender: int):
        self.latest.pop(sender, None)

    def get(self, sender: int, tick: int) -> NeighborInfo | None:
        m = self.latest.get(sender)
        if m is None:
            return None
        age = tick - m.sent_at
        d = delay_indicator(age, self.t_th)
        if not self.compensate or d == 1:
            return NeighborInfo(m.state, m.input, d, age)
        s = m.state
        for _ in range(age - self.t_th):
            s = predict_state(s, m.input, self.dt, self.v_min, self.v_max)
        return NeighborInfo(s, m.input, d, age)
