"""Entry sequencing at a merge point.

A virtual platoon is the set of ring and ramp vehicles approaching one merge
point, laid out on that point's Z axis.  A sequence matrix ``C`` assigns each
vehicle (row) to a slot (column); slot 0 passes the merge point first.

Rows are grouped into streams (ring, ramp).  Inside a stream the precedence
rule applies between consecutive rows, so vehicles that share a lane keep
their order and only the interleaving of streams is a decision.  Without
stream labels every row belongs to one stream and only the identity survives.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

LOG = logging.getLogger(__name__)

N_CAP = 8
RING, RAMP = 0, 1


class SequenceError(ValueError):
    pass


@dataclass
class SequenceMatrix:
    """Binary assignment ``c[i, n] = 1`` iff vehicle row ``i`` takes slot ``n``."""

    c: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.int64)
        if self.c.ndim != 2 or self.c.shape[0] != self.c.shape[1]:
            raise SequenceError(f"sequence matrix must be square, got shape {self.c.shape}")

    @property
    def N(self) -> int:
        return self.c.shape[0]

    @classmethod
    def from_order(cls, order) -> "SequenceMatrix":
        """``order[n]`` is the row occupying slot ``n``."""
        n = len(order)
        c = np.zeros((n, n), dtype=np.int64)
        for slot, row in enumerate(order):
            c[row, slot] = 1
        return cls(c)

    @classmethod
    def identity(cls, n: int) -> "SequenceMatrix":
        return cls(np.eye(n, dtype=np.int64))

    def order(self) -> list[int]:
        """Row index per slot; only meaningful for permutation matrices."""
        return [int(np.argmax(self.c[:, n])) for n in range(self.N)]

    def slot_of(self, row: int) -> int:
        return int(np.argmax(self.c[row]))


def is_feasible(C: SequenceMatrix | np.ndarray, streams=None, precedence=()) -> bool:
    """Assignment and precedence constraints.

    ``streams`` labels each row; the precedence rule is applied between each row
    and the previous row carrying the same label.  ``precedence`` holds extra
    ``(a, b)`` row pairs where ``a`` must take an earlier slot than ``b``.
    """
    c = C.c if isinstance(C, SequenceMatrix) else np.asarray(C)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise SequenceError(f"sequence matrix must be square, got shape {c.shape}")
    if not np.all((c == 0) | (c == 1)):
        return False
    if not (np.all(c.sum(axis=1) == 1) and np.all(c.sum(axis=0) == 1)):
        return False
    n = c.shape[0]
    labels = [0] * n if streams is None else list(streams)
    if len(labels) != n:
        raise SequenceError("one stream label per row required")
    prev: dict = {}
    for i in range(n):
        p = prev.get(labels[i])
        if p is not None:
            for slot in range(n):
                # c[i, n] <= 1 - sum_{l > n} c[p, l]
                if c[i, slot] > 1 - c[p, slot + 1:].sum():
                    return False
        prev[labels[i]] = i
    slot = c.argmax(axis=1)
    return all(slot[a] < slot[b] for a, b in precedence)


@dataclass(frozen=True)
class SequenceObjectiveWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.5
    alpha4: float = 10.0
    B: float = 1.0
    M: float = 1.0
    # compare (dd - dd*) once more against dd*, as the indicator rule is printed
    subtract_twice: bool = True

    def __post_init__(self):
        vals = (self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.B, self.M)
        if any(v < 0 for v in vals):
            raise SequenceError("objective weights must be non-negative")
        if not any(v > 0 for v in vals[:4]):
            raise SequenceError("at least one objective weight must be positive")


@dataclass
class PlatoonSnapshot:
    """Delayed observations of one virtual platoon plus the density context.

    Per row: ``z`` (Z-axis position, negative upstream), ``v`` (speed),
    ``stream`` (RING or RAMP).  ``d_after`` is the remaining route length
    past the merge point.  ``segment`` is the ring segment a ramp vehicle
    joins when it merges; ``n0`` and ``seg_lengths`` describe all segments.
    """

    ids: tuple[int, ...]
    z: np.ndarray
    v: np.ndarray
    stream: tuple[int, ...] | None = None
    dd_star: float | np.ndarray = 10.0
    v_ref: float = 15.0
    v_floor: float | np.ndarray = 2.0  # expected speed never drops below this
    d_after: np.ndarray | None = None
    seg_lengths: np.ndarray = field(default_factory=lambda: np.array([60.0]))
    n0: np.ndarray = field(default_factory=lambda: np.array([0.0]))
    segment: int = 0
    entry_window: float = 2.0
    precedence: tuple[tuple[int, int], ...] = ()  # row pairs (earlier, later)
    prefix: tuple[int, ...] = ()  # rows frozen into the leading slots, in order
    x: np.ndarray | None = None  # raw delayed planar position, informational
    y: np.ndarray | None = None

    def __post_init__(self):
        self.ids = tuple(int(i) for i in self.ids)
        n = len(self.ids)
        self.z = np.asarray(self.z, dtype=float).reshape(n)
        self.v = np.asarray(self.v, dtype=float).reshape(n)
        if self.stream is None:
            self.stream = (RING,) * n
        self.stream = tuple(int(s) for s in self.stream)
        if len(self.stream) != n:
            raise SequenceError("one stream label per vehicle required")
        dd = np.broadcast_to(np.asarray(self.dd_star, dtype=float), (max(n, 1),))
        if np.any(dd <= 0):
            raise SequenceError("desired spacing must be positive")
        self.dd_star = np.array(dd)
        self.v_floor = np.broadcast_to(np.asarray(self.v_floor, dtype=float), (n,)).copy()
        if np.any(self.v_floor <= 0):
            raise SequenceError("expected speed floor must be positive")
        self.d_after = (np.zeros(n) if self.d_after is None
                        else np.asarray(self.d_after, dtype=float).reshape(n))
        self.seg_lengths = np.asarray(self.seg_lengths, dtype=float)
        self.n0 = np.asarray(self.n0, dtype=float)
        if np.any(self.seg_lengths <= 0):
            raise SequenceError("segment lengths must be positive")
        if self.n0.shape != self.seg_lengths.shape:
            raise SequenceError("n0 and seg_lengths must align")

    @property
    def N(self) -> int:
        return len(self.ids)

    def t_free(self) -> np.ndarray:
        """Unhindered time to the merge point at the current speed, floored at ``v_floor``."""
        dist = np.maximum(-self.z, 0.0)
        return dist / np.maximum(self.v, self.v_floor)


@dataclass(frozen=True)
class TravelTime:
    t_entry_merge: float
    t_delay: float
    t_merge_exit: float

    @property
    def t_travel(self) -> float:
        return self.t_entry_merge + self.t_delay + self.t_merge_exit


def spacing_deviation(C: SequenceMatrix, snap: PlatoonSnapshot, i: int) -> float:
    """Deviation of the gap between slots ``i`` and ``i + 1`` (0-based) from Δd*."""
    if not 0 <= i < snap.N - 1:
        raise SequenceError(f"slot {i} has no successor in a platoon of {snap.N}")
    zi = float(C.c[:, i] @ snap.z)
    zn = float(C.c[:, i + 1] @ snap.z)
    return zi - zn - float(snap.dd_star[i + 1])


def _sign_indicator(term: float) -> int:
    # (Y1, Y2) = (1, 0) below zero, (0, 1) above, (0, 0) at zero; returns Y1 - Y2
    if term < 0.0:
        return 1
    if term > 0.0:
        return -1
    return 0


def deviation_indicators(dd, v_slots, dd_star=None, subtract_twice: bool = False):
    """Indicator arrays ``(Y_dd, Y_v, chi)`` for slot-ordered inputs.

    ``dd`` holds the spacing deviations per adjacent slot pair and ``v_slots``
    the speeds in slot order.  With ``subtract_twice`` the desired spacing is
    subtracted again before taking the sign.
    """
    dd = np.asarray(dd, dtype=float)
    v_slots = np.asarray(v_slots, dtype=float)
    if len(v_slots) != len(dd) + 1:
        raise SequenceError("need one more slot speed than spacing deviations")
    if subtract_twice:
        star = np.broadcast_to(np.asarray(dd_star, dtype=float), dd.shape)
        terms = dd - star
    else:
        terms = dd
    y_dd = np.array([_sign_indicator(t) for t in terms], dtype=np.int64)
    y_v = np.array([_sign_indicator(t) for t in np.diff(v_slots)], dtype=np.int64)
    return y_dd, y_v, y_dd - y_v


def _schedule(order, snap: PlatoonSnapshot) -> np.ndarray:
    """Merge time per row: queue recursion with one headway Δd*/v_ref per slot."""
    tf = snap.t_free()
    T = np.zeros(snap.N)
    prev = -math.inf
    for slot, row in enumerate(order):
        head = snap.dd_star[slot] / snap.v_ref
        T[row] = max(tf[row], prev + head)
        prev = T[row]
    return T


def travel_time_estimate(row: int, C: SequenceMatrix, snap: PlatoonSnapshot) -> TravelTime:
    """Phase estimate for one vehicle under assignment ``C``.

    The approach phase is distance over current speed, the exit phase is the
    remaining distance at ``v_ref`` and the wait follows from the slot queue:
    every slot ahead imposes at least Δd*/v_ref seconds of headway.
    """
    if snap.z[row] >= 0.0:
        return TravelTime(0.0, 0.0, float(snap.d_after[row]) / snap.v_ref)
    tf = snap.t_free()
    T = _schedule(C.order(), snap)
    return TravelTime(float(tf[row]), float(T[row] - tf[row]),
                      float(snap.d_after[row]) / snap.v_ref)


def density_terms(n_counts, seg_lengths):
    """``(rho, rho_bar, psi)`` for segment counts and lengths."""
    n_counts = np.asarray(n_counts, dtype=float)
    L = np.asarray(seg_lengths, dtype=float)
    if np.any(L <= 0):
        raise SequenceError("segment lengths must be positive")
    rho = n_counts / L
    rho_bar = float(n_counts.sum() / L.sum())
    return rho, rho_bar, np.abs(rho - rho_bar)


def entry_flags(order, snap: PlatoonSnapshot) -> np.ndarray:
    """1 for ramp rows scheduled to merge inside the entry window."""
    T = _schedule(order, snap)
    return np.array([1 if snap.stream[r] == RAMP and T[r] <= snap.entry_window else 0
                     for r in range(snap.N)], dtype=np.int64)


def segment_counts(order, snap: PlatoonSnapshot) -> np.ndarray:
    n = snap.n0.copy()
    n[snap.segment] += entry_flags(order, snap).sum()
    return n


@dataclass(frozen=True)
class ObjectiveTerms:
    spacing: float
    coupled: float
    travel: float
    density: float

    @property
    def total(self) -> float:
        return self.spacing + self.coupled + self.travel + self.density


def _pair_terms(a: int, b: int, slot: int, snap: PlatoonSnapshot, w: SequenceObjectiveWeights):
    """Spacing and coupled indicator costs for rows ``a`` (slot) and ``b`` (slot + 1)."""
    dd = snap.z[a] - snap.z[b] - snap.dd_star[slot + 1]
    term = dd - snap.dd_star[slot + 1] if w.subtract_twice else dd
    y_dd = _sign_indicator(term)
    y_v = _sign_indicator(snap.v[b] - snap.v[a])
    chi = y_dd - y_v
    return w.alpha1 * w.B * y_dd * y_dd, w.alpha2 * w.M * chi * chi


def _base_travel(snap: PlatoonSnapshot) -> np.ndarray:
    return snap.t_free() + snap.d_after / snap.v_ref


def objective_terms(order, snap: PlatoonSnapshot, w: SequenceObjectiveWeights) -> ObjectiveTerms:
    sp = cp = 0.0
    for n in range(len(order) - 1):
        s, c = _pair_terms(order[n], order[n + 1], n, snap, w)
        sp += s
        cp += c
    tf = snap.t_free()
    T = _schedule(order, snap)
    travel = _base_travel(snap) + (T - tf)
    tr = w.alpha3 * float(travel.sum()) / snap.N if snap.N else 0.0
    dens = 0.0
    if w.alpha4 > 0:
        _, _, psi = density_terms(segment_counts(order, snap), snap.seg_lengths)
        dens = w.alpha4 * float(psi.sum())
    return ObjectiveTerms(sp, cp, tr, dens)


def objective(C: SequenceMatrix, snap: PlatoonSnapshot, w: SequenceObjectiveWeights | None = None,
              check: bool = True) -> float:
    w = w or SequenceObjectiveWeights()
    if C.N != snap.N:
        raise SequenceError("matrix size does not match the platoon")
    if check and not is_feasible(C, snap.stream, snap.precedence):
        raise SequenceError("infeasible sequence matrix")
    return objective_terms(C.order(), snap, w).total


@dataclass
class SequenceResult:
    matrix: SequenceMatrix
    order: list[int]  # vehicle ids, slot order
    cost: float
    nodes: int
    degraded: bool = False


def _greedy(snap: PlatoonSnapshot) -> list[int]:
    """Nearest-first order that respects the frozen prefix and precedence pairs."""
    rows = list(snap.prefix)
    rest = sorted((r for r in range(snap.N) if r not in rows),
                  key=lambda r: (-snap.z[r], snap.ids[r]))
    before = {b: set() for b in range(snap.N)}
    for a, b in snap.precedence:
        before[b].add(a)
    placed = set(rows)
    while rest:
        for r in rest:
            if before[r] <= placed:
                break
        else:
            r = rest[0]  # cyclic pins, fall back to pure distance order
        rest.remove(r)
        rows.append(r)
        placed.add(r)
    return rows


def solve_sequence(snap: PlatoonSnapshot, w: SequenceObjectiveWeights | None = None,
                   n_cap: int = N_CAP, tol: float = 1e-9) -> SequenceResult:
    """Exact minimum of :func:`objective` by depth-first branch-and-bound.

    Slots are filled front to back and candidates tried in ascending vehicle id,
    so the first optimum found is the lexicographically smallest; later ties
    never replace it.  The bound is the committed pair and travel cost plus the
    free-flow travel of unassigned vehicles.
    """
    w = w or SequenceObjectiveWeights()
    N = snap.N
    if N == 0:
        raise SequenceError("empty platoon")
    if N > n_cap:
        order = _greedy(snap)
        cost = objective_terms(order, snap, w).total
        return SequenceResult(SequenceMatrix.from_order(order), [snap.ids[r] for r in order],
                              cost, 0, degraded=True)

    tf = snap.t_free()
    base = _base_travel(snap)
    scale = w.alpha3 / N
    by_id = sorted(range(N), key=lambda r: snap.ids[r])
    prev_in_stream = [-1] * N
    last: dict = {}
    for r in range(N):
        prev_in_stream[r] = last.get(snap.stream[r], -1)
        last[snap.stream[r]] = r
    must_before = [[] for _ in range(N)]
    for a, b in snap.precedence:
        must_before[b].append(a)
    prefix = list(snap.prefix)

    best_cost = math.inf
    best_order: list[int] | None = None
    nodes = 0
    used = [False] * N
    order: list[int] = []

    def dfs(committed: float, rest_base: float, t_prev: float):
        nonlocal best_cost, best_order, nodes
        nodes += 1
        depth = len(order)
        if depth == N:
            total = committed
            if w.alpha4 > 0:
                _, _, psi = density_terms(segment_counts(order, snap), snap.seg_lengths)
                total += w.alpha4 * float(psi.sum())
            if total < best_cost - tol:
                best_cost = total
                best_order = list(order)
            return
        if depth < len(prefix):
            cands = [prefix[depth]]
        else:
            cands = by_id
        for r in cands:
            if used[r]:
                continue
            p = prev_in_stream[r]
            if p >= 0 and not used[p]:
                continue
            if any(not used[a] for a in must_before[r]):
                continue
            T = max(tf[r], t_prev + snap.dd_star[depth] / snap.v_ref)
            inc = scale * (base[r] + T - tf[r])
            if depth > 0:
                s, c = _pair_terms(order[-1], r, depth - 1, snap, w)
                inc += s + c
            nb = rest_base - scale * base[r]
            bound = committed + inc + nb
            if bound >= best_cost - tol:
                continue
            used[r] = True
            order.append(r)
            dfs(committed + inc, nb, T)
            order.pop()
            used[r] = False

    dfs(0.0, scale * float(base.sum()), -math.inf)
    if best_order is None:
        raise SequenceError("no feasible sequence (conflicting precedence pins)")
    res = SequenceResult(SequenceMatrix.from_order(best_order),
                         [snap.ids[r] for r in best_order], best_cost, nodes)
    LOG.debug("sequence ids=%s order=%s cost=%.6g nodes=%d", snap.ids, res.order, res.cost,
              res.nodes)
    return res
