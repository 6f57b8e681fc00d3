"""Closed-loop roundabout simulation.

Per tick: (1) V2X delivery and fusion, (2) merge-point sequencing, (3)
neighbour identification and control, (4) dynamics, exits, spawns and
bookkeeping.  Vehicles are always visited in ascending id order.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dmpc
from .comms import DelayChannel, DelayModel, FusedNeighborView
from .config import ScenarioConfig
from .dynamics import Category, ControlInput, VehicleState, step
from .geometry import RoundaboutLayout, Route, annulus_bounds, radial_distance
from .metrics import PetEvent, SimReport, VehicleRecord, pet_events
from .sequencer import (RAMP, RING, PlatoonSnapshot, SequenceError, SequenceObjectiveWeights,
                        density_terms, solve_sequence)
from .traffic import ArrivalProcess, HdvParams, Spawner, hdv_step, in_conflict, ttc

LOG = logging.getLogger(__name__)


class ControllerVariant(str, enum.Enum):
    M1 = "M1"  # two-layer: local sequencing, no delay handling
    M2 = "M2"  # sequencing with the full objective and delay compensation
    M3 = "M3"  # plain distributed MPC, first come first served

    @property
    def sequencing(self) -> bool:
        return self is not ControllerVariant.M3

    @property
    def compensation(self) -> bool:
        return self is ControllerVariant.M2

    @property
    def global_objective(self) -> bool:
        return self is ControllerVariant.M2


@dataclass
class SimulationClock:
    dt: float = 0.1
    K: int = 20000
    k: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.K < 0:
            raise ValueError("dt must be positive and K non-negative")

    @property
    def t(self) -> float:
        return self.k * self.dt

    @property
    def done(self) -> bool:
        return self.k >= self.K

    def advance(self):
        if self.k >= self.K:
            raise RuntimeError("clock already at its horizon")
        self.k += 1


class CollisionAbort(RuntimeError):
    pass


@dataclass
class _Vehicle:
    state: VehicleState
    route: Route
    record: VehicleRecord
    u: ControlInput = field(default_factory=ControlInput)
    plan: dmpc.ControlPlan | None = None
    view: FusedNeighborView | None = None
    zone: dict = field(default_factory=dict)  # merge id -> [t_in, t_out]

    @property
    def id(self) -> int:
        return self.state.id

    @property
    def cav(self) -> bool:
        return self.state.category is Category.CAV


@dataclass
class _Belief:
    """What an observer takes to be true about one other vehicle."""

    id: int
    route: Route
    progress: float
    v: float
    a: float
    cav: bool


def _node(mid: int) -> int:
    return -1 - mid


class Simulation:
    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        L = cfg.layout
        self.layout = RoundaboutLayout(ring_radius=L.ring_radius, lane_width=L.lane_width,
                                       n_legs=L.n_legs, ramp_length=L.ramp_length,
                                       exit_ramp_length=L.exit_ramp_length,
                                       exit_offset=L.exit_offset)
        self.variant = ControllerVariant(cfg.controller.variant.upper())
        self.clock = SimulationClock(cfg.sim.dt, cfg.sim.K)
        seeds = np.random.SeedSequence(cfg.sim.seed).spawn(2)
        t = cfg.traffic
        self.process = ArrivalProcess(tuple(t.rates), t.penetration,
                                      int(seeds[0].generate_state(1)[0]), t.allow_u_turn,
                                      t.exit_demand, t.max_vehicles)
        self.spawner = Spawner(self.process, self.layout, cfg.sim.dt, t.initial_speed,
                               t.headroom)
        c = cfg.comms
        self.channel = DelayChannel(DelayModel(c.delay_lo, c.delay_hi), c.t_th, cfg.sim.dt,
                                    int(seeds[1].generate_state(1)[0]), c.window)
        self.compensate = self.variant.compensation
        self.merge_views = {}
        for mp in self.layout.merge_points:
            self.channel.add_node(_node(mp.id), sender=False)
            self.merge_views[mp.id] = self._new_view()
        th, b, k = cfg.thresholds, cfg.bounds, cfg.controller
        self.params = dmpc.DmpcParams(
            horizon=k.horizon, R=np.diag(k.R), Q=np.diag(k.Q), lam=k.lam, sigma=th.sigma,
            varrho=th.varrho, d_min=th.d_min, t_h=th.t_h, a_max=b.a_max,
            steer_max=b.steer_max, v_min=b.v_min, v_max=b.v_max, margin=th.margin,
            method=k.method, max_iter=k.max_iter)
        h = cfg.hdv
        self.hdv_params = HdvParams(h.v_target, h.gain, b.a_max, h.reaction, h.standstill,
                                    th.margin, cfg.sim.dt)
        local = not self.variant.global_objective
        self.seq_weights = SequenceObjectiveWeights(
            k.alpha1, k.alpha2, 0.0 if local else k.alpha3, 0.0 if local else k.alpha4, k.B, k.M,
            k.subtract_twice)
        self.vehicles: dict[int, _Vehicle] = {}
        self.records: list[VehicleRecord] = []
        self.passages = {mp.id: [] for mp in self.layout.merge_points}
        self.density: list[tuple[int, int, float]] = []
        self.orders: dict[int, list[int]] = {mp.id: [] for mp in self.layout.merge_points}
        self.members: dict[int, set] = {mp.id: set() for mp in self.layout.merge_points}
        self.last_solve = {mp.id: -10 ** 9 for mp in self.layout.merge_points}
        self.seq_log: list[dict] = []
        self.sequencer_calls = 0
        self.degraded = 0
        self.events: list[tuple[int, str]] = []
        self.collision: dict | None = None
        self.min_spacing_residual = math.inf
        self.annulus_violation = 0.0
        self.completed = 0
        lo, hi = annulus_bounds(self.layout)
        self._annulus = (lo, hi)
        self._s_entry = [mp.s_arc for mp in self.layout.merge_points]

    def _new_view(self):
        b = self.cfg.bounds
        return FusedNeighborView(self.cfg.comms.t_th, self.cfg.sim.dt, self.compensate,
                                 b.v_min, b.v_max)

    def _event(self, name):
        if self.cfg.sim.trace:
            self.events.append((self.clock.k, name))

    # geometry helpers -------------------------------------------------------
    def _pos_on(self, ego: Route, other: Route, p: float):
        """Position of a point of ``other`` at progress ``p`` along ``ego``'s path, if shared."""
        if p < other.ramp_length:
            return p if other.entry == ego.entry else None
        if p < other.ring_end:
            q = (other.ring_arc(p) - self._s_entry[ego.entry]) % self.layout.circumference
            return ego.ramp_length + q if q < ego.ring_length else None
        if other.exit == ego.exit:
            return ego.ring_end + (p - other.ring_end)
        return None

    def _z(self, route: Route, p: float, mid: int):
        off = route.merge_offset(mid)
        if off is None:
            return None
        return p - route.ramp_length - off

    @staticmethod
    def _lane(route: Route, p: float):
        piece = route.piece(p)
        if piece == "entry":
            return ("entry", route.entry)
        if piece == "ring":
            return ("ring", 0)
        return ("exit", route.exit)

    # step 1 -------------------------------------------------------------------
    def _communicate(self, k: int):
        if not self.cfg.comms.fusion:
            return
        for vid in sorted(self.vehicles):
            v = self.vehicles[vid]
            if v.cav:
                self.channel.broadcast(vid, k, v.state, v.u)
        for vid in sorted(self.vehicles):
            v = self.vehicles[vid]
            if v.cav:
                v.view.ingest(self.channel.poll(vid, k))
        for mid, view in self.merge_views.items():
            view.ingest(self.channel.poll(_node(mid), k))

    def _tau_bar(self) -> float:
        if not self.compensate or not self.cfg.comms.fusion:
            return 0.0
        return self.channel.mean_delay()

    def _believe(self, view: FusedNeighborView | None, other: _Vehicle, k: int) -> _Belief:
        """Delayed/fused estimate for CAVs, direct observation for HDVs."""
        if other.cav and view is not None:
            info = view.get(other.id, k)
            if info is not None:
                s = info.state
                return _Belief(other.id, other.route, s.progress, s.v, info.input.a, True)
        s = other.state
        return _Belief(other.id, other.route, s.progress, s.v, other.u.a, other.cav)

    def _beliefs(self, view, k: int, exclude=None) -> list[_Belief]:
        return [self._believe(view, o, k) for oid, o in sorted(self.vehicles.items())
                if oid != exclude]

    # step 2 -------------------------------------------------------------------
    def _platoon(self, mid: int, beliefs: list[_Belief], true_z: dict):
        R = self.cfg.thresholds.coordination_radius
        rows = []
        for b in beliefs:
            z = self._z(b.route, b.progress, mid)
            zt = true_z.get((b.id, mid))
            if z is None or zt is None or not (-R <= zt < 0.0):
                continue
            p_true = self.vehicles[b.id].state.progress
            stream = RAMP if (b.route.entry == mid and p_true < b.route.ramp_length) else RING
            rows.append((stream, -zt, b.id, z, b))
        rows.sort(key=lambda r: (r[0], r[1], r[2]))
        return rows

    def _sequence(self, k: int):
        if not self.variant.sequencing:
            return
        ctl = self.cfg.controller
        th = self.cfg.thresholds
        view = self.merge_views
        counts = self._segment_counts()
        seg_len = np.asarray(self.layout.segment_lengths)
        true_z = self._true_z()
        for mp in self.layout.merge_points:
            mid = mp.id
            beliefs = self._beliefs(view[mid] if self.cfg.comms.fusion else None, k)
            rows = self._platoon(mid, beliefs, true_z)
            ids = [r[2] for r in rows]
            current = set(ids)
            new = bool(current - self.members[mid])
            self.members[mid] = current
            self.orders[mid] = [i for i in self.orders[mid] if i in current]
            if not rows:
                continue
            if not new and k - self.last_solve[mid] < ctl.resequence_every:
                continue
            zt = {i: true_z[(i, mid)] for i in ids}
            index = {i: n for n, i in enumerate(ids)}
            pins = []
            for a in ids:
                if self.vehicles[a].cav:
                    continue
                for b in ids:
                    if b != a:
                        pins.append((index[a], index[b]) if zt[a] > zt[b] or (
                            zt[a] == zt[b] and a < b) else (index[b], index[a]))
            rho, _, _ = density_terms(counts, seg_len)
            gate = []
            if rho[mid] >= th.rho_max:
                ring = [index[i] for i, r in zip(ids, rows) if r[0] == RING]
                ramp = [index[i] for i, r in zip(ids, rows) if r[0] == RAMP]
                gate = [(a, b) for a in ring for b in ramp]
            prefix = tuple(index[i] for i in self.orders[mid]
                           if zt[i] > -ctl.freeze_distance)
            route_rest = []
            for r in rows:
                b = r[4]
                off = b.route.merge_offset(mid)
                route_rest.append(b.route.length - b.route.ramp_length - off)
            attempts = [(tuple(pins + gate), prefix), (tuple(pins), prefix), (tuple(pins), ())]
            res = None
            for prec, pre in attempts:
                snap = PlatoonSnapshot(
                    ids=tuple(ids), z=[r[3] for r in rows], v=[r[4].v for r in rows],
                    stream=tuple(r[0] for r in rows), dd_star=th.desired_spacing,
                    v_ref=ctl.v_ring, d_after=route_rest,
                    v_floor=[ctl.v_ramp if r[0] == RAMP else ctl.v_ring for r in rows], seg_lengths=seg_len,
                    n0=counts.astype(float), segment=mid, precedence=prec, prefix=pre)
                try:
                    res = solve_sequence(snap, self.seq_weights, n_cap=ctl.n_cap)
                    break
                except SequenceError:
                    continue
            self.sequencer_calls += 1
            if res is None:
                res_order = sorted(ids, key=lambda i: (-zt[i], i))
                cost, nodes, degraded = math.nan, 0, True
            else:
                res_order, cost, nodes, degraded = res.order, res.cost, res.nodes, res.degraded
            self.orders[mid] = list(res_order)
            self.last_solve[mid] = k
            self.seq_log.append({"tick": k, "merge_point": mid, "ids": ids, "order": res_order,
                                 "objective": cost, "nodes": nodes, "degraded": degraded})
            LOG.debug("tick %d mp %d order %s cost %.4g nodes %d", k, mid, res_order, cost,
                      nodes)

    def _true_z(self) -> dict:
        out = {}
        for vid, v in self.vehicles.items():
            for mp in self.layout.merge_points:
                z = self._z(v.route, v.state.progress, mp.id)
                if z is not None:
                    out[(vid, mp.id)] = z
        return out

    def _segment_counts(self) -> np.ndarray:
        n = np.zeros(self.layout.n_legs)
        for v in self.vehicles.values():
            p = v.state.progress
            if v.route.piece(p) == "ring":
                n[self.layout.segment_of(v.route.ring_arc(p))] += 1
        return n

    # step 3 -------------------------------------------------------------------
    def _neighbors(self, ego: _Vehicle, beliefs: list[_Belief], true_z: dict, k: int):
        """Leaders and TTC-conflicting followers of ``ego`` as (gap, belief, physical)."""
        R = self.cfg.thresholds.coordination_radius
        p_e = ego.state.progress
        best = {}

        def offer(gap, b, physical):
            cur = best.get(b.id)
            if cur is None or gap < cur[0]:
                best[b.id] = (gap, b, physical)

        path_lead = None
        for b in beliefs:
            pos = self._pos_on(ego.route, b.route, b.progress)
            if pos is not None and pos > p_e:
                if path_lead is None or pos - p_e < path_lead[0]:
                    path_lead = (pos - p_e, b)
        if path_lead is not None:
            offer(path_lead[0], path_lead[1], True)
        followers = []
        for mp in self.layout.merge_points:
            mid = mp.id
            z_e = true_z.get((ego.id, mid))
            if z_e is None or not (-R <= z_e < 0.0):
                continue
            ego_ramp = ego.route.entry == mid and p_e < ego.route.ramp_length
            ahead, behind = [], []
            for b in beliefs:
                zt = true_z.get((b.id, mid))
                if zt is None or not (-R <= zt < 0.0):
                    continue
                z = self._z(b.route, b.progress, mid)
                ramp = (b.route.entry == mid
                        and self.vehicles[b.id].state.progress < b.route.ramp_length)
                entry = (z - z_e, b, ramp != ego_ramp)
                (ahead if zt > z_e or (zt == z_e and b.id < ego.id) else behind).append(entry)
            if ego.cav and self.variant.sequencing:
                order = self.orders[mid]
                if ego.id in order:
                    pos = order.index(ego.id)
                    lookup = {e[1].id: e for e in ahead + behind}
                    for j in range(pos - 1, -1, -1):
                        if order[j] in lookup:
                            e = lookup[order[j]]
                            offer(e[0], e[1], False)
                            break
                hdv_ahead = [e for e in ahead if not e[1].cav]
                if hdv_ahead:
                    e = min(hdv_ahead, key=lambda e: (e[0], e[1].id))
                    offer(e[0], e[1], False)
            else:
                # first come first served on the shared axis
                cross = [e for e in ahead if e[2]] if ego.cav else ahead
                if cross:
                    e = min(cross, key=lambda e: (e[0], e[1].id))
                    offer(e[0], e[1], False)
            if ego.cav:
                cross_behind = [e for e in behind if e[2]]
                if cross_behind:
                    e = max(cross_behind, key=lambda e: (e[0], -e[1].id))
                    b = e[1]
                    d_fol = -self._z(b.route, b.progress, mid)
                    t = ttc(max(d_fol, 0.0), max(-z_e, 0.0), b.v, ego.state.v)
                    if in_conflict(t, self.cfg.thresholds.ttc_th):
                        followers.append((-e[0], b))
        leaders = [best[i] for i in sorted(best)]
        return leaders, followers

    def _control_cav(self, ego: _Vehicle, k: int, true_z: dict, tau_bar: float) -> ControlInput:
        view = ego.view if self.cfg.comms.fusion else None
        beliefs = self._beliefs(view, k, exclude=ego.id)
        leaders, followers = self._neighbors(ego, beliefs, true_z, k)
        ctl = self.cfg.controller
        sref, mask, kap = dmpc.reference(ego.route, ego.state.progress, ctl.horizon,
                                         self.cfg.sim.dt, ctl.v_ramp, ctl.v_ring,
                                         v0=ego.state.v, a_comf=ctl.a_comf)
        prob = dmpc.DmpcProblem(
            ego.state, sref, self.cfg.sim.dt,
            leaders=[dmpc.Neighbor(b.id, g, b.v, b.a, phys) for g, b, phys in leaders],
            followers=[dmpc.Neighbor(b.id, g, b.v, b.a, False) for g, b in followers],
            tau_bar=tau_bar, ring_mask=mask, curvature=kap, layout=self.layout,
            params=self.params)
        plan = dmpc.solve(prob, ego.plan.shifted() if ego.plan is not None else None)
        if plan.degraded:
            self.degraded += 1
        ego.plan = plan
        return plan.first_input(k)

    def _control_hdv(self, ego: _Vehicle, k: int, true_z: dict) -> ControlInput:
        beliefs = self._beliefs(None, k, exclude=ego.id)
        leaders, _ = self._neighbors(ego, beliefs, true_z, k)
        pairs = [(g, b.v) for g, b, _ in leaders]
        return hdv_step(ego.state, pairs, self.hdv_params, ego.route, k,
                        lookahead=self.cfg.hdv.lookahead)

    # step 4 -------------------------------------------------------------------
    def _advance(self, k: int, inputs: dict[int, ControlInput]):
        dt = self.cfg.sim.dt
        b = self.cfg.bounds
        hw = self.cfg.thresholds.zone_half_width
        t0 = k * dt
        done = []
        for vid in sorted(self.vehicles):
            v = self.vehicles[vid]
            u = inputs[vid]
            p_old = v.state.progress
            nxt = step(v.state, u, dt, b.v_min, b.v_max)
            p_new = v.route.project(nxt.x, nxt.y, p_old + dt * v.state.v)
            p_new = max(p_new, p_old)
            v.state = replace(nxt, progress=p_new)
            v.u = u
            v.record.accel.append(u.a)
            for mp in self.layout.merge_points:
                z0 = self._z(v.route, p_old, mp.id)
                if z0 is None:
                    continue
                z1 = z0 + (p_new - p_old)
                zone = v.zone.setdefault(mp.id, [None, None, False])
                for idx, edge in ((0, -hw), (1, hw)):
                    if zone[idx] is None and z0 < edge <= z1:
                        zone[idx] = t0 + dt * (edge - z0) / (z1 - z0)
                if zone[1] is not None and not zone[2]:
                    approach = 1 if v.route.entry == mp.id else 0
                    t_in = zone[0] if zone[0] is not None else zone[1]
                    self.passages[mp.id].append(
                        (vid, approach, t_in, zone[1], v.state.category.value))
                    zone[2] = True
            if p_new >= v.route.length:
                frac = (v.route.length - p_old) / max(p_new - p_old, 1e-12)
                v.record.t_exit = t0 + dt * min(max(frac, 0.0), 1.0)
                done.append(vid)
        for vid in done:
            self._despawn(vid)

    def _despawn(self, vid: int):
        v = self.vehicles.pop(vid)
        if v.cav and self.cfg.comms.fusion:
            self.channel.remove_node(vid)
        for o in self.vehicles.values():
            if o.view is not None:
                o.view.forget(vid)
        for mid in self.orders:
            if vid in self.orders[mid]:
                self.orders[mid].remove(vid)
            self.members[mid].discard(vid)
            self.merge_views[mid].forget(vid)
        self.completed += 1

    def _check_safety(self, k: int):
        """Collision abort plus bookkeeping of realised spacing and ring position."""
        th = self.cfg.thresholds
        items = sorted(self.vehicles.items())
        true_z = self._true_z()
        for vid, v in items:
            p = v.state.progress
            lane = self._lane(v.route, p)
            lead_gap, lead_same = math.inf, False
            for oid, o in items:
                if oid == vid:
                    continue
                pos = self._pos_on(v.route, o.route, o.state.progress)
                if pos is None or pos < p or (pos == p and oid > vid):
                    continue
                gap = pos - p
                if gap < lead_gap:
                    lead_gap = gap
                    lead_same = self._lane(o.route, o.state.progress) == lane
            if lead_gap < th.collision_gap:
                return {"tick": k, "vehicle": vid, "gap": lead_gap}
            if v.cav and lead_same and math.isfinite(lead_gap):
                res = lead_gap - (th.sigma * v.state.v + th.varrho)
                self.min_spacing_residual = min(self.min_spacing_residual, res)
            if lane[0] == "ring":
                r = radial_distance(v.state.x, v.state.y, self.layout)
                lo, hi = self._annulus
                self.annulus_violation = max(self.annulus_violation, lo - r, r - hi)
        # side-by-side at a merge point: both inside the zone on different lanes
        for mp in self.layout.merge_points:
            near = []
            for vid, v in items:
                z = true_z.get((vid, mp.id))
                if z is not None and -th.zone_half_width <= z < 0.0:
                    near.append((z, vid, self._lane(v.route, v.state.progress)))
            for i in range(len(near)):
                for j in range(i + 1, len(near)):
                    a, b = near[i], near[j]
                    if a[2] != b[2] and abs(a[0] - b[0]) < th.collision_gap:
                        return {"tick": k, "vehicle": a[1], "other": b[1],
                                "gap": abs(a[0] - b[0])}
        return None

    def _spawn(self, k: int):
        clearance = {}
        for v in self.vehicles.values():
            r, p = v.route, v.state.progress
            if p < r.ramp_length:
                cur = clearance.get(r.entry)
                if cur is None or p < cur[0]:
                    clearance[r.entry] = (p, v.state.v)
        for st in self.spawner.spawn(k, clearance):
            route = self.spawner.route(*st.route)
            rec = VehicleRecord(st.id, st.category.value, st.route[0], st.route[1],
                                st.entered_at)
            self.records.append(rec)
            veh = _Vehicle(st, route, rec)
            if veh.cav:
                veh.view = self._new_view()
                if self.cfg.comms.fusion:
                    self.channel.add_node(st.id)
            self.vehicles[st.id] = veh

    def _record_density(self, k: int):
        counts = self._segment_counts()
        for j, (n, L) in enumerate(zip(counts, self.layout.segment_lengths)):
            self.density.append((k, j, n / L))

    # loop ----------------------------------------------------------------------
    def tick(self):
        k = self.clock.k
        self._event("deliver")
        self._communicate(k)
        self._event("sequence")
        self._sequence(k)
        self._event("control")
        true_z = self._true_z()
        tau_bar = self._tau_bar()
        inputs = {}
        for vid in sorted(self.vehicles):
            v = self.vehicles[vid]
            inputs[vid] = (self._control_cav(v, k, true_z, tau_bar) if v.cav
                           else self._control_hdv(v, k, true_z))
        self._event("step")
        self._advance(k, inputs)
        self._spawn(k)
        self._record_density(k)
        self.collision = self._check_safety(k)
        self.clock.advance()
        if self.collision is not None:
            LOG.warning("collision abort: %s", self.collision)
            raise CollisionAbort(str(self.collision))

    @property
    def finished(self) -> bool:
        cap = self.process.max_vehicles
        return (cap is not None and self.process.spawned >= cap and not self.vehicles
                and self.spawner.queued == 0)

    def conservation(self) -> bool:
        return self.process.spawned == self.completed + len(self.vehicles) + self.spawner.queued

    def run(self) -> SimReport:
        while not self.clock.done and not self.finished:
            try:
                self.tick()
            except CollisionAbort:
                break
        return self.report()

    def report(self) -> SimReport:
        pets: list[PetEvent] = []
        for mid, ps in self.passages.items():
            pets.extend(pet_events(ps, mid))
        b = self.cfg.bounds
        rep = SimReport(
            records=sorted(self.records, key=lambda r: r.id), dt=self.cfg.sim.dt, pets=pets,
            density=self.density, spawned=self.process.spawned, in_system=len(self.vehicles),
            queued=self.spawner.queued, ticks=self.clock.k, collision=self.collision,
            config=self.cfg.to_dict(), seed=self.cfg.sim.seed, a_max=b.a_max, a_min=b.a_min,
            n_legs=self.layout.n_legs, degraded_solves=self.degraded,
            min_spacing_residual=self.min_spacing_residual,
            annulus_violation=self.annulus_violation, sequencer_calls=self.sequencer_calls)
        return rep


def run(cfg: ScenarioConfig) -> SimReport:
    """Simulate one scenario to completion and return its report."""
    return Simulation(cfg).run()
