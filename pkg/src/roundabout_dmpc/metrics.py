"""Evaluation quantities: travel time, energy, weighted objective, PET and reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

PET_TH = 2.0
ZONE_HALF_WIDTH = 5.0
PER_VEHICLE_COLUMNS = ("id", "category", "entry", "exit", "t_entry", "t_exit", "travel_time",
                       "energy")


class IncompleteRecord(ValueError):
    pass


@dataclass
class VehicleRecord:
    id: int
    category: str
    entry: int
    exit: int
    t_entry: float
    t_exit: float | None = None
    accel: list[float] = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return self.t_exit is not None

    @property
    def travel_time(self) -> float:
        if self.t_exit is None:
            raise IncompleteRecord(f"vehicle {self.id} has not exited")
        return self.t_exit - self.t_entry


def control_energy(accel, dt: float) -> float:
    a = np.asarray(accel, dtype=float)
    return float(0.5 * np.sum(a * a) * dt)


def energy(record: VehicleRecord, dt: float) -> float:
    """Travel time plus the quadratic control effort."""
    return record.travel_time + control_energy(record.accel, dt)


def eta(lam: float, a_max: float = 5.0, a_min: float = 5.0) -> float:
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    return lam * max(a_max ** 2, a_min ** 2) / (2.0 * (1.0 - lam))


def avg_obj(avg_travel: float, avg_energy: float, eta_value: float) -> float:
    return eta_value * avg_travel + avg_energy


@dataclass(frozen=True)
class PetEvent:
    merge_point: int
    leader: int
    follower: int
    pet: float
    leader_category: str = "CAV"
    follower_category: str = "CAV"


def pet_events(passages: list[tuple[int, int, float, float, str]], merge_point: int = 0
               ) -> list[PetEvent]:
    """PET for consecutive crossing pairs at one merge point.

    ``passages`` holds ``(vehicle id, approach, t_in, t_out, category)`` per
    zone passage.  Vehicles are ordered by entry time; a pair from different
    approaches yields ``follower t_in - leader t_out``.
    """
    seq = sorted(passages, key=lambda p: (p[2], p[0]))
    out = []
    for lead, fol in zip(seq, seq[1:]):
        if lead[1] == fol[1]:
            continue
        out.append(PetEvent(merge_point, lead[0], fol[0], fol[2] - lead[3], lead[4], fol[4]))
    return out


def conflict_ratio(events, pet_th: float = PET_TH) -> tuple[float, bool]:
    """Share of events with PET below the threshold; flag is False when there were none."""
    if pet_th <= 0:
        raise ValueError("PET threshold must be positive")
    pets = [e.pet if isinstance(e, PetEvent) else float(e) for e in events]
    if not pets:
        return 0.0, False
    return sum(1 for p in pets if p < pet_th) / len(pets), True


def normalize(values, baseline):
    v = np.asarray(values, dtype=float)
    b = np.asarray(baseline, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(b != 0, v / np.where(b == 0, 1.0, b), np.nan)


@dataclass
class IntersectionStats:
    n_completed: int
    avg_travel: float
    avg_energy: float

    def obj(self, lam: float, a_max: float = 5.0, a_min: float = 5.0) -> float:
        return avg_obj(self.avg_travel, self.avg_energy, eta(lam, a_max, a_min))


def _round6(x):
    if isinstance(x, float):
        if not math.isfinite(x):
            return None
        return float(f"{x:.6g}")
    if isinstance(x, dict):
        return {k: _round6(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round6(v) for v in x]
    if isinstance(x, np.generic):
        return _round6(x.item())
    return x


@dataclass
class SimReport:
    records: list[VehicleRecord]
    dt: float
    pets: list[PetEvent] = field(default_factory=list)
    density: list[tuple[int, int, float]] = field(default_factory=list)
    spawned: int = 0
    in_system: int = 0
    queued: int = 0
    ticks: int = 0
    collision: dict | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    a_max: float = 5.0
    a_min: float = 5.0
    n_legs: int = 3
    degraded_solves: int = 0
    min_spacing_residual: float = math.inf  # realised CAV same-lane spacing slack, m
    annulus_violation: float = 0.0  # worst excursion outside the ring lane, m
    sequencer_calls: int = 0

    @property
    def completed(self) -> list[VehicleRecord]:
        return [r for r in self.records if r.completed]

    def stats(self, entry: int | None = None, category: str | None = None) -> IntersectionStats:
        """Averages over completed vehicles, optionally per entry and category."""
        recs = [r for r in self.completed
                if (entry is None or r.entry == entry) and (category is None or r.category == category)]
        if not recs:
            return IntersectionStats(0, math.nan, math.nan)
        tt = float(np.mean([r.travel_time for r in recs]))
        en = float(np.mean([energy(r, self.dt) for r in recs]))
        return IntersectionStats(len(recs), tt, en)

    def conflict_ratio(self, merge_point: int | None = None, pet_th: float = PET_TH):
        ev = [e for e in self.pets if merge_point is None or e.merge_point == merge_point]
        return conflict_ratio(ev, pet_th)

    def summary(self, lambdas=(0.1, 0.2), pet_th: float = PET_TH) -> dict:
        inter = {}
        for j in range(self.n_legs):
            st = self.stats(j)
            pets = [e.pet for e in self.pets if e.merge_point == j]
            ratio, has = self.conflict_ratio(j, pet_th)
            inter[f"intersection_{j}"] = {
                "completed": st.n_completed,
                "avg_travel_time": st.avg_travel,
                "avg_energy": st.avg_energy,
                **{f"avg_obj_lambda_{lam:g}".replace(".", "_"):
                   (st.obj(lam, self.a_max, self.a_min) if st.n_completed else math.nan)
                   for lam in lambdas},
                "pet_events": len(pets),
                "pet_cav_cav": sum(1 for e in self.pets if e.merge_point == j
                                   and e.leader_category == "CAV" and e.follower_category == "CAV"),
                "mean_pet": float(np.mean(pets)) if pets else math.nan,
                "conflict_ratio": ratio,
                "conflict_ratio_defined": has,
            }
        allst = self.stats()
        return _round6({
            "seed": self.seed,
            "ticks": self.ticks,
            "spawned": self.spawned,
            "completed": len(self.completed),
            "in_system": self.in_system,
            "queued": self.queued,
            "avg_travel_time": allst.avg_travel,
            "avg_energy": allst.avg_energy,
            "intersections": inter,
            "collision": self.collision,
            "degraded_solves": self.degraded_solves,
            "config": self.config,
        })

    # output ---------------------------------------------------------------
    def write_per_vehicle(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(PER_VEHICLE_COLUMNS)
            for r in sorted(self.records, key=lambda r: r.id):
                if r.completed:
                    row = [r.id, r.category, r.entry, r.exit, f"{r.t_entry:.6g}",
                           f"{r.t_exit:.6g}", f"{r.travel_time:.6g}", f"{energy(r, self.dt):.6g}"]
                else:
                    row = [r.id, r.category, r.entry, r.exit, f"{r.t_entry:.6g}", "", "", ""]
                wr.writerow(row)

    def write_density(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("tick", "segment", "rho"))
            for tick, seg, rho in self.density:
                wr.writerow((tick, seg, f"{rho:.6g}"))

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
