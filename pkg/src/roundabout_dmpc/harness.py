"""Experiment presets, batch runs and report emission, plus a ``main(argv)`` entry point."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ScenarioConfig
from .engine import run
from .metrics import eta, normalize

LOG = logging.getLogger(__name__)

EXP1_PENETRATIONS = (0.2, 0.4, 0.6, 0.8)
VARIANTS = ("M1", "M2", "M3")
INTERSECTIONS = ("A", "B", "C")
# keys that may differ between runs that are compared side by side
COMPARE_FREE = ("controller.variant", "sim.seed", "traffic.penetration", "controller.lam")


class MixedScenarioError(ValueError):
    pass


def preset_experiment1(penetration: float = 0.6) -> ScenarioConfig:
    """Equal 396 veh/h demand on every entry, random exits, 200 vehicles."""
    if penetration not in EXP1_PENETRATIONS:
        LOG.warning("penetration %s is outside the swept set %s", penetration, EXP1_PENETRATIONS)
    cfg = ScenarioConfig()
    cfg.traffic.rates = (396.0, 396.0, 396.0)
    cfg.traffic.penetration = float(penetration)
    cfg.traffic.max_vehicles = 200
    cfg.traffic.exit_demand = 0.0
    cfg.sim.K = 20000
    cfg.hdv.v_target = 15.0
    cfg.validate()
    return cfg


def preset_experiment2(penetration: float = 0.6) -> ScenarioConfig:
    """Unbalanced heavy demand: (108, 540, 540) veh/h plus 576 veh/h toward every exit."""
    cfg = preset_experiment1(penetration)
    cfg.traffic.rates = (108.0, 540.0, 540.0)
    cfg.traffic.exit_demand = 576.0
    cfg.validate()
    return cfg


def scaled(cfg: ScenarioConfig, vehicles: int | None = None, seconds: float | None = None
           ) -> ScenarioConfig:
    """Copy of ``cfg`` with a smaller vehicle cap and/or shorter horizon."""
    out = ScenarioConfig.parse(cfg.emit())
    if vehicles is not None:
        out.traffic.max_vehicles = int(vehicles)
    if seconds is not None:
        out.sim.K = int(round(seconds / out.sim.dt))
    out.validate()
    return out


def variant_configs(cfg: ScenarioConfig, variants=VARIANTS) -> list[ScenarioConfig]:
    return [cfg.replace(controller__variant=v) for v in variants]


def compare_hash(cfg: ScenarioConfig) -> str:
    return cfg.scenario_hash(ignore=COMPARE_FREE)


def run_tag(cfg: ScenarioConfig) -> str:
    return (f"{cfg.controller.variant.upper()}-p{cfg.traffic.penetration:g}-s{cfg.sim.seed}-"
            f"{cfg.run_hash()}")


def write_run(cfg: ScenarioConfig, out_dir) -> dict:
    """Run one scenario and write its CSV/JSON outputs; returns the summary."""
    out = Path(out_dir) / run_tag(cfg)
    out.mkdir(parents=True, exist_ok=True)
    rep = run(cfg)
    summary = rep.summary(lambdas=sorted({0.1, 0.2, cfg.controller.lam}))
    summary["scenario_hash"] = compare_hash(cfg)
    summary["run_hash"] = cfg.run_hash()
    summary["variant"] = cfg.controller.variant.upper()
    summary["penetration"] = cfg.traffic.penetration
    rep.write_per_vehicle(out / "per_vehicle.csv")
    rep.write_density(out / "density.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    (out / "scenario.cfg").write_text(cfg.emit())
    return summary


def _obj_key(lam: float) -> str:
    return f"avg_obj_lambda_{lam:g}".replace(".", "_")


def _mean(xs):
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and math.isnan(x))]
    return float(np.mean(xs)) if xs else math.nan


def compare_tables(summaries: list[dict]):
    """Per-intersection travel/energy/obj rows and a normalised PET table.

    Runs must share one scenario hash; per-seed values are averaged.
    """
    hashes = {s["scenario_hash"] for s in summaries}
    if len(hashes) > 1:
        raise MixedScenarioError(f"summaries come from different scenarios: {sorted(hashes)}")
    pens = sorted({s["penetration"] for s in summaries})
    variants = sorted({s["variant"] for s in summaries})
    cols = [(p, v) for p in pens for v in variants]
    attrs = [("avg_travel_time", "Ave. Travel Time"), ("avg_energy", "Ave. Energy"),
             (_obj_key(0.1), "Ave. obj(lambda=0.1)"), (_obj_key(0.2), "Ave. obj(lambda=0.2)")]
    table = []
    for j in range(len(INTERSECTIONS)):
        key = f"intersection_{j}"
        for attr, label in attrs:
            row = {"intersection": INTERSECTIONS[j], "attribute": label}
            for p, v in cols:
                vals = [s["intersections"][key][attr] for s in summaries
                        if s["penetration"] == p and s["variant"] == v]
                row[f"p{p:g}_{v}"] = _mean(vals)
            table.append(row)
    pet = []
    for j in range(len(INTERSECTIONS)):
        key = f"intersection_{j}"
        for attr, label in (("mean_pet", "PET"), ("conflict_ratio", "conflict ratio")):
            row = {"intersection": INTERSECTIONS[j], "attribute": label}
            for p in pens:
                raw = {v: _mean([s["intersections"][key][attr] for s in summaries
                                 if s["penetration"] == p and s["variant"] == v])
                       for v in variants}
                base = raw.get("M3", math.nan)
                for v in variants:
                    row[f"p{p:g}_{v}"] = float(normalize(raw[v], base))
            pet.append(row)
    return table, pet


def _write_table(rows, path):
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def write_compare(summaries, out_dir):
    table, pet = compare_tables(summaries)
    out = Path(out_dir)
    _write_table(table, out / "compare.csv")
    _write_table(pet, out / "compare_pet.csv")
    return table, pet


def sweep(base: ScenarioConfig, out_dir, penetrations=EXP1_PENETRATIONS, variants=VARIANTS,
          seeds=(0,), jobs: int = 1) -> list[dict]:
    cfgs = [base.replace(traffic__penetration=float(p), controller__variant=v, sim__seed=int(s))
            for p in penetrations for v in variants for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            summaries = list(ex.map(write_run, cfgs, [out_dir] * len(cfgs)))
    else:
        summaries = [write_run(c, out_dir) for c in cfgs]
    write_compare(summaries, out_dir)
    return summaries


# command line ---------------------------------------------------------------------------
def _floats(text):
    return tuple(float(x) for x in text.split(",") if x)


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="roundabout-dmpc",
                                 description="Roundabout coordination simulations")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", help="scenario file (section.key = value lines)")
        p.add_argument("--preset", choices=("exp1", "exp2"), help="start from a preset")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--lambda", dest="lam", type=float, help="delay penalty weight")
        p.add_argument("--vehicles", type=int, help="override the vehicle cap")
        p.add_argument("--seconds", type=float, help="override the simulated duration")

    p = sub.add_parser("run", help="simulate one scenario")
    common(p)
    p.add_argument("--variant", type=str.upper, choices=VARIANTS)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sweep", help="penetrations x variants x seeds, then compare")
    common(p)
    p.add_argument("--variant", type=str.upper, choices=VARIANTS, action="append")
    p.add_argument("--seeds", type=_ints, default=(0,))
    p.add_argument("--seed", type=int)
    p.add_argument("--penetrations", type=_floats, default=EXP1_PENETRATIONS)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("compare", help="tabulate existing run summaries")
    p.add_argument("--out", required=True, help="directory holding run outputs")
    return ap


def _base_config(args) -> ScenarioConfig:
    if args.config:
        cfg = ScenarioConfig.load(args.config)
    elif args.preset == "exp2":
        cfg = preset_experiment2()
    else:
        cfg = preset_experiment1()
    if args.lam is not None:
        cfg.controller.lam = args.lam
    cfg = scaled(cfg, args.vehicles, args.seconds)
    return cfg


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage text
        return int(exc.code or 0)
    try:
        if args.cmd == "compare":
            files = sorted(Path(args.out).glob("*/summary.json"))
            summaries = [json.loads(f.read_text()) for f in files]
            write_compare(summaries, args.out)
            return 0
        cfg = _base_config(args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        if args.cmd == "run":
            if args.variant:
                cfg.controller.variant = args.variant
            if args.seed is not None:
                cfg.sim.seed = args.seed
            cfg.validate()
            write_run(cfg, args.out)
            return 0
        seeds = (args.seed,) if args.seed is not None else args.seeds
        variants = tuple(args.variant) if args.variant else VARIANTS
        sweep(cfg, args.out, args.penetrations, variants, seeds, args.jobs)
        return 0
    except (ConfigError, MixedScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


__all__ = ["preset_experiment1", "preset_experiment2", "scaled", "sweep", "compare_tables",
           "write_run", "write_compare", "main", "eta"]
