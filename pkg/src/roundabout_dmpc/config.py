"""Scenario configuration: nested dataclasses with a flat ``section.key = value`` text form.

Values are JSON literals, one per line; ``#`` starts a comment.  Every field
has a default, so a file only needs the keys that differ.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

LOG = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class LayoutConfig:
    ring_radius: float = 30.0
    lane_width: float = 4.0
    n_legs: int = 3
    ramp_length: float = 60.0
    exit_ramp_length: float = 60.0
    exit_offset: float = 20.0


@dataclass
class TrafficConfig:
    rates: tuple = (396.0, 396.0, 396.0)  # veh/h per entry
    exit_demand: float = 0.0  # veh/h added at every exit
    penetration: float = 0.6
    max_vehicles: int | None = 200
    allow_u_turn: bool = False
    initial_speed: float = 10.0
    headroom: float = 23.5


@dataclass
class CommsConfig:
    delay_lo: int = 1  # ticks
    delay_hi: int | None = 3
    t_th: int = 2
    window: int = 50
    fusion: bool = True  # False: controllers read true neighbour states


@dataclass
class ControllerConfig:
    variant: str = "M2"
    horizon: int = 10
    R: tuple = (1.0, 1.0, 0.1, 0.5)  # diagonal
    Q: tuple = (0.1, 0.1)
    lam: float = 0.1
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.5
    alpha4: float = 10.0
    B: float = 1.0
    M: float = 1.0
    subtract_twice: bool = True
    v_ramp: float = 10.0
    v_ring: float = 15.0
    a_comf: float = 1.0  # reference speed slew rate, m/s^2
    method: str = "gauss-newton"
    max_iter: int = 200
    resequence_every: int = 10
    freeze_distance: float = 10.0
    n_cap: int = 8


@dataclass
class ThresholdConfig:
    ttc_th: float = 2.5
    pet_th: float = 2.0
    rho_max: float = 0.15
    t_h: float = 1.5
    d_min: float = 5.0
    sigma: float = 1.8
    varrho: float = 4.5
    margin: float = 0.5
    desired_spacing: float = 10.0
    coordination_radius: float = 60.0
    zone_half_width: float = 5.0
    collision_gap: float = 4.5


@dataclass
class BoundsConfig:
    v_min: float = 0.0
    v_max: float = 20.0
    a_max: float = 5.0
    a_min: float = 5.0  # magnitude of the braking bound
    steer_max: float = 0.6


@dataclass
class HdvConfig:
    v_target: float = 15.0
    gain: float = 1.0
    reaction: float = 1.8
    standstill: float = 4.5
    lookahead: float = 6.0


@dataclass
class SimConfig:
    dt: float = 0.1
    K: int = 20000
    seed: int = 0
    trace: bool = False


@dataclass
class ScenarioConfig:
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    comms: CommsConfig = field(default_factory=CommsConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    hdv: HdvConfig = field(default_factory=HdvConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        t = self.traffic
        if not 0.0 <= t.penetration <= 1.0:
            raise ConfigError("traffic.penetration must lie in [0, 1]")
        if len(t.rates) != self.layout.n_legs:
            raise ConfigError("traffic.rates needs one rate per leg")
        if self.controller.variant.upper() not in ("M1", "M2", "M3"):
            raise ConfigError(f"unknown controller variant {self.controller.variant!r}")
        if self.sim.dt <= 0 or self.sim.K < 0:
            raise ConfigError("sim.dt must be positive and sim.K non-negative")
        c = self.comms
        if c.delay_lo < 0 or (c.delay_hi is not None and c.delay_hi < c.delay_lo):
            raise ConfigError("bad delay range")
        if not 0.0 < self.controller.lam < 1.0:
            raise ConfigError("controller.lam must lie in (0, 1)")

    # text form ------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def items(self):
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                yield f"{sec.name}.{f.name}", getattr(obj, f.name)

    def emit(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.items())

    @classmethod
    def parse(cls, text: str) -> "ScenarioConfig":
        sections = {f.name: f.default_factory() for f in dataclasses.fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'section.key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            sec, _, name = key.partition(".")
            if sec not in sections or name not in {f.name for f in dataclasses.fields(sections[sec])}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                value = json.loads(val)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {lineno}: bad value {val!r}") from exc
            if isinstance(value, list):
                value = tuple(value)
            setattr(sections[sec], name, value)
        return cls(**sections)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.parse(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.emit())

    def scenario_hash(self, ignore=("controller.variant", "sim.seed")) -> str:
        """Short digest of the scenario, optionally ignoring some keys."""
        text = "".join(f"{k}={json.dumps(v)}\n" for k, v in self.items() if k not in ignore)
        return hashlib.sha256(text.encode()).hexdigest()[:10]

    def run_hash(self) -> str:
        return self.scenario_hash(ignore=())

    def replace(self, **dotted) -> "ScenarioConfig":
        """Copy with ``section__key=value`` overrides."""
        cfg = ScenarioConfig.parse(self.emit())
        for key, val in dotted.items():
            sec, name = key.split("__", 1)
            obj = getattr(cfg, sec)
            if not hasattr(obj, name):
                raise ConfigError(f"unknown key {sec}.{name}")
            setattr(obj, name, tuple(val) if isinstance(val, list) else val)
        cfg.validate()
        return cfg


def reference_text() -> str:
    """All keys with their defaults, for documentation."""
    return "# default scenario configuration\n" + ScenarioConfig().emit()
