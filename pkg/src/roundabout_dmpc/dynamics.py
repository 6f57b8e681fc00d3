"""Kinematic bicycle model and its per-step Jacobians."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import wrap_angle

DEFAULT_WHEELBASE = 2.7
DEFAULT_BODY_LENGTH = 4.5


class Category(str, enum.Enum):
    CAV = "CAV"
    HDV = "HDV"


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ControlInput:
    a: float = 0.0
    steer: float = 0.0
    issued_at: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.steer])


@dataclass(frozen=True)
class VehicleState:
    id: int
    x: float
    y: float
    theta: float
    v: float
    wheelbase: float = DEFAULT_WHEELBASE
    category: Category = Category.CAV
    route: tuple[int, int] = (0, 1)
    entered_at: float = 0.0
    progress: float = 0.0  # path coordinate along the route, m
    length: float = DEFAULT_BODY_LENGTH

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])

    def with_array(self, s, progress=None) -> "VehicleState":
        return replace(self, x=float(s[0]), y=float(s[1]), theta=wrap_angle(float(s[2])),
                       v=float(s[3]), progress=self.progress if progress is None else progress)


def step_array(s, u, dt: float, wheelbase: float, v_min: float = 0.0, v_max: float = 20.0):
    """One discrete bicycle-model update on plain arrays ``[x, y, theta, v]``."""
    x, y, th, v = s
    a, steer = u
    out = np.empty(4)
    out[0] = x + dt * v * math.cos(th)
    out[1] = y + dt * v * math.sin(th)
    out[2] = th + dt * v / wheelbase * math.tan(steer)
    out[3] = min(max(v + dt * a, v_min), v_max)
    return out


def step(state: VehicleState, u: ControlInput, dt: float, v_min: float = 0.0,
         v_max: float = 20.0) -> VehicleState:
    """Advance ``state`` by one sampling period under input ``u``.

    Speed is clamped to ``[v_min, v_max]`` after the update.  ``progress`` is
    advanced by the distance travelled; callers that know the road geometry
    re-project it.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    vals = (state.x, state.y, state.theta, state.v, u.a, u.steer)
    if not all(math.isfinite(t) for t in vals):
        raise NumericError(f"non-finite state or input for vehicle {state.id}")
    s1 = step_array(state.as_array(), (u.a, u.steer), dt, state.wheelbase, v_min, v_max)
    return state.with_array(s1, progress=state.progress + dt * state.v)


def linearize(state, u, dt: float, wheelbase: float | None = None, v_min: float = 0.0,
              v_max: float = 20.0) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians ``F = d step / d s`` (4x4) and ``G = d step / d u`` (4x2).

    Accepts a :class:`VehicleState` / :class:`ControlInput` pair or plain
    arrays (then ``wheelbase`` is required).  Where the speed clamp is active
    the speed row has zero sensitivity, matching :func:`step`.
    """
    if isinstance(state, VehicleState):
        wheelbase = state.wheelbase
        s = state.as_array()
    else:
        s = np.asarray(state, dtype=float)
    uu = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    if wheelbase is None:
        raise ValueError("wheelbase required for array input")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(uu))):
        raise NumericError("non-finite linearization point")
    _, _, th, v = s
    a, steer = uu
    c, sn = math.cos(th), math.sin(th)
    F = np.eye(4)
    F[0, 2] = -dt * v * sn
    F[0, 3] = dt * c
    F[1, 2] = dt * v * c
    F[1, 3] = dt * sn
    F[2, 3] = dt * math.tan(steer) / wheelbase
    G = np.zeros((4, 2))
    G[2, 1] = dt * v / (wheelbase * math.cos(steer) ** 2)
    G[3, 0] = dt
    v_next = v + dt * a
    if v_next < v_min or v_next > v_max:
        F[3, 3] = 0.0
        G[3, 0] = 0.0
    return F, G
