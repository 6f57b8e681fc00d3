"""Per-vehicle delay-aware distributed MPC.

Each CAV minimises a quadratic tracking cost over its input sequence; the
spacing, annulus, rollover and speed constraints enter as smooth hinge
penalties ``max(0, -residual)**2`` under an increasing weight schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .dynamics import ControlInput, VehicleState, linearize, step_array
from .geometry import Route, RoundaboutLayout, wrap_angle


class ProblemError(ValueError):
    pass


def _check_spd(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ProblemError(f"{name} must be square")
    if not np.allclose(M, M.T):
        raise ProblemError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ProblemError(f"{name} must be positive definite")
    return M


@dataclass
class DmpcParams:
    horizon: int = 10
    R: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 0.1, 0.5]))
    Q: np.ndarray = field(default_factory=lambda: np.diag([0.1, 0.1]))
    lam: float = 0.1
    sigma: float = 1.8  # reaction time in the spacing law, s
    varrho: float = 4.5  # standstill term, vehicle length, m
    body_length: float = 4.5
    d_min: float = 5.0
    t_h: float = 1.5
    a_max: float = 5.0
    steer_max: float = 0.6
    v_min: float = 0.0
    v_max: float = 20.0
    hc: float = 0.5
    w_hc: float = 0.9
    g: float = 9.81
    margin: float = 0.5
    follower_weight: float = 0.1
    weights: tuple[float, ...] = (1e2, 1e3, 1e4)
    max_iter: int = 200
    tol: float = 1e-6
    method: str = "gauss-newton"

    def __post_init__(self):
        self.R = _check_spd(self.R, "R")
        self.Q = _check_spd(self.Q, "Q")
        if self.horizon < 1:
            raise ProblemError("horizon must be at least one step")
        for name in ("sigma", "varrho", "d_min", "t_h", "a_max", "steer_max", "v_max", "hc",
                     "w_hc", "g"):
            if getattr(self, name) <= 0:
                raise ProblemError(f"{name} must be positive")
        if self.method not in ("gauss-newton", "gradient"):
            raise ProblemError(f"unknown method {self.method!r}")


@dataclass
class Neighbor:
    """A vehicle constraining the ego along a shared path axis.

    ``gap`` is the centre-to-centre distance (leader ahead of ego, or ego
    ahead of follower).  ``v`` and ``a`` are the believed speed and input.
    """

    id: int
    gap: float
    v: float
    a: float = 0.0
    physical: bool = True


@dataclass
class DmpcProblem:
    state: VehicleState
    sref: np.ndarray  # (N, 4)
    dt: float = 0.1
    leaders: list[Neighbor] = field(default_factory=list)
    followers: list[Neighbor] = field(default_factory=list)
    tau_bar: float = 0.0
    ring_mask: np.ndarray | None = None
    curvature: np.ndarray | None = None
    layout: RoundaboutLayout = field(default_factory=RoundaboutLayout)
    params: DmpcParams = field(default_factory=DmpcParams)
    linear_model: bool = False

    def __post_init__(self):
        n = self.params.horizon
        self.sref = np.asarray(self.sref, dtype=float).reshape(n, 4)
        if self.ring_mask is None:
            self.ring_mask = np.zeros(n)
        if self.curvature is None:
            self.curvature = np.zeros(n)
        if self.dt <= 0 or self.tau_bar < 0:
            raise ProblemError("dt must be positive and tau_bar non-negative")


@dataclass
class ControlPlan:
    inputs: np.ndarray  # (N, 2): acceleration, steering
    states: np.ndarray | None = None  # (N+1, 5): x, y, theta, v, travelled
    cost: float = 0.0
    min_residual: float = math.inf
    iterations: int = 0
    final_weight: float = 0.0
    degraded: bool = False

    def first_input(self, tick: int = 0) -> ControlInput:
        return ControlInput(float(self.inputs[0, 0]), float(self.inputs[0, 1]), tick)

    def shifted(self) -> "ControlPlan":
        """Warm start for the next tick: drop the applied input, repeat the last."""
        u = np.vstack([self.inputs[1:], self.inputs[-1:]])
        return ControlPlan(u)


def stage_cost(s_hat, u_hat, s_ref, R, Q) -> float:
    e = np.asarray(s_hat, dtype=float)[:4] - np.asarray(s_ref, dtype=float)[:4]
    e[2] = wrap_angle(e[2])
    u = np.asarray(u_hat, dtype=float)
    return float(e @ np.asarray(R) @ e + u @ np.asarray(Q) @ u)


def total_cost(states, inputs, sref, R, Q, lam: float, tau_bar: float) -> float:
    """Tracking plus input cost over the horizon plus the delay penalty.

    Stage ``k`` pairs input ``k`` with the state it produces (row ``k+1`` of
    ``states``).  The delay term ``lam * N * tau_bar`` does not depend on the
    inputs.
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 2)
    n = inputs.shape[0]
    states = np.asarray(states, dtype=float)
    J = sum(stage_cost(states[k + 1], inputs[k], sref[k], R, Q) for k in range(n))
    return J + lam * n * tau_bar


def spacing_residuals(D_pre, D_fol, v_i, v_im, params: DmpcParams, tau_bar: float = 0.0,
                      a_max: float | None = None) -> dict[str, float]:
    """Residuals (feasible iff >= 0) of the spacing constraints.

    Constraints whose neighbour is absent (``None``) are skipped.
    """
    p = params
    am = p.a_max if a_max is None else a_max
    out = {}
    if D_pre is not None:
        out["leader_static"] = D_pre - (p.sigma * v_i + p.varrho)
        out["leader_headway"] = D_pre - (p.d_min + v_i * p.t_h + v_i * tau_bar + 0.5 * am * tau_bar ** 2)
        out["leader_delay"] = D_pre - (p.body_length + p.varrho + v_i * tau_bar)
    if D_fol is not None:
        out["follower_static"] = D_fol - (p.sigma * v_i + p.varrho)
        if v_im is not None:
            out["follower_headway"] = D_fol - (p.d_min + v_im * p.t_h + v_im * tau_bar)
    return out


def rollover_residual(eps: float, v: float, hc: float, w_hc: float, g: float = 9.81) -> float:
    if eps < 0:
        raise ProblemError("curvature must be non-negative")
    return w_hc * g - eps * v * v * hc


def predict_neighbor(v0: float, a: float, n: int, dt: float, v_min=0.0, v_max=20.0):
    """Displacement and speed of a neighbour at steps 1..n under constant input."""
    disp = np.empty(n)
    speed = np.empty(n)
    v, d = v0, 0.0
    for k in range(n):
        d += v * dt
        v = min(max(v + a * dt, v_min), v_max)
        disp[k] = d
        speed[k] = v
    return disp, speed


def reference(route: Route, progress: float, n: int, dt: float, v_ramp: float = 10.0,
              v_ring: float = 15.0, v0: float | None = None, a_comf: float = 1.0):
    """Reference states at steps 1..n along the route.

    The speed target is ``v_ramp`` on the entry ramp and ``v_ring`` after it.
    Starting from ``v0`` (default: the target) the reference speed moves
    toward the target by at most ``a_comf * dt`` per step and the reference
    positions integrate that speed.  Returns ``(sref, ring_mask, curvature)``.
    """
    sref = np.empty((n, 4))
    mask = np.zeros(n)
    kap = np.zeros(n)
    p = progress
    v = None if v0 is None else float(v0)
    for k in range(n):
        target = v_ramp if route.piece(p) == "entry" else v_ring
        if v is None:
            v = target
        else:
            v += min(max(target - v, -a_comf * dt), a_comf * dt)
        p = p + v * dt  # the exit ramp is straight, so extrapolating past its end is safe
        pt = route.point(p)
        sref[k] = (pt.x, pt.y, pt.theta, v)
        mask[k] = 1.0 if pt.piece == "ring" else 0.0
        kap[k] = pt.curvature
    return sref, mask, kap


def _constraint_vector(prob: DmpcProblem) -> np.ndarray:
    p = prob.params
    cp = np.zeros(K.CP_SIZE)
    cp[K.CP_SIGMA] = p.sigma
    cp[K.CP_VARRHO] = p.varrho
    cp[K.CP_DMIN] = p.d_min
    cp[K.CP_TH] = p.t_h
    cp[K.CP_TAU] = prob.tau_bar
    cp[K.CP_AMAX] = p.a_max
    cp[K.CP_LVEH] = p.body_length
    cp[K.CP_MARGIN] = p.margin
    cp[K.CP_FOLW] = p.follower_weight
    cp[K.CP_TR] = prob.layout.ring_radius
    cp[K.CP_WD] = prob.layout.lane_width
    cp[K.CP_HC] = p.hc
    cp[K.CP_WHC] = p.w_hc
    cp[K.CP_G] = p.g
    cp[K.CP_CX], cp[K.CP_CY] = prob.layout.center
    cp[K.CP_VMIN] = p.v_min
    cp[K.CP_VMAX] = p.v_max
    cp[K.CP_SMAX] = p.steer_max
    return cp


def _kernel_args(prob: DmpcProblem):
    p = prob.params
    n = p.horizon
    s0 = prob.state.as_array()
    lead_gap = np.array([nb.gap for nb in prob.leaders], dtype=float)
    lead_disp = np.zeros((len(prob.leaders), n))
    for i, nb in enumerate(prob.leaders):
        lead_disp[i], _ = predict_neighbor(nb.v, nb.a, n, prob.dt, p.v_min, p.v_max)
    fol_gap = np.array([nb.gap for nb in prob.followers], dtype=float)
    fol_disp = np.zeros((len(prob.followers), n))
    fol_v = np.zeros((len(prob.followers), n))
    for i, nb in enumerate(prob.followers):
        fol_disp[i], fol_v[i] = predict_neighbor(nb.v, nb.a, n, prob.dt, p.v_min, p.v_max)
    Rc = np.linalg.cholesky(p.R).T
    Qc = np.linalg.cholesky(p.Q).T
    return (s0, prob.dt, prob.state.wheelbase, prob.sref, Rc, Qc, lead_gap, lead_disp,
            fol_gap, fol_disp, fol_v, _constraint_vector(prob),
            np.asarray(prob.ring_mask, dtype=float), np.asarray(prob.curvature, dtype=float))


def evaluate_plan(prob: DmpcProblem, inputs, weight: float | None = None):
    """Penalised objective, states and smallest constraint residual of ``inputs``."""
    args = _kernel_args(prob)
    Fs, Gs, sbar = _linear_terms(prob, args)
    mu = prob.params.weights[-1] if weight is None else weight
    U = np.asarray(inputs, dtype=float).reshape(-1).copy()
    cost, _, _, states, min_res = K.evaluate(U, *args, mu, prob.linear_model, Fs, Gs, sbar, False)
    return cost, states, min_res


def _linear_terms(prob, args):
    n = prob.params.horizon
    if not prob.linear_model:
        return np.zeros((1, 4, 4)), np.zeros((1, 4, 2)), np.zeros((1, 4))
    s0 = args[0]
    Fs = np.zeros((n, 4, 4))
    Gs = np.zeros((n, 4, 2))
    sbar = np.zeros((n + 1, 4))
    sbar[0] = s0
    p = prob.params
    for k in range(n):
        Fs[k], Gs[k] = linearize(sbar[k], (0.0, 0.0), prob.dt, prob.state.wheelbase, p.v_min,
                                 p.v_max)
        sbar[k + 1] = step_array(sbar[k], (0.0, 0.0), prob.dt, prob.state.wheelbase, p.v_min,
                                 p.v_max)
    return Fs, Gs, sbar


def solve(prob: DmpcProblem, warm_start: ControlPlan | None = None) -> ControlPlan:
    """Solve the penalised horizon problem; deterministic for fixed inputs."""
    p = prob.params
    n = p.horizon
    args = _kernel_args(prob)
    Fs, Gs, sbar = _linear_terms(prob, args)
    if warm_start is not None and warm_start.inputs.shape == (n, 2):
        U0 = np.asarray(warm_start.inputs, dtype=float).reshape(-1).copy()
    else:
        U0 = np.zeros(2 * n)
    weights = np.asarray(p.weights, dtype=float)
    U, iters, last_w, cost = K.solve_penalty(
        U0, *args, weights, prob.linear_model, Fs, Gs, sbar, p.max_iter, p.tol,
        p.method == "gauss-newton")
    # never return something worse than a feasible warm start
    U0p = K._project(U0, p.a_max, p.steer_max)
    c0, _, _, _, r0 = K.evaluate(U0p, *args, last_w, prob.linear_model, Fs, Gs, sbar, False)
    if warm_start is not None and r0 >= 0.0 and c0 < cost:
        U, cost = U0p, c0
    _, _, _, states, min_res = K.evaluate(U, *args, last_w, prob.linear_model, Fs, Gs, sbar, False)
    inputs = U.reshape(n, 2)
    degraded = False
    # a physical leader closer than the standstill spacing cannot be fixed by planning
    for nb in prob.leaders:
        if nb.physical and nb.gap < p.varrho:
            inputs = inputs.copy()
            inputs[:, 0] = -p.a_max
            degraded = True
            U = inputs.reshape(-1)
            cost, _, _, states, min_res = K.evaluate(U, *args, last_w, prob.linear_model, Fs, Gs,
                                                     sbar, False)
            break
    J = total_cost(states, inputs, prob.sref, p.R, p.Q, p.lam, prob.tau_bar)
    return ControlPlan(inputs, states, J, float(min_res), int(iters), float(last_w), degraded)
