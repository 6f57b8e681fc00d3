import math

import numpy as np
import pytest

from roundabout_dmpc.dmpc import (ControlPlan, DmpcParams, DmpcProblem, Neighbor, ProblemError,
                                  evaluate_plan, reference, rollover_residual, solve,
                                  spacing_residuals, stage_cost, total_cost)
from roundabout_dmpc.dynamics import VehicleState, linearize, step_array
from roundabout_dmpc.geometry import RoundaboutLayout, Route

from oracles import one_step_lq

LAYOUT = RoundaboutLayout()
ROUTE = Route(0, 1, LAYOUT)


def _on_ramp(p=0.0, v=10.0, **kw):
    pt = ROUTE.point(p)
    return VehicleState(1, pt.x, pt.y, pt.theta, v, progress=p, **kw)


def _problem(state=None, leaders=(), followers=(), tau_bar=0.0, **pkw):
    params = DmpcParams(**pkw)
    state = state or _on_ramp()
    sref, mask, kap = reference(ROUTE, state.progress, params.horizon, 0.1)
    return DmpcProblem(state, sref, 0.1, list(leaders), list(followers), tau_bar, mask, kap,
                       LAYOUT, params)


def test_stage_cost_examples():
    R, Q = np.eye(4), np.eye(2)
    assert stage_cost(np.zeros(4), np.zeros(2), np.zeros(4), R, Q) == 0.0
    assert stage_cost([1, 0, 0, 0], np.zeros(2), np.zeros(4), R, Q) == 1.0


def test_delay_penalty_arithmetic():
    states = np.zeros((11, 4))
    assert total_cost(states, np.zeros((10, 2)), np.zeros((10, 4)), np.eye(4), np.eye(2),
                      0.1, 0.2) == pytest.approx(0.2)


def test_spacing_residual_examples():
    p = DmpcParams()
    r = spacing_residuals(20.0, None, 10.0, None, p, 0.0)
    assert r["leader_headway"] == pytest.approx(0.0)
    r = spacing_residuals(25.0, None, 10.0, None, p, 0.0)
    assert r["leader_static"] == pytest.approx(2.5)
    r = spacing_residuals(7.0, None, 0.0, None, p, 0.0)
    assert 7.0 - r["leader_headway"] == pytest.approx(p.d_min)


def test_spacing_residuals_with_delay_and_follower():
    p = DmpcParams()
    r = spacing_residuals(40.0, 30.0, 10.0, 8.0, p, 0.2)
    assert r["leader_headway"] == pytest.approx(40 - (5 + 15 + 2 + 0.5 * 5 * 0.04))
    assert r["leader_delay"] == pytest.approx(40 - (4.5 + 4.5 + 2))
    assert r["follower_headway"] == pytest.approx(30 - (5 + 12 + 1.6))
    assert r["follower_static"] == pytest.approx(30 - 22.5)
    assert spacing_residuals(None, None, 10.0, None, p) == {}


def test_rollover_examples():
    assert rollover_residual(0.0, 20.0, 0.5, 0.9) == pytest.approx(0.9 * 9.81)
    assert rollover_residual(1 / 30, 20.0, 0.5, 0.9) == pytest.approx(2.162, abs=1e-3)
    v_star = math.sqrt(0.9 * 9.81 * 30 / 0.5)
    assert v_star == pytest.approx(23.0, abs=0.05)
    assert rollover_residual(1 / 30, v_star, 0.5, 0.9) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ProblemError):
        rollover_residual(-0.1, 1.0, 0.5, 0.9)


def test_weights_must_be_positive_definite():
    with pytest.raises(ProblemError):
        DmpcParams(R=np.diag([1.0, 1.0, 0.0, 1.0]))
    with pytest.raises(ProblemError):
        DmpcParams(Q=np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ProblemError):
        DmpcParams(horizon=0)


def test_reference_tracking_gives_zero_plan():
    prob = _problem()
    plan = solve(prob)
    assert np.abs(plan.inputs).max() < 1e-6
    assert plan.cost <= prob.params.lam * prob.params.horizon * prob.tau_bar + 1e-6
    assert not plan.degraded


def test_parked_leader_forbids_acceleration():
    prob = _problem(leaders=[Neighbor(2, 5.0, 0.0)])
    plan = solve(prob)
    assert plan.inputs[0, 0] <= 0.0


def test_emergency_brake_when_too_close():
    prob = _problem(leaders=[Neighbor(2, 3.0, 0.0)])
    plan = solve(prob)
    assert plan.degraded
    assert np.all(plan.inputs[:, 0] == -prob.params.a_max)


def test_inputs_within_bounds():
    rng = np.random.default_rng(0)
    for _ in range(20):
        prob = _problem(state=_on_ramp(10.0, rng.uniform(0, 20)),
                        leaders=[Neighbor(2, rng.uniform(6, 40), rng.uniform(0, 15))])
        plan = solve(prob)
        assert np.all(np.abs(plan.inputs[:, 0]) <= prob.params.a_max)
        assert np.all(np.abs(plan.inputs[:, 1]) <= prob.params.steer_max)


def test_penalty_monotone_in_violation():
    costs = []
    for gap in (20.0, 15.0, 10.0, 6.0):
        prob = _problem(leaders=[Neighbor(2, gap, 10.0)])
        c, _, _ = evaluate_plan(prob, np.zeros((10, 2)))
        costs.append(c)
    assert all(b > a for a, b in zip(costs, costs[1:]))


def test_not_worse_than_feasible_warm_start():
    prob = _problem(leaders=[Neighbor(2, 40.0, 10.0)])
    warm = ControlPlan(np.zeros((10, 2)))
    c0, states0, r0 = evaluate_plan(prob, warm.inputs)
    assert r0 >= 0
    plan = solve(prob, warm)
    p = prob.params
    J0 = total_cost(states0, warm.inputs, prob.sref, p.R, p.Q, p.lam, prob.tau_bar)
    assert plan.cost <= J0 + 1e-9


def test_solver_deterministic():
    prob = _problem(leaders=[Neighbor(2, 18.0, 8.0, 1.0)], followers=[Neighbor(3, 12.0, 12.0)],
                    tau_bar=0.2)
    a = solve(prob, ControlPlan(np.full((10, 2), 0.1)))
    b = solve(prob, ControlPlan(np.full((10, 2), 0.1)))
    assert np.array_equal(a.inputs, b.inputs)


def test_delay_term_never_moves_the_argmin():
    kw = dict(leaders=[Neighbor(2, 18.0, 8.0)], tau_bar=0.25)
    a = solve(_problem(lam=0.0, **kw))
    b = solve(_problem(lam=1.0, **kw))
    assert np.array_equal(a.inputs, b.inputs)
    assert b.cost - a.cost == pytest.approx(1.0 * 10 * 0.25)


def test_one_step_lq_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        s0 = np.array([*rng.uniform(-50, 50, 2), rng.uniform(-3, 3), rng.uniform(5, 15)])
        free = step_array(s0, (0.0, 0.0), 0.1, 2.7)
        sref = free + np.array([*rng.normal(0, 0.05, 2), rng.normal(0, 0.01), rng.normal(0, 0.1)])
        R = np.diag(rng.uniform(0.1, 2, 4))
        Q = np.diag(rng.uniform(0.05, 1, 2))
        params = DmpcParams(horizon=1, R=R, Q=Q)
        prob = DmpcProblem(VehicleState(0, *s0), sref[None], 0.1, params=params,
                           linear_model=True)
        _, G = linearize(s0, np.zeros(2), 0.1, 2.7)
        u = one_step_lq(free, G, sref, R, Q)
        assert solve(prob).inputs[0] == pytest.approx(u, abs=1e-6)


def test_reference_speed_slews():
    sref, mask, kap = reference(ROUTE, 55.0, 10, 0.1, v0=10.0, a_comf=1.0)
    assert np.all(np.diff(sref[:, 3]) <= 0.1 + 1e-12)
    assert sref[-1, 3] > 10.0
    assert mask[-1] == 1.0 and kap[-1] == pytest.approx(1 / 30)
