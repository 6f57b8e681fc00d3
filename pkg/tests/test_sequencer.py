import itertools
import math

import numpy as np
import pytest

from roundabout_dmpc.sequencer import (RAMP, RING, PlatoonSnapshot, SequenceError,
                                       SequenceMatrix, SequenceObjectiveWeights,
                                       deviation_indicators, density_terms, is_feasible,
                                       objective, solve_sequence, spacing_deviation,
                                       travel_time_estimate)

from oracles import brute_force, feasible_orders, random_platoon, sequence_cost


def test_identity_feasible():
    for n in range(1, 7):
        assert is_feasible(SequenceMatrix.identity(n))


def test_zero_row_infeasible():
    c = np.eye(3, dtype=int)
    c[1] = 0
    assert not is_feasible(c)


def test_swap_violates_precedence():
    assert not is_feasible(np.array([[0, 1], [1, 0]]))
    # rows from different streams may interleave freely
    assert is_feasible(np.array([[0, 1], [1, 0]]), streams=(RING, RAMP))


def test_non_square_rejected():
    with pytest.raises(SequenceError):
        is_feasible(np.ones((2, 3)))
    with pytest.raises(SequenceError):
        SequenceMatrix(np.ones((2, 3)))


def test_feasible_count_is_binomial():
    rng = np.random.default_rng(0)
    for n in range(1, 7):
        for _ in range(5):
            streams = [int(s) for s in rng.integers(0, 2, n)]
            k = sum(streams)
            count = sum(is_feasible(SequenceMatrix.from_order(p), streams)
                        for p in itertools.permutations(range(n)))
            assert count == math.comb(n, k)
            assert count == sum(1 for _ in feasible_orders(n, streams))


def _pair(gap, v=(15.0, 15.0)):
    return PlatoonSnapshot(ids=(1, 2), z=np.array([-10.0, -10.0 - gap]), v=np.array(v))


@pytest.mark.parametrize("gap,expected", [(10.0, 0.0), (15.0, 5.0), (6.0, -4.0)])
def test_spacing_deviation(gap, expected):
    assert spacing_deviation(SequenceMatrix.identity(2), _pair(gap), 0) == pytest.approx(expected)


def test_spacing_deviation_slot_range():
    with pytest.raises(SequenceError):
        spacing_deviation(SequenceMatrix.identity(2), _pair(10.0), 1)


def test_indicator_examples():
    y_dd, y_v, chi = deviation_indicators([-3.0], [10.0, 10.0])
    assert y_dd[0] == 1 and y_v[0] == 0
    y_dd, y_v, chi = deviation_indicators([-3.0], [12.0, 10.0])
    assert (y_dd[0], y_v[0], chi[0]) == (1, 1, 0)
    y_dd, y_v, chi = deviation_indicators([-3.0], [10.0, 12.0])
    assert (y_dd[0], y_v[0], chi[0]) == (1, -1, 2)
    y_dd, _, _ = deviation_indicators([0.0], [1.0, 1.0])
    assert y_dd[0] == 0


def test_indicator_second_subtraction_switch():
    # a deviation of +5 is positive once but negative after subtracting 10 again
    assert deviation_indicators([5.0], [1.0, 1.0])[0][0] == -1
    assert deviation_indicators([5.0], [1.0, 1.0], 10.0, subtract_twice=True)[0][0] == 1


def test_travel_past_merge_has_no_wait():
    snap = PlatoonSnapshot(ids=(1,), z=np.array([3.0]), v=np.array([15.0]),
                           d_after=np.array([30.0]))
    tt = travel_time_estimate(0, SequenceMatrix.identity(1), snap)
    assert tt.t_delay == 0.0 and tt.t_merge_exit == pytest.approx(2.0)


def test_travel_first_slot():
    snap = PlatoonSnapshot(ids=(1,), z=np.array([-60.0]), v=np.array([10.0]))
    tt = travel_time_estimate(0, SequenceMatrix.identity(1), snap)
    assert (tt.t_entry_merge, tt.t_delay) == pytest.approx((6.0, 0.0))


def test_travel_behind_two_ring_vehicles():
    # two ring vehicles reach the merge together with the ramp vehicle (6 s out)
    snap = PlatoonSnapshot(ids=(1, 2, 3), z=np.array([-90.0, -90.0, -60.0]),
                           v=np.array([15.0, 15.0, 10.0]), stream=(RING, RING, RAMP))
    tt = travel_time_estimate(2, SequenceMatrix.identity(3), snap)
    assert tt.t_entry_merge == pytest.approx(6.0)
    assert tt.t_delay == pytest.approx(2 * 10 / 15)
    assert tt.t_travel == pytest.approx(6.0 + 4 / 3)


def test_density_examples():
    rho, _, _ = density_terms([6], [60.0])
    assert rho[0] == pytest.approx(0.1)
    _, _, psi = density_terms([4, 4, 4], [60.0] * 3)
    assert np.all(psi == 0)
    rho, rho_bar, psi = density_terms([6, 3, 3], [60.0] * 3)
    assert rho_bar == pytest.approx(1 / 15)
    assert psi == pytest.approx([1 / 30, 1 / 60, 1 / 60])
    # tight solution of the absolute-value linearisation
    assert np.all(psi >= rho - rho_bar - 1e-15) and np.all(psi >= rho_bar - rho - 1e-15)
    assert np.all(np.isclose(psi, rho - rho_bar) | np.isclose(psi, rho_bar - rho))


def test_objective_single_segment_travel_only():
    snap = PlatoonSnapshot(ids=(1, 2), z=np.array([-10.0, -20.0]), v=np.array([15.0, 15.0]),
                           dd_star=10.0)
    w = SequenceObjectiveWeights(subtract_twice=False)
    # exact spacing and equal speeds leave only the travel term
    travel = (10 / 15 + 20 / 15) / 2
    assert objective(SequenceMatrix.identity(2), snap, w) == pytest.approx(0.5 * travel)


def test_objective_weights_only_density_uniform():
    snap = PlatoonSnapshot(ids=(1, 2), z=np.array([-10.0, -30.0]), v=np.array([15.0, 15.0]),
                           seg_lengths=np.array([60.0, 60.0]), n0=np.array([2.0, 2.0]))
    w = SequenceObjectiveWeights(0.0, 0.0, 0.0, 10.0)
    assert objective(SequenceMatrix.identity(2), snap, w) == 0.0


def test_two_vehicle_instance_against_enumeration():
    z, v = np.array([-10.0, -25.0]), np.array([15.0, 10.0])
    streams = (RING, RAMP)
    snap = PlatoonSnapshot(ids=(0, 1), z=z, v=v, stream=streams, dd_star=10.0)
    w = SequenceObjectiveWeights()
    kw = dict(dd_star=10.0, v_ref=15.0, v_floor=2.0, d_after=np.zeros(2), seg_lengths=[60.0],
              n0=[0.0], segment=0, window=2.0, a1=1, a2=1, a3=0.5, a4=10, B=1, M=1)
    for order in ((0, 1), (1, 0)):
        C = SequenceMatrix.from_order(order)
        assert objective(C, snap, w) == pytest.approx(sequence_cost(order, z, v, streams, **kw),
                                                      abs=1e-12)
    best, order = brute_force(2, z, v, streams, **kw)
    res = solve_sequence(snap, w)
    assert res.cost == pytest.approx(best, abs=1e-9)
    assert tuple(res.matrix.order()) == order


def test_objective_rejects_infeasible():
    snap = _pair(10.0)
    with pytest.raises(SequenceError):
        objective(SequenceMatrix.from_order((1, 0)), snap)


def test_single_vehicle():
    res = solve_sequence(PlatoonSnapshot(ids=(4,), z=np.array([-20.0]), v=np.array([10.0])))
    assert res.matrix.c.tolist() == [[1]] and res.order == [4]


def test_close_ring_vehicle_goes_first():
    snap = PlatoonSnapshot(ids=(0, 1), z=np.array([-5.0, -40.0]), v=np.array([15.0, 10.0]),
                           stream=(RING, RAMP), v_floor=np.array([15.0, 10.0]))
    assert solve_sequence(snap).order == [0, 1]


def test_branch_and_bound_matches_enumeration():
    rng = np.random.default_rng(21)
    for _ in range(60):
        n = int(rng.integers(3, 7))
        snap_kw, w_kw, oracle_kw, streams = random_platoon(rng, n)
        snap = PlatoonSnapshot(**snap_kw)
        res = solve_sequence(snap, SequenceObjectiveWeights(**w_kw))
        best, order = brute_force(n, snap.z, snap.v, streams, **oracle_kw)
        assert res.cost == pytest.approx(best, abs=1e-9)
        assert tuple(res.matrix.order()) == order
        assert is_feasible(res.matrix, streams)


def test_precedence_pins_and_prefix():
    rng = np.random.default_rng(5)
    for _ in range(20):
        snap_kw, w_kw, oracle_kw, streams = random_platoon(rng, 5)
        rows = [r for r in range(5) if streams[r] == RAMP]
        others = [r for r in range(5) if streams[r] == RING]
        if not rows or not others:
            continue
        prec = ((others[-1], rows[0]),)
        snap = PlatoonSnapshot(**snap_kw, precedence=prec, prefix=(others[0],))
        res = solve_sequence(snap, SequenceObjectiveWeights(**w_kw))
        best, order = brute_force(5, snap.z, snap.v, streams, precedence=prec,
                                  prefix=(others[0],), **oracle_kw)
        assert res.cost == pytest.approx(best, abs=1e-9)
        assert tuple(res.matrix.order()) == order


def test_over_cap_falls_back_to_greedy():
    n = 10
    z = -np.arange(n) * 7.0
    snap = PlatoonSnapshot(ids=tuple(range(n)), z=z, v=np.full(n, 12.0),
                           stream=tuple(i % 2 for i in range(n)))
    res = solve_sequence(snap)
    assert res.degraded
    assert res.order == list(range(n))
    assert is_feasible(res.matrix, snap.stream)


def test_bad_snapshot_values():
    with pytest.raises(SequenceError):
        PlatoonSnapshot(ids=(1,), z=[0.0], v=[1.0], dd_star=0.0)
    with pytest.raises(SequenceError):
        SequenceObjectiveWeights(0, 0, 0, 0)
    with pytest.raises(SequenceError):
        SequenceObjectiveWeights(alpha1=-1)
