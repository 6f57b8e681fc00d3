import numpy as np
import pytest

from roundabout_dmpc.comms import (DelayChannel, DelayModel, FusedNeighborView, TopologyError,
                                   delay_indicator, effective_input, fuse, predict_state,
                                   predict_state_linear)
from roundabout_dmpc.dynamics import ControlInput, VehicleState, step


@pytest.mark.parametrize("k_d,expected", [(0, 1), (3, 1), (4, 0)])
def test_delay_indicator_boundary(k_d, expected):
    assert delay_indicator(k_d, 3) == expected


def test_predict_fixed_point_and_hand_value():
    s = VehicleState(1, 2.0, 3.0, 0.5, 0.0)
    assert predict_state(s, ControlInput(), 0.1).as_array() == pytest.approx(s.as_array())
    s = VehicleState(1, 0.0, 0.0, 0.0, 10.0)
    assert predict_state(s, ControlInput(), 0.1).x == pytest.approx(1.0)


def test_linear_and_nonlinear_prediction_agree_to_first_order():
    s = VehicleState(1, 0.0, 0.0, 0.3, 10.0)
    u = ControlInput(1.0, 0.05)
    nl = predict_state(s, u, 0.1).as_array()
    lin = predict_state_linear(s, u, 0.1)
    lin = lin.as_array() if hasattr(lin, "as_array") else np.asarray(lin)[:4]
    assert np.allclose(nl, lin, atol=1e-3)


def test_prediction_error_bounded_by_input_change():
    s = VehicleState(1, 0.0, 0.0, 0.0, 10.0)
    u_old, u_new = ControlInput(0.0, 0.0), ControlInput(2.0, 0.0)
    err = np.abs(step(s, u_new, 0.1).as_array() - predict_state(s, u_old, 0.1).as_array())
    assert err[3] == pytest.approx(0.1 * 2.0)
    assert err[:3].max() == pytest.approx(0.0)


def test_fuse_selects_without_blending():
    a, b = object(), object()
    assert fuse(1, a, b) is a and fuse(0, a, b) is b
    assert effective_input(1, a, b) is a and effective_input(0, a, b) is b


def _state(i, x=0.0, v=10.0):
    return VehicleState(i, x, 0.0, 0.0, v)


def test_zero_delay_same_tick_delivery():
    ch = DelayChannel(DelayModel(0, 0), t_th=2)
    for n in (1, 2):
        ch.add_node(n)
    ch.broadcast(1, 5, _state(1), ControlInput())
    msgs = ch.poll(2, 5)
    assert len(msgs) == 1 and msgs[0].delay == 0
    assert ch.mean_delay() == 0.0


def test_fixed_two_tick_mean_delay():
    ch = DelayChannel(DelayModel(2, 2), dt=0.1)
    for n in (1, 2):
        ch.add_node(n)
    for k in range(20):
        ch.broadcast(1, k, _state(1), ControlInput())
        ch.poll(2, k)
    assert ch.mean_delay() == pytest.approx(0.2)


def test_uniform_delay_mean_converges():
    # sends spaced by the delay spread, so FIFO ordering never holds a message back
    ch = DelayChannel(DelayModel(1, 3), dt=0.1, seed=4, window=10_000)
    for n in (1, 2):
        ch.add_node(n)
    for k in range(0, 30_000, 3):
        ch.broadcast(1, k, _state(1), ControlInput())
        ch.poll(2, k)
    ch.poll(2, 30_010)
    assert ch.mean_delay(10_000) == pytest.approx(0.2, abs=0.01)


def test_fifo_lengthens_back_to_back_delays():
    ch = DelayChannel(DelayModel(1, 3), dt=0.1, seed=4, window=10_000)
    for n in (1, 2):
        ch.add_node(n)
    for k in range(10_000):
        ch.broadcast(1, k, _state(1), ControlInput())
        ch.poll(2, k)
    tau = ch.mean_delay(10_000)
    assert 0.2 < tau < 0.3


def test_fifo_per_link_and_no_loss():
    ch = DelayChannel(DelayModel(1, 3), seed=1)
    for n in (1, 2):
        ch.add_node(n)
    got = []
    for k in range(300):
        ch.broadcast(1, k, _state(1, x=float(k)), ControlInput())
        got.extend(m.sent_at for m in ch.poll(2, k))
    for k in range(300, 310):
        got.extend(m.sent_at for m in ch.poll(2, k))
    assert got == list(range(300))


def test_poll_returns_only_due_messages():
    ch = DelayChannel(DelayModel(3, 3))
    for n in (1, 2):
        ch.add_node(n)
    ch.broadcast(1, 0, _state(1), ControlInput())
    assert ch.poll(2, 2) == []
    assert len(ch.poll(2, 3)) == 1
    assert ch.poll(2, 4) == []


def test_unknown_node():
    ch = DelayChannel()
    with pytest.raises(TopologyError):
        ch.poll(9, 0)
    with pytest.raises(TopologyError):
        ch.remove_node(9)


def test_explicit_topology():
    ch = DelayChannel(complete=False)
    for n in (1, 2, 3):
        ch.add_node(n)
    ch.add_link(1, 2, 0.5)
    assert ch.weight(1, 2) == 0.5 and ch.weight(2, 1) == 0.0
    assert not ch.is_connected()
    ch.add_link(3, 2)
    assert ch.is_connected()
    with pytest.raises(ValueError):
        ch.add_link(1, 3, -1.0)


def test_trace_dump(tmp_path):
    ch = DelayChannel(DelayModel(1, 1), record_trace=True)
    for n in (1, 2):
        ch.add_node(n)
    ch.broadcast(1, 0, _state(1), ControlInput())
    ch.poll(2, 1)
    path = tmp_path / "trace.csv"
    ch.dump_trace(path)
    assert path.read_text().splitlines() == ["tick,sender,receiver,sent_at,deliver_at",
                                             "1,1,2,0,1"]


def _view_after(ages, t_th=2):
    """Fused view of one sender whose only message is ``age`` ticks old."""
    view = FusedNeighborView(t_th, 0.1)
    ch = DelayChannel(DelayModel(0, 0))
    for n in (1, 2):
        ch.add_node(n)
    ch.broadcast(1, 0, _state(1, v=10.0), ControlInput(1.0, 0.0))
    view.ingest(ch.poll(2, 0))
    return [view.get(1, a) for a in ages]


def test_fresh_message_is_truth():
    info, = _view_after([2])
    assert info.delta == 1
    assert info.state.x == 0.0


def test_stale_message_chains_predictions():
    one, two = _view_after([3, 4])
    assert one.delta == 0 and two.delta == 0
    s = _state(1, v=10.0)
    p1 = predict_state(s, ControlInput(1.0, 0.0), 0.1)
    p2 = predict_state(p1, ControlInput(1.0, 0.0), 0.1)
    assert one.state.as_array() == pytest.approx(p1.as_array())
    assert two.state.as_array() == pytest.approx(p2.as_array())


def test_constant_input_prediction_is_exact():
    # the sender keeps its input, so the chained estimate equals the true state
    s = _state(1, v=10.0)
    u = ControlInput(1.0, 0.1)
    truth = s
    for _ in range(4):
        truth = step(truth, u, 0.1)
    view = FusedNeighborView(0, 0.1)
    ch = DelayChannel(DelayModel(0, 0))
    for n in (1, 2):
        ch.add_node(n)
    ch.broadcast(1, 0, s, u)
    view.ingest(ch.poll(2, 0))
    assert view.get(1, 4).state.as_array() == pytest.approx(truth.as_array(), abs=1e-12)


def test_uncompensated_view_returns_raw_message():
    view = FusedNeighborView(0, 0.1, compensate=False)
    ch = DelayChannel(DelayModel(0, 0))
    for n in (1, 2):
        ch.add_node(n)
    ch.broadcast(1, 0, _state(1), ControlInput(1.0, 0.0))
    view.ingest(ch.poll(2, 0))
    assert view.get(1, 5).state.x == 0.0
