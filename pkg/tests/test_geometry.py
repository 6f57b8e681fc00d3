import math

import pytest

from roundabout_dmpc.geometry import (GeometryError, NotApplicableError, RoundaboutLayout, Route,
                                      annulus_bounds, arc_to_cartesian, distance_to_merge,
                                      project_to_z, radial_distance, wrap_angle)

LAYOUT = RoundaboutLayout()


def test_arc_origin_point():
    x, y, th = arc_to_cartesian(0.0, LAYOUT)
    assert (x, y, th) == pytest.approx((30.0, 0.0, math.pi / 2))


def test_arc_quarter_turn():
    x, y, th = arc_to_cartesian(LAYOUT.circumference / 4, LAYOUT)
    assert x == pytest.approx(0.0, abs=1e-12)
    assert y == pytest.approx(30.0)
    assert th == pytest.approx(math.pi)


@pytest.mark.parametrize("s", [-1.0, 2 * math.pi * 30, math.nan])
def test_arc_out_of_range(s):
    with pytest.raises(GeometryError):
        arc_to_cartesian(s, LAYOUT)


def test_segments_match_merge_spacing():
    assert LAYOUT.segment_lengths == pytest.approx((20 * math.pi,) * 3)
    assert LAYOUT.segment_of(0.0) == 0
    assert LAYOUT.segment_of(70.0) == 1
    assert LAYOUT.segment_of(LAYOUT.circumference - 1e-6) == 2


def test_z_at_merge_point_is_zero():
    r = Route(0, 1, LAYOUT)
    assert project_to_z(r, r.ramp_length, 0).z == 0.0
    assert distance_to_merge(r, r.ramp_length, 0) == 0.0


def test_ramp_vehicle_25m_upstream():
    r = Route(1, 2, LAYOUT)
    assert project_to_z(r, r.ramp_length - 25.0, 1).z == pytest.approx(-25.0)
    assert distance_to_merge(r, r.ramp_length - 25.0, 1) == pytest.approx(25.0)


def test_ramp_ahead_of_ring_vehicle_on_shared_axis():
    ramp = Route(1, 0, LAYOUT)
    ring = Route(0, 2, LAYOUT)
    off = ring.merge_offset(1)
    z_ring = project_to_z(ring, ring.ramp_length + off - 40.0, 1).z
    z_ramp = project_to_z(ramp, ramp.ramp_length - 25.0, 1).z
    assert z_ramp > z_ring


def test_half_ring_away():
    r = Route(0, 0, LAYOUT)  # full loop, crosses merge 2 two segments after entering
    off = r.merge_offset(2)
    p = r.ramp_length + off - math.pi * 30
    assert r.piece(p) == "ring"
    assert distance_to_merge(r, p, 2) == pytest.approx(94.2478, abs=1e-4)


def test_route_not_through_merge_point():
    r = Route(0, 1, LAYOUT)  # leaves before reaching merge 1
    assert not r.passes(1)
    with pytest.raises(NotApplicableError):
        project_to_z(r, 10.0, 1)


def test_route_points_continuous():
    for e in range(3):
        for x in range(3):
            if x == e:
                continue
            r = Route(e, x, LAYOUT)
            prev = r.point(0.0)
            p = 0.0
            while p < r.length:
                p += 0.5
                pt = r.point(p)
                assert math.hypot(pt.x - prev.x, pt.y - prev.y) <= 0.5 + 1e-9
                prev = pt


def test_ring_points_on_circle():
    r = Route(2, 1, LAYOUT)
    lo, hi = annulus_bounds(LAYOUT)
    p = r.ring_start
    while p < r.ring_end:
        pt = r.point(p)
        assert radial_distance(pt.x, pt.y, LAYOUT) == pytest.approx(30.0)
        assert lo <= radial_distance(pt.x, pt.y, LAYOUT) <= hi
        p += 1.0


def test_project_inverts_point():
    r = Route(0, 2, LAYOUT)
    for p in (5.0, 59.0, 61.0, 100.0, r.ring_end + 5.0):
        pt = r.point(p)
        assert r.project(pt.x, pt.y, p) == pytest.approx(p, abs=1e-9)


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


def test_bad_layouts_rejected():
    with pytest.raises(GeometryError):
        RoundaboutLayout(ring_radius=0)
    with pytest.raises(GeometryError):
        RoundaboutLayout(exit_offset=100.0)
