import io
import math

import numpy as np
import pytest

from hdv_platoon.errors import DomainError, RoadParseError, RoadValidationError
from hdv_platoon.road import (DOWNHILL, UPHILL, RoadProfile, classify_steep, dump_road, load_road, slope_at,
                              steep_fraction, synth_flat, synth_hill, synth_ramp, synth_random_hilly)
from hdv_platoon.vehicle import VehicleParams


def test_load_two_row_ramp():
    road = load_road("s_m,altitude_m,vmin_mps,vmax_mps\n0,0,19,23.6\n1000,10,,\n")
    assert road.length == 1000.0
    assert slope_at(road, 0.0) == pytest.approx(math.atan(10 / 1000), abs=1e-15)
    assert slope_at(road, 999.0) == pytest.approx(math.atan(0.01), abs=1e-15)
    assert road.limits(500.0) == (19.0, 23.6)


def test_duplicate_position_is_rejected():
    with pytest.raises(RoadValidationError):
        load_road("s_m,altitude_m\n0,0\n500,1\n500,2\n1000,3\n")


def test_malformed_row_names_line():
    with pytest.raises(RoadParseError) as exc:
        load_road("s_m,altitude_m\n0,0\n10,abc\n")
    assert exc.value.line == 3


def test_positions_rebased_and_default_limits():
    road = load_road("s_m,altitude_m\n200,5\n300,6\n")
    assert road.start == 0.0 and road.end == 100.0
    assert road.limits(50.0) == (19.0, 23.6)


def test_limit_columns_take_effect_from_their_row():
    road = load_road("s_m,altitude_m,vmin_mps,vmax_mps\n0,0,19,23.6\n100,0,10,15\n200,0,,\n")
    assert road.limits(99.9) == (19.0, 23.6)
    assert road.limits(100.0) == (10.0, 15.0)
    assert road.limits(200.0) == (10.0, 15.0)


def test_long_file_round_trip_at_samples():
    rng = np.random.default_rng(3)
    s = np.arange(0, 45001, 1.0)
    h = np.cumsum(rng.normal(0, 0.02, len(s)))
    text = "s_m,altitude_m\n" + "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in zip(s, h))
    road = load_road(text)
    assert road.length == 45000.0
    idx = rng.integers(0, len(s), 500)
    np.testing.assert_array_equal(road.altitude(s[idx]), h[idx])
    # continuity of the interpolated altitude across sample points
    mid = s[1:-1]
    np.testing.assert_allclose(road.altitude(mid - 1e-9), road.altitude(mid), atol=1e-9)


def test_slope_outside_domain():
    road = synth_flat(100)
    with pytest.raises(DomainError):
        slope_at(road, 100.5)
    with pytest.raises(DomainError):
        road.altitude(-1.0)


def test_flat_and_ramp_slopes():
    assert slope_at(synth_flat(1000), 321.0) == 0.0
    ramp = synth_ramp(1000, 10)
    expected = math.atan(10 / 1000)  # derivative of the linear altitude
    assert all(slope_at(ramp, s) == pytest.approx(expected, rel=1e-12) for s in (0, 250, 999.9))
    assert expected == pytest.approx(0.0100, abs=1e-4)


def test_hill_sections():
    assert synth_hill(100, 0, 0.03, 0, 0, -0.03, 0).length == 100.0
    assert synth_hill(100, 0, 0.03, 0, 0, -0.03, 0).max_abs_slope() == 0.0
    sym = synth_hill(0, 1000, 0.03, 0, 1000, -0.03, 0)
    assert sym.altitude(sym.end) == pytest.approx(sym.altitude(0.0), abs=1e-9)
    hill = synth_hill(0, 1000, 0.04, 500, 0, 0.0, 0)
    assert hill.altitude(1250.0) == pytest.approx(1000 * 0.04)
    assert slope_at(synth_hill(200, 1000, 0.04, 500, 1000, -0.04, 200), 200 + 1000 + 250) == 0.0


def test_classify_steep_examples():
    p = VehicleParams()
    assert classify_steep(synth_flat(5000), p, 22.0) == []
    up = classify_steep(synth_ramp(2000, 100), p, 22.0)
    assert [(s.start, s.end, s.kind) for s in up] == [(0.0, 2000.0, UPHILL)]
    down = classify_steep(synth_ramp(2000, -100), p, 22.0)
    assert [(s.start, s.end, s.kind) for s in down] == [(0.0, 2000.0, DOWNHILL)]
    # independent check of the uphill corner: gravity power alone exceeds P_max
    assert p.mass * p.g * math.sin(math.atan(0.05)) * 22 > p.P_max


def test_classify_steep_vanishing_speed_has_no_uphill():
    road = synth_hill(100, 500, 0.08, 100, 500, -0.08, 100)
    segs = classify_steep(road, VehicleParams(), 1e-3)
    assert not [s for s in segs if s.kind == UPHILL]


def test_segments_sorted_and_disjoint():
    road = synth_random_hilly(12000, 4)
    segs = classify_steep(road, VehicleParams(), 22.0)
    for a, b in zip(segs, segs[1:]):
        assert a.start < a.end <= b.start


def test_random_hilly_hits_target_fraction():
    p = VehicleParams()
    for seed in (1, 2, 3):
        road = synth_random_hilly(15000, seed, 0.23, p, 22.0)
        assert abs(steep_fraction(road, p, 22.0) - 0.23) <= 0.03


def test_random_hilly_is_deterministic():
    a, b = synth_random_hilly(8000, 11), synth_random_hilly(8000, 11)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.altitudes, b.altitudes)


def test_dump_load_round_trip():
    road = synth_hill(1000, 600, 0.035, 300, 600, -0.02, 1000, limits=((0.0, 19.0, 23.6), (1500.0, 15.0, 20.0)))
    buf = io.StringIO()
    dump_road(road, buf)
    back = load_road(buf.getvalue())
    grid = np.linspace(0, road.end, 997)
    np.testing.assert_allclose(back.altitude(grid), road.altitude(grid), atol=1e-9)
    assert back.speed_limits == road.speed_limits


def test_invalid_limits():
    with pytest.raises(RoadValidationError):
        RoadProfile(np.array([0.0, 1.0]), np.array([0.0, 0.0]), ((0.0, 20.0, 10.0),))
