import math

import numpy as np
import pytest

from hdv_platoon.safety import (AccelEnvelope, accel_envelope, boundary_derivatives, certified_pair, evasive_law,
                                min_safe_gap, nagumo_check, safety_margins, stopping_distance)
from hdv_platoon.vehicle import VehicleParams, VehicleState
from hdv_platoon.verify import safety_invariance_suite, safety_run


def test_envelope_collapsed_box():
    p = VehicleParams()
    env = accel_envelope(p, 0.0, None, 0.0)
    expected = -p.mu * p.eta_brake * p.g - p.c_r * p.g
    assert env.a_min_lb == pytest.approx(expected) and env.a_min_ub == pytest.approx(expected)


def test_envelope_corner_values():
    p = VehicleParams()
    env = accel_envelope(p, 25.0, (40000, 40000), 0.05)
    drag = 0.5 * 1.225 * 10 * 0.6 * 625 / 40000
    lb = -(0.5 * 9.81 + 9.81 * math.sin(0.05) + 3e-3 * 9.81 + drag)
    ub = -0.5 * 9.81 + 9.81 * math.sin(0.05) - 3e-3 * 9.81
    assert env.a_min_lb == pytest.approx(lb, rel=1e-12)
    assert env.a_min_ub == pytest.approx(ub, rel=1e-12)
    assert env.a_min_lb == pytest.approx(-5.48, abs=0.005)
    assert env.a_min_ub == pytest.approx(-4.44, abs=0.005)


def test_envelope_matches_dense_search():
    p = VehicleParams()
    env = accel_envelope(p, 24.0, (30000, 50000), 0.04)
    from hdv_platoon.safety import _a_max, _a_min
    vals_min, vals_max = [], []
    for v in np.linspace(0, 24, 13):
        for m in np.linspace(30000, 50000, 5):
            for a in np.linspace(-0.04, 0.04, 5):
                for d in (0.0, 5.0, 50.0, math.inf):
                    vals_min.append(_a_min(p, v, m, a, d))
                    vals_max.append(_a_max(p, v, m, a, d))
    assert env.a_min_lb <= min(vals_min) + 1e-12 and env.a_min_ub >= max(vals_min) - 1e-12
    assert env.a_max_lb <= min(vals_max) + 1e-12 and env.a_max_ub >= max(vals_max) - 1e-12
    assert env.a_min_lb == pytest.approx(min(vals_min)) and env.a_min_ub == pytest.approx(max(vals_min))


def test_envelope_ordering_validation():
    with pytest.raises(ValueError):
        AccelEnvelope(-1.0, -2.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        accel_envelope(VehicleParams(), 20.0, None, math.pi / 2)


def test_margins_examples():
    env = AccelEnvelope(-5.0, -5.0, -0.1, 1.0)
    m = safety_margins(VehicleState(20.0, 100.0), VehicleState(20.0, 70.0), 18.0, env, env)
    assert m.g1 == pytest.approx(12.0) and m.g2 == pytest.approx(12.0)
    env_f = AccelEnvelope(-7.0, -6.0, -0.1, 1.0)
    m = safety_margins(VehicleState(0.0, 100.0), VehicleState(20.0, 40.0), 18.0, env, env_f)
    assert m.g1 == pytest.approx(42.0 - 400 / 12)
    m = safety_margins(VehicleState(10.0, 100.0), VehicleState(0.0, 80.0), 18.0, env, env)
    assert m.g4 == 0.0 and m.in_set()


def test_min_safe_gap_examples():
    env = AccelEnvelope(-5.0, -4.0, -0.1, 1.0)
    assert min_safe_gap(20.0, 20.0, env, env) == pytest.approx(20**2 / 8 - 20**2 / 10)
    same = AccelEnvelope(-5.0, -5.0, -0.1, 1.0)
    assert min_safe_gap(22.0, 22.0, same, same) == 0.0
    e_p = AccelEnvelope(-5.48, -5.0, -0.1, 1.0)
    e_f = AccelEnvelope(-5.5, -4.44, -0.1, 1.0)
    assert min_safe_gap(22.0, 22.0, e_p, e_f) == pytest.approx(22**2 / 8.88 - 22**2 / 10.96)
    assert min_safe_gap(22.0, 22.0, e_p, e_f) == pytest.approx(10.35, abs=0.01)
    assert min_safe_gap(22.0, 0.0, e_p, e_f) == 0.0
    assert stopping_distance(10.0, -5.0) == pytest.approx(10.0)


def test_evasive_law_cases():
    env = AccelEnvelope(-5.0, -4.0, -0.1, 1.0)
    assert evasive_law(VehicleState(10.0, 0.0), env) == -4.0
    assert evasive_law(VehicleState(0.0, 0.0), env) == 0.0
    assert evasive_law(VehicleState(1e-9, 0.0), env) == -4.0


def test_nagumo_cases():
    e_p = AccelEnvelope(-5.5, -5.0, -0.1, 1.0)
    e_f = AccelEnvelope(-5.2, -4.5, -0.1, 1.0)
    # g1 = 0 at a positive gap
    gap = min_safe_gap(15.0, 25.0, e_p, e_f)
    x_p, x_f = VehicleState(15.0, gap + 18.0), VehicleState(25.0, 0.0)
    for a_p in np.linspace(e_p.a_min_lb, e_p.a_max_ub, 9):
        assert nagumo_check(x_p, x_f, 18.0, e_p, e_f, float(a_p))
        d1 = boundary_derivatives(x_p, x_f, e_p, e_f, float(a_p), e_f.a_min_ub)[0]
        assert d1 == pytest.approx((1 - a_p / e_p.a_min_lb) * 15.0)
    # predecessor stopped: it may only accelerate
    assert nagumo_check(VehicleState(0.0, 100.0), VehicleState(0.0, 50.0), 18.0, e_p, e_f, 0.5)
    with pytest.raises(ValueError):
        nagumo_check(VehicleState(0.0, 100.0), VehicleState(0.0, 50.0), 18.0, e_p, e_f, -1.0)
    # g2 = 0 with g1 >= 0 forces v_p >= v_f when the pair is certified
    x_p, x_f = VehicleState(10.0, 18.0), VehicleState(9.0, 0.0)
    assert nagumo_check(x_p, x_f, 18.0, e_p, e_f, e_p.a_min_lb)
    with pytest.raises(ValueError):
        nagumo_check(VehicleState(20, 200), VehicleState(20, 0), 18.0, e_p, e_f, 0.0)


def test_min_safe_gap_monotone():
    env = AccelEnvelope(-5.5, -4.5, -0.1, 1.0)
    v = np.linspace(0, 25, 26)
    assert all(min_safe_gap(10, a, env, env) <= min_safe_gap(10, b, env, env) for a, b in zip(v, v[1:]))
    assert all(min_safe_gap(a, 10, env, env) >= min_safe_gap(b, 10, env, env) for a, b in zip(v, v[1:]))


def test_identical_vehicles_are_certified():
    p = VehicleParams()
    env = accel_envelope(p, 24.6, None, 0.05)
    assert certified_pair(env, env)


def test_uncertified_pair_can_collide():
    # a follower that brakes harder than its predecessor ever can closes the gap before the stop
    rng = np.random.default_rng(0)
    assert min(safety_run(rng, certified=False) for _ in range(300)) < -0.1


def test_invariance_small_suite():
    rep = safety_invariance_suite(200, seed=7)
    assert rep.passed, rep.failures[:3]
