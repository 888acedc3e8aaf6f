"""Property-based checks of the modules' invariants."""
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from hdv_platoon.config import ScenarioConfig
from hdv_platoon.coordinator import DpConfig, constant_profile, dp_transition, plan_clac
from hdv_platoon.errors import InfeasibleProfileError
from hdv_platoon.metrics import normalize
from hdv_platoon.mpc import HorizonTrajectory, MpcConfig, assemble, build_reference, coast_rollout, solve_problem
from hdv_platoon.road import UPHILL, RoadProfile, classify_steep, synth_flat
from hdv_platoon.safety import accel_envelope, certified_pair, evasive_law, min_safe_gap
from hdv_platoon.vehicle import VehicleParams, VehicleState, advance, drag_coefficient, engine_force_bounds, fuel_flow
from hdv_platoon.verify import _advance_exact, _min_gap_on_step, random_dp_instance

FAST = settings(max_examples=60, deadline=None)
SLOW = settings(max_examples=15, deadline=None)

masses = st.floats(15e3, 65e3)
speeds = st.floats(0.0, 30.0)
grades = st.floats(-0.08, 0.08)


@st.composite
def roads(draw, closed=False):
    n = draw(st.integers(1, 8))
    lengths = draw(st.lists(st.floats(10.0, 500.0), min_size=n, max_size=n))
    g = draw(st.lists(grades, min_size=n, max_size=n))
    if closed:
        lengths.append(draw(st.floats(10.0, 500.0)))
        g.append(-float(np.dot(lengths[:-1], g)) / lengths[-1])
        assume(abs(g[-1]) < 0.2)
    pos = np.concatenate([[0.0], np.cumsum(lengths)])
    alt = np.concatenate([[draw(st.floats(-100, 500))], np.zeros(len(lengths))])
    alt[1:] = alt[0] + np.cumsum(np.array(lengths) * np.array(g))
    return RoadProfile(pos, alt)


@FAST
@given(roads())
def test_altitude_reproduces_samples(road):
    assert np.array_equal(road.altitude(road.positions), road.altitudes)


@FAST
@given(roads(closed=True), masses)
def test_gravity_work_over_closed_loop(road, mass):
    p = VehicleParams(mass=mass)
    L = np.diff(road.positions)
    work = float(np.sum(-p.mass * p.g * np.sin(road.segment_slopes) * L))
    # the altitude secants cancel exactly; what is left is the tan/sin difference of the slope angle
    bound = p.mass * p.g * float(np.sum(np.abs(np.tan(road.segment_slopes) - np.sin(road.segment_slopes)) * L))
    assert abs(work) <= bound + 1e-9 * p.mass * p.g * float(np.sum(L))


@FAST
@given(roads(), masses)
def test_no_power_limited_climbs_at_creeping_speed(road, mass):
    assert not [s for s in classify_steep(road, VehicleParams(mass=mass), 1e-4) if s.kind == UPHILL]


@FAST
@given(masses, st.floats(0.0, 30.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0), grades,
       st.one_of(st.just(math.inf), st.floats(0.0, 100.0)), st.sampled_from([0.01, 0.05, 0.1]))
def test_step_work_energy_balance(mass, v, u_e, u_b, grade, gap, dt):
    p = VehicleParams(mass=mass)
    lo, hi = engine_force_bounds(p, v)
    F_e, F_b = lo + u_e * (hi - lo), -u_b * p.max_brake_force
    x1, f = advance(p, VehicleState(v, 0.0), F_e, F_b, gap, lambda s: math.atan(grade), dt)
    dke = 0.5 * mass * (x1.v**2 - v**2)
    work = f.total * 0.5 * (v + x1.v) * dt
    assert x1.v >= 0
    scale = max(1.0, abs(dke), max(abs(F_e), abs(F_b), mass * p.g) * max(v, 1.0) * dt)
    assert abs(dke - work) <= 1e-9 * scale


@FAST
@given(st.floats(0.0, 1e4), st.floats(0.0, 1e4))
def test_drag_monotone_and_bounded(d1, d2):
    p = VehicleParams()
    lo, hi = sorted((d1, d2))
    c_lo, c_hi = drag_coefficient(p, lo), drag_coefficient(p, hi)
    assert c_lo <= c_hi <= drag_coefficient(p, math.inf) == p.C_D0


@FAST
@given(st.floats(1.0, 30.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_fuel_affine_and_nondecreasing(v, u1, u2):
    p = VehicleParams()
    # region where the clamp at zero is inactive: F_e v >= -p0 / p1
    lo = max(-p.p0 / p.p1, p.P_min)
    pw = sorted(lo + (p.P_max - lo) * u for u in (u1, u2))
    f = [fuel_flow(p, w / v, v) for w in pw]
    assert f[0] <= f[1]
    assert math.isclose(f[0], p.p1 * pw[0] + p.p0, rel_tol=1e-12, abs_tol=1e-12)


@FAST
@given(masses, st.floats(0.05, 0.5), st.floats(0.5, 1.5), st.floats(15.0, 35.0), st.floats(0.0, 0.1),
       st.floats(0.2, 1.0), st.floats(0.3, 1.0))
def test_envelope_ordering(mass, lo_frac, hi_extra, v_max, alpha, eta, mu):
    p = VehicleParams(mass=mass, eta_brake=eta, mu=mu)
    box = (mass * (1 - lo_frac), mass * (1 + hi_extra))
    if eta * mu * p.g <= p.g * math.sin(math.atan(alpha)):
        # brakes that cannot hold the vehicle on the steepest descent leave no stopping guarantee
        with pytest.raises(ValueError):
            accel_envelope(p, v_max, box, alpha)
        return
    env = accel_envelope(p, v_max, box, alpha)
    assert env.a_min_lb <= env.a_min_ub <= 0
    assert env.a_max_lb <= env.a_max_ub


@FAST
@given(speeds, speeds, st.floats(0.0, 5.0), masses, masses)
def test_min_safe_gap_monotone(v1, v2, dv, m_p, m_f):
    env_p = accel_envelope(VehicleParams(mass=m_p), 25.0, None, 0.03)
    env_f = accel_envelope(VehicleParams(mass=m_f), 25.0, None, 0.03)
    assert min_safe_gap(v1, v2, env_p, env_f) <= min_safe_gap(v1, v2 + dv, env_p, env_f)
    assert min_safe_gap(v1 + dv, v2, env_p, env_f) <= min_safe_gap(v1, v2, env_p, env_f)


@SLOW
@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_platoon_chain_survives_leader_braking(n, seed):
    """Every follower on the evasive law keeps its gap while the leader brakes arbitrarily within its envelope."""
    rng = np.random.default_rng(seed)
    platoon = [VehicleParams(mass=float(rng.uniform(20e3, 60e3))) for _ in range(n)]
    v_max = 25.0
    envs = [accel_envelope(p, v_max, (0.8 * p.mass, 1.2 * p.mass), 0.03) for p in platoon]
    assert all(certified_pair(envs[i - 1], envs[i]) for i in range(1, n))
    v = rng.uniform(0.0, v_max, n)
    s = np.zeros(n)
    for i in range(1, n):
        s[i] = s[i - 1] - platoon[i - 1].length - min_safe_gap(v[i - 1], v[i], envs[i - 1], envs[i]) \
            - rng.choice([0.0, rng.exponential(3.0)])
    dt, worst, t = 0.05, math.inf, 0.0
    hold, left = 0.0, 0.0
    while t < 60.0 and np.any(v > 0):
        lo, hi = envs[0].predecessor_range(v[0])
        if left <= 0:
            hold, left = float(rng.uniform(lo, hi)) if rng.random() < 0.5 else lo, float(rng.exponential(2.0))
        acc = [min(max(hold, lo), hi) if v[0] < v_max else min(max(hold, lo), 0.0)]
        acc += [evasive_law(VehicleState(v[i], s[i]), envs[i]) for i in range(1, n)]
        for i in range(1, n):
            worst = min(worst, _min_gap_on_step(s[i - 1] - s[i] - platoon[i - 1].length, v[i - 1], acc[i - 1],
                                                v[i], acc[i], dt))
        for i in range(n):
            v[i], s[i], _ = _advance_exact(v[i], s[i], acc[i], dt)
        left -= dt
        t += dt
    assert worst >= -1e-6


@SLOW
@given(st.integers(0, 2**31 - 1))
def test_dp_profile_revalidates(seed):
    road, platoon, gaps, cfg, v0, term = random_dp_instance(np.random.default_rng(seed), max_cells=8, max_levels=6)
    try:
        prof = plan_clac(platoon, gaps, road, road.start, v0, cfg, terminal_speed=term)
    except InfeasibleProfileError:
        return
    for k in range(1, len(prof.grid)):
        tr = dp_transition(platoon, gaps, prof.v[k - 1], prof.v[k], prof.grid[k], road, cfg.ds, cfg.beta)
        assert tr is not None
        for F_e, F_b, p in zip(tr.F_e, tr.F_b, platoon):
            if F_b < 0:  # braking only once the engine force is at its lower bound
                assert F_e == engine_force_bounds(p, prof.v[k])[0]


@SLOW
@given(st.integers(0, 2**31 - 1), st.lists(st.floats(0.0, 60.0), min_size=2, max_size=5))
def test_average_speed_nondecreasing_in_beta(seed, betas):
    rng = np.random.default_rng(seed)
    n = 12
    g = rng.uniform(-0.05, 0.05, n)
    road = RoadProfile(50.0 * np.arange(n + 1), np.concatenate([[0.0], np.cumsum(50.0 * g)]), ((0.0, 18.0, 24.0),))
    p = VehicleParams()
    avgs = []
    for b in sorted(betas):
        avgs.append(plan_clac((p, p), (1.4,), road, 0.0, 21.0, DpConfig(horizon_cells=n, beta=b, speed_levels=13))
                    .average_speed())
    assert np.all(np.diff(avgs) >= -1e-12)


@SLOW
@given(st.floats(19.0, 23.5), st.floats(0.0, 10.0), st.floats(0.0, 1.0), st.booleans())
def test_safety_row_feasible_next_tick(v_f, extra, u, brakes):
    """From a state in the safe set, the tick after the predecessor keeps to its plan or brakes within its
    envelope is again solvable with the hard safety constraint."""
    p = VehicleParams()
    road = synth_flat(5000, ((0.0, 0.01, 23.6),))
    env = accel_envelope(p, 24.6, None, 0.0)
    cfg = MpcConfig(horizon=15)
    prof = constant_profile(0, 5000, 22.0, (1.4,))
    s_f = 100.0
    pred0 = VehicleState(22.0, s_f + p.length + min_safe_gap(22.0, v_f, env, env) + extra)
    pred_plan = coast_rollout(pred0, 0.0, _longer(cfg), k=-1)
    x = VehicleState(v_f, s_f)
    out = solve_problem(assemble(p, x, build_reference(prof, s_f, cfg), pred_plan, 14, (env, env), road, cfg,
                                 pred_length=p.length), cfg)
    # one tick later: the follower moved with its input; the predecessor followed its plan or braked
    v1, s1, _ = _advance_exact(x.v, x.s, out.a_star, cfg.dt)
    pv, ps = pred_plan.state_at(0)
    lo, _ = env.predecessor_range(pv)
    a_p = lo + u * (0.0 - lo) if brakes else 0.0
    pv1, ps1, _ = _advance_exact(pv, ps, a_p, cfg.dt)
    # a manual brake restarts the assumed trajectory from the measured state
    pred_next = coast_rollout(VehicleState(pv1, ps1), 0.0, _longer(cfg), k=1) if brakes else pred_plan
    if brakes:
        pred_next = _prepend(pred_plan, pred_next)
    x1 = VehicleState(v1, s1)
    nxt = solve_problem(assemble(p, x1, build_reference(prof, s1, cfg, k=1), pred_next, 14, (env, env), road, cfg,
                                 pred_length=p.length, k=1), cfg, k=1)
    assert nxt.safety_margin_min >= -1e-6


def _longer(cfg):
    return replace(cfg, horizon=cfg.horizon + 20)


def _prepend(old, new):
    """Trajectory equal to ``old`` up to ``new.k0`` and to ``new`` afterwards."""
    keep = new.k0 - old.k0
    v = np.concatenate([old.v[:keep], new.v])
    s = np.concatenate([old.s[:keep], new.s])
    return HorizonTrajectory(v, s, np.diff(v) / new.dt, "assumed", old.k0, new.dt)


@FAST
@given(st.lists(st.floats(0.1, 1e4), min_size=1, max_size=5), st.floats(1e-3, 1e3), st.floats(0.5, 2.0))
def test_normalize_is_scale_free(base, scale, ratio):
    base = np.array(base)
    fuel = base * ratio
    np.testing.assert_allclose(normalize(fuel * scale, base * scale), normalize(fuel, base), rtol=1e-12)


@FAST
@given(masses, st.floats(0.5, 3.0), st.floats(15.0, 25.0), st.sampled_from(["CC", "LAC", "CLAC"]),
       st.floats(0.0, 50.0), st.integers(5, 40))
def test_config_round_trip(mass, tau, v0, strategy, beta, horizon):
    raw = {"road": {"kind": "flat", "length_m": 2000}, "platoon": [{}, {"mass_kg": mass}], "strategy": strategy,
           "gap_policy": {"kind": "TG", "time_gap_s": tau}, "mode": "ideal_tracking", "initial_speed_mps": v0,
           "dp": {"beta_gps": beta}, "mpc": {"horizon": horizon}}
    cfg = ScenarioConfig.from_dict(raw)
    again = ScenarioConfig.from_dict(json.loads(cfg.to_json()))
    assert again.data == cfg.data and again.to_json() == cfg.to_json()
