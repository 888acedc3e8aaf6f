"""Randomized self-checks: DP against exhaustive enumeration, and invariance of the safety set."""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .coordinator import DpConfig, _transition_arrays, build_grid, plan_clac, terminal_credit
from .errors import InfeasibleProfileError
from .road import RoadProfile
from .safety import AccelEnvelope, accel_envelope, certified_pair, evasive_law, min_safe_gap
from .vehicle import VehicleParams, VehicleState


@dataclass
class SuiteReport:
    name: str
    runs: int
    failures: list = field(default_factory=list)
    seconds: float = 0.0
    worst: float = math.nan  # suite-specific worst-case statistic

    @property
    def passed(self) -> bool:
        return not self.failures

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.runs} runs, {len(self.failures)} failures, worst {self.worst:.3g}, {self.seconds:.2f} s"


# --------------------------------------------------------------------------- DP oracle

def random_dp_instance(rng: np.random.Generator, max_cells: int = 6, max_levels: int = 5, max_vehicles: int = 3):
    """A small random planning problem: road, platoon, time gaps, config, start speed, optional pinned end speed."""
    n_cells = int(rng.integers(1, max_cells + 1))
    ds = float(rng.choice([25.0, 50.0, 100.0]))
    grades = rng.uniform(-0.06, 0.06, n_cells)
    pos = ds * np.arange(n_cells + 1)
    alt = np.concatenate([[0.0], np.cumsum(grades * ds)])
    v_lo = float(rng.uniform(15.0, 21.0))
    v_hi = v_lo + float(rng.uniform(0.5, 6.0))
    limits = [(0.0, v_lo, v_hi)]
    if n_cells > 1 and rng.random() < 0.5:
        cut = float(pos[rng.integers(1, n_cells)])
        lo2 = float(rng.uniform(15.0, v_hi))
        limits.append((cut, lo2, max(lo2, v_hi - float(rng.uniform(0, 3)))))
    road = RoadProfile(pos, alt, tuple(limits))
    n_veh = int(rng.integers(1, max_vehicles + 1))
    platoon = tuple(VehicleParams(mass=float(rng.uniform(20e3, 60e3))) for _ in range(n_veh))
    gaps = tuple(float(rng.uniform(0.8, 2.0)) for _ in range(n_veh - 1))
    cfg = DpConfig(ds=ds, horizon_cells=n_cells, speed_levels=int(rng.integers(2, max_levels + 1)),
                   beta=float(rng.choice([0.0, rng.uniform(0, 5)])))
    start_speed = float(rng.uniform(v_lo - 1.0, v_hi + 1.0))
    terminal = float(rng.uniform(v_lo, v_hi)) if rng.random() < 0.3 else None
    return road, platoon, gaps, cfg, start_speed, terminal


def enumerate_best_cost(platoon, time_gaps, road: RoadProfile, start_speed: float, cfg: DpConfig,
                        terminal_speed: float | None = None) -> float:
    """Minimum cost over every level sequence, summed from the back like the recursion does."""
    grid = build_grid(road, road.start, cfg)
    lv, n, L = grid.levels, grid.n_cells, len(grid.levels)
    end_ok = grid.allowed[-1].copy()
    if terminal_speed is not None:
        idx = np.flatnonzero(end_ok)
        if len(idx):
            end_ok[:] = False
            end_ok[idx[np.argmin(np.abs(lv[idx] - terminal_speed))]] = True
    paths = np.array(list(itertools.product(range(L), repeat=n)), dtype=int)  # level index at z[1..n]
    ok = end_ok[paths[:, -1]].copy()
    for k in range(1, n):
        ok &= grid.allowed[k][paths[:, k - 1]]
    total = terminal_credit(platoon, lv[paths[:, -1]])
    for k in range(n, 0, -1):
        v_from = np.full(len(paths), float(start_speed)) if k == 1 else lv[paths[:, k - 2]]
        stage, _, _ = _transition_arrays(platoon, time_gaps, v_from, lv[paths[:, k - 1]], grid.slopes[k], cfg.ds, cfg.beta)
        total = stage + total
    total = np.where(ok, total, math.inf)
    return float(np.min(total))


def dp_oracle_suite(n: int = 200, seed: int = 0) -> SuiteReport:
    """Compare the DP optimum with brute force on ``n`` random instances; equality must be exact."""
    rng = np.random.default_rng(seed)
    report = SuiteReport("dp-oracle", n)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(n):
        road, platoon, gaps, cfg, v0, term = random_dp_instance(rng)
        brute = enumerate_best_cost(platoon, gaps, road, v0, cfg, term)
        try:
            dp = plan_clac(platoon, gaps, road, road.start, v0, cfg, terminal_speed=term).cost
        except InfeasibleProfileError:
            dp = math.inf
        if dp != brute:
            report.failures.append((i, dp, brute))
            if math.isfinite(dp) and math.isfinite(brute):
                worst = max(worst, abs(dp - brute))
            else:
                worst = math.inf
    report.seconds = time.perf_counter() - t0
    report.worst = worst
    return report


# --------------------------------------------------------------------------- safety invariance

def _advance_exact(v: float, s: float, a: float, dt: float) -> tuple[float, float, float]:
    """Constant acceleration for ``dt``, halting at zero speed; returns (v, s, time of stop or inf)."""
    if a < 0 and v + a * dt <= 0:
        t_stop = v / -a if v > 0 else 0.0
        return 0.0, s + v * t_stop + 0.5 * a * t_stop**2, t_stop
    return v + a * dt, s + v * dt + 0.5 * a * dt**2, math.inf


def _min_gap_on_step(gap0: float, vp: float, ap: float, vf: float, af: float, dt: float) -> float:
    """Exact minimum over ``[0, dt]`` of a gap whose two ends move with constant accelerations until they stop."""
    tp = vp / -ap if ap < 0 and vp + ap * dt <= 0 else math.inf
    tf = vf / -af if af < 0 and vf + af * dt <= 0 else math.inf
    if vp == 0 and ap <= 0:
        tp = 0.0
    if vf == 0 and af <= 0:
        tf = 0.0

    def pos(v, a, t_stop, t):
        t = min(t, t_stop)
        return v * t + 0.5 * a * t**2

    def rel_speed(t):
        up = 0.0 if t >= tp else vp + ap * t
        uf = 0.0 if t >= tf else vf + af * t
        return up - uf

    cands = {0.0, dt, min(tp, dt), min(tf, dt)}
    knots = sorted(c for c in cands if 0 <= c <= dt)
    for t0, t1 in zip(knots, knots[1:]):
        # relative speed is linear on each piece; its root is a stationary point of the gap
        r0, r1 = rel_speed(t0 + 1e-15), rel_speed(t1 - 1e-15)
        if r0 < 0 < r1 or r1 < 0 < r0:
            cands.add(t0 + (t1 - t0) * r0 / (r0 - r1))
    return min(gap0 + pos(vp, ap, tp, t) - pos(vf, af, tf, t) for t in cands)


def random_pair(rng: np.random.Generator, certified: bool = True):
    """Two random vehicles with their envelopes and the common top speed.

    With ``certified`` the draw is repeated until :func:`certified_pair` holds.
    """
    while True:
        p = VehicleParams(mass=float(rng.uniform(20e3, 60e3)), eta_brake=float(rng.uniform(0.3, 0.9)))
        f = VehicleParams(mass=float(rng.uniform(20e3, 60e3)), eta_brake=float(rng.uniform(0.3, 0.9)))
        v_max = float(rng.uniform(15.0, 30.0))
        alpha = float(rng.uniform(0.0, 0.06))
        env_p = accel_envelope(p, v_max, (0.8 * p.mass, 1.2 * p.mass), alpha)
        env_f = accel_envelope(f, v_max, (0.8 * f.mass, 1.2 * f.mass), alpha)
        if not certified or certified_pair(env_p, env_f):
            return p, f, env_p, env_f, v_max


def safety_run(rng: np.random.Generator, dt: float = 0.05, horizon: float = 60.0, certified: bool = True) -> float:
    """One adversarial run from a random state in the safety set; returns the minimum gap reached."""
    p, f, env_p, env_f, v_max = random_pair(rng, certified)
    vp, vf = rng.uniform(0.0, v_max, 2)
    slack = 0.0 if rng.random() < 0.4 else float(rng.exponential(5.0))
    gap = min_safe_gap(vp, vf, env_p, env_f) + slack
    sp, sf = gap + p.length, 0.0
    lowest = gap
    a_hold, hold_left = 0.0, 0.0
    t = 0.0
    while t < horizon and (vp > 0 or vf > 0 or a_hold > 0):
        lo, hi = env_p.predecessor_range(vp)
        if hold_left <= 0:
            mode = rng.random()
            a_hold = lo if mode < 0.4 else hi if mode < 0.6 else float(rng.uniform(lo, hi))
            hold_left = float(rng.exponential(2.0))
        ap = min(max(a_hold, lo), hi)
        if vp >= v_max and ap > 0:
            ap = 0.0  # the envelope is only valid up to v_max
        af = evasive_law(VehicleState(vf, sf), env_f)
        lowest = min(lowest, _min_gap_on_step(sp - sf - p.length, vp, ap, vf, af, dt))
        vp, sp, _ = _advance_exact(vp, sp, ap, dt)
        vp = min(vp, v_max)
        vf, sf, _ = _advance_exact(vf, sf, af, dt)
        hold_left -= dt
        t += dt
        if vf == 0 and ap <= 0:
            break
    return lowest


def safety_invariance_suite(n: int = 1000, seed: int = 0, tol: float = 1e-6) -> SuiteReport:
    """Follower on the evasive law, predecessor adversarial within its envelope; the gap must stay >= -tol."""
    rng = np.random.default_rng(seed)
    report = SuiteReport("safety-invariance", n)
    t0 = time.perf_counter()
    worst = math.inf
    for i in range(n):
        g = safety_run(rng)
        worst = min(worst, g)
        if g < -tol:
            report.failures.append((i, g))
    report.seconds = time.perf_counter() - t0
    report.worst = worst
    return report
