"""Platoon speed-profile planning by dynamic programming over space.

One speed profile over position is computed for the whole platoon. Vehicle
``i`` follows it with time gap ``tau_i``, so it reaches every position at the
same speed as its predecessor did ``tau_i`` seconds earlier. The per-cell
model is an implicit Euler step in space,

    m v_to (v_to - v_from) / ds = F_e + F_b + F_ext(v_to, slope, gap)

and the stage cost is fuel (affine in engine work and travel time) plus
``beta`` times the travel time.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, TextIO

import numpy as np

from .errors import InfeasibleProfileError, TuningError
from .road import RoadProfile
from .vehicle import STANDSTILL_ACCEL, VehicleParams, VehicleState, engine_force_bounds, external_force


@dataclass(frozen=True)
class DpConfig:
    ds: float = 50.0  # m
    horizon_cells: int = 100  # 5 km
    speed_levels: int = 41
    beta: float = 0.0  # g/s
    replan_distance: float = 220.0  # m, about 10 s at cruise speed
    replan_deviation: float = 1.0  # m/s

    def __post_init__(self):
        if not self.ds > 0:
            raise ValueError("DpConfig.ds must be > 0")
        if self.horizon_cells < 1:
            raise ValueError("DpConfig.horizon_cells must be >= 1")
        if self.speed_levels < 2:
            raise ValueError("DpConfig.speed_levels must be >= 2")
        if self.beta < 0:
            raise ValueError("DpConfig.beta must be >= 0")


@dataclass(frozen=True, eq=False)
class SpeedProfile:
    """Planned speed at uniformly spaced positions, shared by all vehicles.

    ``F_e`` and ``F_b`` have one row per vehicle; column ``k`` holds the
    forces of the cell ending at ``grid[k]`` (column 0 is NaN).
    """

    grid: np.ndarray
    v: np.ndarray
    time_gaps: tuple = ()
    F_e: np.ndarray | None = None
    F_b: np.ndarray | None = None
    cost: float = math.nan
    beta: float = 0.0

    @property
    def start(self) -> float:
        return float(self.grid[0])

    @property
    def end(self) -> float:
        return float(self.grid[-1])

    def covers(self, s: float) -> bool:
        return self.start <= s <= self.end

    def speed_at(self, s):
        """Linear interpolation in space; constant beyond either end."""
        out = np.interp(s, self.grid, self.v)
        return float(out) if np.ndim(out) == 0 else out

    def average_speed(self) -> float:
        """Distance over travel time, with cell times ``ds / v_to``."""
        ds = np.diff(self.grid)
        return float(np.sum(ds) / np.sum(ds / self.v[1:]))

    def write_csv(self, out: TextIO) -> None:
        n_veh = 0 if self.F_e is None else self.F_e.shape[0]
        header = ["z_m", "v_mps"] + [f"Fe_{i + 1}_N" for i in range(n_veh)] + [f"Fb_{i + 1}_N" for i in range(n_veh)]
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for k, (z, v) in enumerate(zip(self.grid, self.v)):
            row = [repr(float(z)), repr(float(v))]
            if n_veh:
                forces = list(self.F_e[:, k]) + list(self.F_b[:, k])
                row += ["" if math.isnan(f) else repr(float(f)) for f in forces]
            writer.writerow(row)


def constant_profile(start: float, end: float, v: float, time_gaps: Sequence[float] = (), ds: float = 50.0) -> SpeedProfile:
    n = max(1, int(math.ceil((end - start) / ds)))
    grid = start + ds * np.arange(n + 1)
    return SpeedProfile(grid, np.full(n + 1, float(v)), tuple(time_gaps))


@dataclass(frozen=True)
class Transition:
    cost: float
    F_e: tuple
    F_b: tuple


def _planning_gaps(platoon: Sequence[VehicleParams], time_gaps: Sequence[float], v_to):
    """Planned gap of each vehicle at speed ``v_to``; the leader sees an infinite gap."""
    if len(time_gaps) != len(platoon) - 1:
        raise ValueError(f"need {len(platoon) - 1} time gaps for {len(platoon)} vehicles, got {len(time_gaps)}")
    gaps = [np.full(np.shape(v_to), math.inf)]
    for i in range(1, len(platoon)):
        gaps.append(v_to * time_gaps[i - 1] - platoon[i - 1].length)
    return gaps


def _transition_arrays(platoon, time_gaps, v_from, v_to, slope: float, ds: float, beta: float):
    """Stage cost and force split for arrays of (v_from, v_to) pairs.

    Infeasible pairs get cost ``inf``. Both the DP and the scalar
    :func:`dp_transition` go through this function, so their arithmetic is
    identical.
    """
    v_from = np.asarray(v_from, dtype=float)
    v_to = np.asarray(v_to, dtype=float)
    v_from, v_to = np.broadcast_arrays(v_from, v_to)
    gaps = _planning_gaps(platoon, time_gaps, v_to)
    cost = np.zeros(v_to.shape)
    feasible = np.ones(v_to.shape, dtype=bool)
    F_es, F_bs = [], []
    for p, gap in zip(platoon, gaps):
        ok_gap = gap > 0
        safe_gap = np.where(ok_gap, gap, math.inf)
        required = p.mass * v_to * (v_to - v_from) / ds - external_force(p, v_to, safe_gap, slope)
        cap = p.mass * STANDSTILL_ACCEL
        hi = np.minimum(p.P_max / v_to, cap)
        lo = np.maximum(p.P_min / v_to, -cap)
        F_e = np.clip(required, lo, hi)
        F_b = np.minimum(required - lo, 0.0)
        feasible &= ok_gap & (required <= hi) & (F_b >= -p.max_brake_force)
        cost = cost + ds * (p.p1 * F_e + p.p0 / v_to)
        F_es.append(F_e)
        F_bs.append(F_b)
    cost = cost + beta * ds / v_to
    return np.where(feasible, cost, math.inf), np.array(F_es), np.array(F_bs)


def dp_transition(platoon: Sequence[VehicleParams], time_gaps: Sequence[float], v_from: float, v_to: float,
                  z: float, road: RoadProfile, ds: float, beta: float = 0.0) -> Transition | None:
    """Cost [g] and forces of moving from ``v_from`` to ``v_to`` over the cell ending at ``z``.

    Returns ``None`` when some vehicle cannot realize the transition.
    """
    if v_from <= 0 or v_to <= 0:
        raise ValueError("dp_transition needs positive speeds")
    slope = road.cell_slope(z - ds, z)
    cost, F_e, F_b = _transition_arrays(platoon, time_gaps, [v_from], [v_to], slope, ds, beta)
    if not np.isfinite(cost[0]):
        return None
    return Transition(float(cost[0]), tuple(F_e[:, 0].tolist()), tuple(F_b[:, 0].tolist()))


def terminal_credit(platoon: Sequence[VehicleParams], v):
    """Fuel-equivalent value of the kinetic energy left at the horizon end (negative)."""
    credit = np.zeros(np.shape(v))
    for p in platoon:
        credit = credit - p.p1 * p.mass * np.square(v) / 2
    return credit


@dataclass(frozen=True, eq=False)
class DpGrid:
    """Positions, speed levels and the per-position admissible-level mask."""

    z: np.ndarray
    levels: np.ndarray
    allowed: np.ndarray  # (n_points, n_levels)
    slopes: np.ndarray  # slope of the cell ending at z[k]; slopes[0] unused

    @property
    def n_cells(self) -> int:
        return len(self.z) - 1


def build_grid(road: RoadProfile, start_pos: float, cfg: DpConfig, n_cells: int | None = None) -> DpGrid:
    available = int(math.floor((road.end - start_pos) / cfg.ds + 1e-9))
    n = min(cfg.horizon_cells, available) if n_cells is None else n_cells
    if n < 1 or start_pos + n * cfg.ds > road.end + 1e-9 or start_pos < road.start:
        raise ValueError(f"planning window starting at {start_pos:g} m does not fit the road")
    z = start_pos + cfg.ds * np.arange(n + 1)
    vmin, vmax = road.limits(np.minimum(z, road.end))
    levels = np.linspace(float(np.min(vmin)), float(np.max(vmax)), cfg.speed_levels)
    eps = 1e-9
    allowed = (levels[None, :] >= vmin[:, None] - eps) & (levels[None, :] <= vmax[:, None] + eps)
    slopes = np.zeros(n + 1)
    for k in range(1, n + 1):
        slopes[k] = road.cell_slope(z[k] - cfg.ds, z[k])
    return DpGrid(z, levels, allowed, slopes)


def _terminal_values(platoon, grid: DpGrid, terminal_speed: float | None) -> np.ndarray:
    allowed = grid.allowed[-1].copy()
    if terminal_speed is not None:
        idx = np.flatnonzero(allowed)
        if len(idx):
            keep = idx[np.argmin(np.abs(grid.levels[idx] - terminal_speed))]
            allowed[:] = False
            allowed[keep] = True
    return np.where(allowed, terminal_credit(platoon, grid.levels), math.inf)


def plan_clac(platoon: Sequence[VehicleParams], time_gaps: Sequence[float], road: RoadProfile,
              start_pos: float, start_speed: float, cfg: DpConfig = DpConfig(),
              terminal_speed: float | None = None, grid: DpGrid | None = None) -> SpeedProfile:
    """Cost-optimal common speed profile by backward induction.

    The start speed is an extra node outside the level grid and is not
    checked against the speed limits. ``terminal_speed`` optionally pins the
    final speed to the nearest admissible level.
    """
    if start_speed <= 0:
        raise ValueError("start speed must be > 0")
    grid = grid or build_grid(road, start_pos, cfg)
    n, L = grid.n_cells, len(grid.levels)
    lv = grid.levels
    value = _terminal_values(platoon, grid, terminal_speed)
    choice = np.zeros((n, L), dtype=int)
    for k in range(n - 1, 0, -1):
        stage, _, _ = _transition_arrays(platoon, time_gaps, lv[:, None], lv[None, :], grid.slopes[k + 1], cfg.ds, cfg.beta)
        total = stage + value[None, :]
        total[~grid.allowed[k], :] = math.inf
        best = np.min(total, axis=1)
        # ties go to the highest destination speed
        choice[k] = L - 1 - np.argmin(total[:, ::-1], axis=1)
        value = best
    stage0, _, _ = _transition_arrays(platoon, time_gaps, np.full(L, float(start_speed)), lv, grid.slopes[1], cfg.ds, cfg.beta)
    total0 = stage0 + value
    if not np.isfinite(np.min(total0)):
        cell = _first_blocking_cell(platoon, time_gaps, grid, start_speed, cfg, terminal_speed)
        raise InfeasibleProfileError(cell, float(grid.z[cell]))
    j = L - 1 - int(np.argmin(total0[::-1]))
    path = [j]
    for k in range(1, n):
        path.append(int(choice[k, path[-1]]))
    v = np.concatenate([[float(start_speed)], lv[path]])
    F_e = np.full((len(platoon), n + 1), math.nan)
    F_b = np.full((len(platoon), n + 1), math.nan)
    for k in range(1, n + 1):
        _, fe, fb = _transition_arrays(platoon, time_gaps, [v[k - 1]], [v[k]], grid.slopes[k], cfg.ds, cfg.beta)
        F_e[:, k], F_b[:, k] = fe[:, 0], fb[:, 0]
    return SpeedProfile(grid.z.copy(), v, tuple(time_gaps), F_e, F_b, float(total0[j]), cfg.beta)


def _first_blocking_cell(platoon, time_gaps, grid: DpGrid, start_speed, cfg, terminal_speed) -> int:
    lv = grid.levels
    reach = np.zeros(len(lv), dtype=bool)
    stage, _, _ = _transition_arrays(platoon, time_gaps, np.full(len(lv), float(start_speed)), lv, grid.slopes[1], cfg.ds, cfg.beta)
    reach = np.isfinite(stage) & grid.allowed[1]
    if not reach.any():
        return 1
    for k in range(2, grid.n_cells + 1):
        stage, _, _ = _transition_arrays(platoon, time_gaps, lv[:, None], lv[None, :], grid.slopes[k], cfg.ds, cfg.beta)
        nxt = np.any(np.isfinite(stage) & reach[:, None], axis=0) & grid.allowed[k]
        if not nxt.any():
            return k
        reach = nxt
    return grid.n_cells  # only the terminal-speed pin is unreachable


def plan_lac(vehicle: VehicleParams, road: RoadProfile, start_pos: float, start_speed: float,
             cfg: DpConfig = DpConfig(), terminal_speed: float | None = None) -> SpeedProfile:
    """Single-vehicle look-ahead plan (no drag reduction)."""
    return plan_clac([vehicle], (), road, start_pos, start_speed, cfg, terminal_speed)


def profile_cost(platoon, time_gaps, road: RoadProfile, profile: SpeedProfile, cfg: DpConfig) -> float:
    """Objective of a given profile, summed from the back like the DP does."""
    total = float(terminal_credit(platoon, profile.v[-1]))
    for k in range(len(profile.grid) - 1, 0, -1):
        tr = dp_transition(platoon, time_gaps, profile.v[k - 1], profile.v[k], profile.grid[k], road, cfg.ds, cfg.beta)
        if tr is None:
            return math.inf
        total = tr.cost + total
    return total


def cc_command(v_set: float, state: VehicleState, params: VehicleParams, gap: float, slope: float,
               v_max: float = math.inf, dt: float | None = None) -> tuple[float, float]:
    """Rule-based cruise control: hold ``v_set``, coast when too fast, brake only at ``v_max``.

    With ``dt`` the engine aims to reach ``v_set`` within one step, otherwise
    it balances the external forces. Braking happens only when the vehicle
    would otherwise exceed ``v_max`` after the step.
    """
    F_ext = float(external_force(params, state.v, gap, slope))
    lo, hi = engine_force_bounds(params, state.v)
    if dt is None:
        wanted = -F_ext if state.v <= v_set else lo
        F_e = min(max(wanted, lo), hi)
        F_b = 0.0
        if state.v >= v_max:
            F_b = min(0.0, -F_ext - F_e)
    else:
        F_e = min(max(params.mass * (v_set - state.v) / dt - F_ext, lo), hi)
        v_next = state.v + dt * (F_e + F_ext) / params.mass
        F_b = min(0.0, params.mass * (v_max - state.v) / dt - F_ext - F_e) if v_next > v_max else 0.0
    return F_e, max(F_b, -params.max_brake_force)


@dataclass
class TuneResult:
    beta: float
    avg_speed: float
    profile: SpeedProfile
    evaluations: int


PlannerFn = Callable[..., SpeedProfile]


def tune_beta(planner: PlannerFn, road: RoadProfile, platoon: Sequence[VehicleParams], target_avg_speed: float,
              tol: float = 0.01, *, time_gaps: Sequence[float] = (), start_pos: float = 0.0,
              start_speed: float | None = None, cfg: DpConfig = DpConfig(), max_expand: int = 40,
              max_bisect: int = 80, **plan_kwargs) -> TuneResult:
    """Bisect on ``beta`` until the planned average speed is within ``tol`` of the target.

    ``planner`` has the signature of :func:`plan_clac`.
    """
    if start_speed is None:
        start_speed = target_avg_speed
    evals = 0
    seen: list[tuple[float, float]] = []

    def run(beta):
        nonlocal evals
        evals += 1
        prof = planner(platoon, time_gaps, road, start_pos, start_speed, _with_beta(cfg, beta), **plan_kwargs)
        avg = prof.average_speed()
        seen.append((beta, avg))
        return prof, avg

    lo, (p_lo, a_lo) = 0.0, run(0.0)
    if abs(a_lo - target_avg_speed) <= tol:
        return TuneResult(0.0, a_lo, p_lo, evals)
    if a_lo > target_avg_speed:
        raise TuningError(f"target {target_avg_speed} below the beta = 0 average {a_lo:.4f}")
    hi = 1.0
    for _ in range(max_expand):
        p_hi, a_hi = run(hi)
        if abs(a_hi - target_avg_speed) <= tol:
            return TuneResult(hi, a_hi, p_hi, evals)
        if a_hi > target_avg_speed:
            break
        lo, hi = hi, hi * 2
    else:
        raise TuningError(f"no beta up to {hi:g} reaches {target_avg_speed}; tried {seen}")
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        p_mid, a_mid = run(mid)
        if abs(a_mid - target_avg_speed) <= tol:
            return TuneResult(mid, a_mid, p_mid, evals)
        if a_mid < target_avg_speed:
            lo = mid
        else:
            hi = mid
    raise TuningError(f"bisection did not converge to {target_avg_speed} +- {tol}; last evaluations {seen[-6:]}")


def _with_beta(cfg: DpConfig, beta: float) -> DpConfig:
    return replace(cfg, beta=beta)


@dataclass
class RecedingPlanner:
    """Replans the platoon profile as the platoon advances.

    A new plan starts at the last multiple of ``ds`` (counted from the road
    start) at or behind the rearmost vehicle, so every vehicle is covered and
    the cells stay on one fixed lattice from plan to plan. A replan is
    triggered by distance travelled since the last plan, by a speed deviation
    of any vehicle from the current profile, or by the horizon end coming
    into view.
    """

    platoon: Sequence[VehicleParams]
    time_gaps: Sequence[float]
    road: RoadProfile
    cfg: DpConfig = field(default_factory=DpConfig)
    lac: bool = False
    profile: SpeedProfile | None = None
    plans: int = 0
    _planned_at: float = -math.inf

    def _plan(self, s: float, v: float) -> SpeedProfile:
        if self.lac:
            return plan_lac(self.platoon[0], self.road, s, v, self.cfg)
        return plan_clac(self.platoon, self.time_gaps, self.road, s, v, self.cfg)

    def update(self, positions: Sequence[float], speeds: Sequence[float]) -> SpeedProfile:
        rear = int(np.argmin(positions))
        s_rear, v_rear = float(positions[rear]), max(float(speeds[rear]), 0.5)
        lead = float(np.max(positions))
        room = self.road.end - s_rear
        if room < self.cfg.ds:
            if self.profile is None:
                raise ValueError("road too short to plan")
            return self.profile
        due = self.profile is None or s_rear - self._planned_at >= self.cfg.replan_distance
        if self.profile is not None and not due:
            dev = max(abs(v - self.profile.speed_at(s)) for s, v in zip(positions, speeds))
            horizon_short = lead > self.profile.end - 0.25 * (self.profile.end - self.profile.start)
            due = dev > self.cfg.replan_deviation or (horizon_short and self.profile.end < self.road.end - 1e-6)
        if due:
            ds = self.cfg.ds
            s_plan = self.road.start + ds * math.floor((s_rear - self.road.start) / ds + 1e-9)
            self.profile = self._plan(s_plan, v_rear)
            self._planned_at = s_rear
            self.plans += 1
        return self.profile
