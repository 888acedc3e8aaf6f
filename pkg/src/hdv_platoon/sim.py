"""Scenario engine: closed-loop platoon simulation and ideal-tracking analysis.

Logs are columnar: every per-vehicle quantity is an array of shape
``(n_samples, n_vehicles)`` sampled at the plant step. Forces in row ``n``
act over the step from ``t[n]`` to ``t[n + 1]``; the last row holds NaN.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence, TextIO

import numpy as np

from .coordinator import (DpConfig, RecedingPlanner, SpeedProfile, cc_command, constant_profile, plan_clac,
                          plan_lac)
from .mpc import MpcConfig, MpcOutput, build_assumed, build_reference, coasting_accel, gap_steps, solve_step
from .road import RoadProfile
from .safety import AccelEnvelope, accel_envelope, certified_pair, safety_margins
from .vehicle import (VehicleParams, VehicleState, advance, engine_force_bounds, external_force, split_force)

STRATEGIES = ("CC", "LAC", "CLAC")
GAP_KINDS = ("TG", "HG", "SG")
MODES = ("closed_loop", "ideal_tracking")
STANDSTILL_V = 1e-6  # m/s; below this the holding brake engages
LAUNCH_ACCEL = 1e-3  # m/s^2; smallest command that releases the holding brake (above solver noise)


@dataclass(frozen=True)
class GapPolicy:
    """``TG``: time gap [s]; ``HG``: headway gap, distance = value * own speed; ``SG``: fixed distance [m]."""

    kind: str = "TG"
    value: float = 1.4

    def __post_init__(self):
        if self.kind not in GAP_KINDS:
            raise ValueError(f"unknown gap policy {self.kind!r}")
        if not self.value > 0:
            raise ValueError("gap policy parameter must be > 0")

    def steady_gap(self, v: float, pred_length: float) -> float:
        """Bumper-to-bumper distance at constant speed ``v``."""
        if self.kind == "TG":
            return v * self.value - pred_length
        if self.kind == "HG":
            return v * self.value
        return self.value

    def planning_time_gap(self, v: float, pred_length: float) -> float:
        """Time gap the coordinator should assume for this policy at speed ``v``."""
        return (self.steady_gap(v, pred_length) + pred_length) / v


def equal_distance_policies(v_bar: float, tau_tg: float, pred_length: float) -> dict[str, GapPolicy]:
    """SG, HG and TG policies with the same distance when cruising at ``v_bar``."""
    d = v_bar * tau_tg - pred_length
    if d <= 0:
        raise ValueError("time gap too short for the vehicle length")
    return {"TG": GapPolicy("TG", tau_tg), "HG": GapPolicy("HG", d / v_bar), "SG": GapPolicy("SG", d)}


@dataclass(frozen=True)
class LeaderEvent:
    """Manual braking of the leader; ``duration=None`` brakes until standstill and holds it."""

    t_start: float
    decel: float  # m/s^2, positive
    duration: float | None = None

    def active(self, t: float) -> bool:
        if t < self.t_start - 1e-12:
            return False
        return self.duration is None or t < self.t_start + self.duration - 1e-12


@dataclass
class Scenario:
    road: RoadProfile
    platoon: tuple
    strategy: str = "CLAC"
    gap_policy: GapPolicy = field(default_factory=GapPolicy)
    mode: str = "closed_loop"
    v0: float = 22.0
    v_set: float | None = None  # cruise-control set speed, defaults to v0
    leader_events: tuple = ()
    duration: float | None = None  # closed loop: simulated time [s]
    dp: DpConfig = field(default_factory=DpConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    plant_dt: float = 0.05
    integrator: str = "euler"
    rear_start: float = 0.0  # initial position of the last vehicle
    profile: SpeedProfile | None = None  # fixed profile; disables replanning
    terminal_speed: float | None = None  # ideal mode: pinned final planned speed (defaults to v0)
    envelope_speed_margin: float = 1.0  # m/s above the highest speed limit
    stop_after_standstill: float | None = None  # closed loop: end this long after all vehicles stop
    seed: int = 0

    def __post_init__(self):
        self.platoon = tuple(self.platoon)
        if not self.platoon:
            raise ValueError("platoon must contain at least one vehicle")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        ratio = self.mpc.dt / self.plant_dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("MPC dt must be an integer multiple of the plant dt")
        if self.mode == "closed_loop" and self.gap_policy.kind != "TG":
            raise ValueError("closed-loop control implements the time-gap policy only")
        if self.mode == "closed_loop":
            envs = self.envelopes()
            for i in range(1, self.n):
                if not certified_pair(envs[i - 1], envs[i]):
                    raise ValueError(f"vehicle {i} can brake harder than its predecessor's worst case; "
                                     "the safety set is not invariant for this pair")

    @property
    def n(self) -> int:
        return len(self.platoon)

    @property
    def cruise_speed(self) -> float:
        return self.v_set if self.v_set is not None else self.v0

    def time_gaps(self) -> tuple:
        """Per-follower time gaps used by the coordinator."""
        return tuple(self.gap_policy.planning_time_gap(self.v0, self.platoon[i - 1].length) for i in range(1, self.n))

    def initial_positions(self) -> np.ndarray:
        pos = [self.rear_start]
        for i in range(self.n - 1, 0, -1):
            pos.append(pos[-1] + self.gap_policy.steady_gap(self.v0, self.platoon[i - 1].length) + self.platoon[i - 1].length)
        return np.array(pos[::-1])

    def envelopes(self) -> list[AccelEnvelope]:
        v_top = max(lim[2] for lim in self.road.speed_limits) + self.envelope_speed_margin
        alpha = self.road.max_abs_slope()
        return [accel_envelope(p, v_top, None, alpha) for p in self.platoon]


LOG_FIELDS = ("s", "v", "a", "F_e", "F_b", "F_g", "F_r", "F_d", "gap", "fuel_flow",
              "g1", "g2", "g3", "g4", "brake_flag", "slack", "a_star", "coast_accel", "margin_now", "margin_min")


@dataclass(eq=False)
class TrajectoryLog:
    t: np.ndarray
    s: np.ndarray
    v: np.ndarray
    a: np.ndarray
    F_e: np.ndarray
    F_b: np.ndarray
    F_g: np.ndarray
    F_r: np.ndarray
    F_d: np.ndarray
    gap: np.ndarray
    fuel_flow: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    g4: np.ndarray
    brake_flag: np.ndarray
    slack: np.ndarray
    a_star: np.ndarray
    coast_accel: np.ndarray
    margin_now: np.ndarray
    margin_min: np.ndarray
    platoon: tuple = ()
    dt: float = 0.05
    meta: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, n_samples: int, platoon, dt: float, meta=None) -> "TrajectoryLog":
        arrays = {name: np.full((n_samples, len(platoon)), np.nan) for name in LOG_FIELDS}
        return cls(t=np.arange(n_samples) * dt, platoon=tuple(platoon), dt=dt, meta=dict(meta or {}), **arrays)

    def truncate(self, n_samples: int) -> "TrajectoryLog":
        arrays = {name: getattr(self, name)[:n_samples] for name in LOG_FIELDS}
        return replace(self, t=self.t[:n_samples], **arrays)

    @property
    def n_vehicles(self) -> int:
        return self.s.shape[1]

    def min_gap(self) -> float:
        if self.n_vehicles < 2:
            return math.inf
        return float(np.nanmin(self.gap[:, 1:]))

    def write_csv(self, out: TextIO) -> None:
        """One row per (sample, vehicle): ``t, vehicle`` followed by :data:`LOG_FIELDS`."""
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["t", "vehicle", *LOG_FIELDS])
        cols = [getattr(self, name) for name in LOG_FIELDS]
        for n in range(len(self.t)):
            for i in range(self.n_vehicles):
                writer.writerow([repr(float(self.t[n])), i, *(_fmt(c[n, i]) for c in cols)])


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def _slopes(road: RoadProfile, s: np.ndarray) -> np.ndarray:
    inside = (s >= road.start) & (s <= road.end)
    return np.where(inside, road.slope(np.clip(s, road.start, road.end)), 0.0)


def _fill_margins(log: TrajectoryLog, envs: Sequence[AccelEnvelope], rows=slice(None)) -> None:
    for i in range(1, log.n_vehicles):
        l_p = log.platoon[i - 1].length
        vp, vf = log.v[rows, i - 1], log.v[rows, i]
        gap = log.s[rows, i - 1] - log.s[rows, i] - l_p
        log.g1[rows, i] = gap - vp**2 / (2 * envs[i - 1].a_min_lb) + vf**2 / (2 * envs[i].a_min_ub)
        log.g2[rows, i] = gap
        log.g3[rows, i] = vp
        log.g4[rows, i] = vf


# --------------------------------------------------------------------------- closed loop

def _realize(p: VehicleParams, state: VehicleState, a_cmd: float, brake: bool, gap: float, slope: float):
    """Engine/brake forces that produce ``a_cmd``, saturated at the actuator limits."""
    f_ext = float(external_force(p, state.v, gap, slope))
    desired = p.mass * a_cmd - f_ext
    lo, hi = engine_force_bounds(p, state.v)
    if not brake:
        return min(max(desired, lo), hi), 0.0
    return lo, min(max(desired - lo, -p.max_brake_force), 0.0)


def _initial_profile(sc: Scenario, positions: np.ndarray) -> tuple[SpeedProfile, RecedingPlanner | None]:
    if sc.profile is not None:
        return sc.profile, None
    if sc.strategy == "CC":
        return constant_profile(sc.road.start, sc.road.end, sc.cruise_speed, sc.time_gaps(), sc.dp.ds), None
    planner = RecedingPlanner(sc.platoon, sc.time_gaps(), sc.road, sc.dp, lac=sc.strategy == "LAC")
    return planner.update(positions, [sc.v0] * sc.n), planner


def run_closed_loop(sc: Scenario) -> TrajectoryLog:
    """Coordinator, per-vehicle MPC and plant in closed loop.

    Every control tick each vehicle first forms the trajectory it communicates
    (its previous optimum shifted by one tick, preceded by its measured past),
    then solves its MPC against its predecessor's communicated trajectory.
    While a leader event is active the leader ignores its MPC and brakes at
    the event deceleration; afterwards its MPC restarts from scratch.
    """
    if sc.mode != "closed_loop":
        raise ValueError("scenario is not in closed_loop mode")
    if sc.duration is None:
        raise ValueError("closed-loop scenarios need a duration")
    cfg, N = sc.mpc, sc.n
    sub = int(round(cfg.dt / sc.plant_dt))
    n_ticks = int(math.ceil(sc.duration / cfg.dt - 1e-9))
    envs = sc.envelopes()
    taus = sc.time_gaps()
    T = [0] + [gap_steps(tau, cfg.dt) for tau in taus]
    hist_len = max(T) + 2
    pos0 = sc.initial_positions()
    states = [VehicleState(sc.v0, float(s)) for s in pos0]
    history = [deque(((sc.v0, float(s) - n * cfg.dt * sc.v0) for n in range(hist_len, 0, -1)), maxlen=hist_len)
               for s in pos0]
    prev_opt: list = [None] * N
    profile, planner = _initial_profile(sc, pos0)
    log = TrajectoryLog.empty(n_ticks * sub + 1, sc.platoon, sc.plant_dt,
                              {"mode": sc.mode, "strategy": sc.strategy, "gap_policy": sc.gap_policy.kind})
    manual_before = False
    standstill_since = None
    row = 0
    n_used = n_ticks * sub + 1
    for k in range(n_ticks):
        t = k * cfg.dt
        if planner is not None:
            profile = planner.update([x.s for x in states], [x.v for x in states])
        manual = any(ev.active(t) for ev in sc.leader_events)
        if manual_before and not manual:
            prev_opt[0] = None  # cold restart after manual driving
        gaps_now = [math.inf] + [states[i - 1].s - states[i].s - sc.platoon[i - 1].length for i in range(1, N)]
        assumed = []
        for i, p in enumerate(sc.platoon):
            slope = sc.road.clamped_slope(states[i].s)
            a_c = coasting_accel(p, states[i], max(gaps_now[i], 0.0), slope)
            prev = None if (i == 0 and manual) else prev_opt[i]
            assumed.append(build_assumed(prev, states[i], cfg, k, list(history[i]), coast_accel=a_c))
        outs: list[MpcOutput | None] = []
        for i, p in enumerate(sc.platoon):
            if i == 0 and manual:
                outs.append(None)
                continue
            ref = build_reference(profile, states[i].s, cfg, k)
            out = solve_step(p, states[i], ref, assumed[i - 1] if i else None, T[i],
                             (envs[i - 1] if i else None, envs[i]), sc.road, cfg,
                             pred_length=sc.platoon[i - 1].length if i else 0.0, own_assumed=assumed[i], k=k)
            outs.append(out)
            prev_opt[i] = out.optimal
        if manual:
            prev_opt[0] = None
        decel = max((ev.decel for ev in sc.leader_events if ev.active(t)), default=0.0)
        for i in range(N):
            history[i].append((states[i].v, states[i].s))
        for _ in range(sub):
            new_states = []
            for i, p in enumerate(sc.platoon):
                x = states[i]
                gap = math.inf if i == 0 else states[i - 1].s - x.s - sc.platoon[i - 1].length
                slope = sc.road.clamped_slope(x.s)
                drag_gap = max(gap, 0.0)
                out = outs[i]
                if out is None:
                    a_cmd, brake = (-decel if x.v > 0 else 0.0), True
                else:
                    a_cmd, brake = out.a_star, out.brake_flag
                if x.v <= STANDSTILL_V and a_cmd < LAUNCH_ACCEL:
                    F_e, F_b = 0.0, -min(p.max_brake_force, max(0.0, float(external_force(p, 0.0, drag_gap, slope))))
                else:
                    F_e, F_b = _realize(p, x, a_cmd, brake, drag_gap, slope)
                x_new, forces = advance(p, x, F_e, F_b, drag_gap, sc.road.clamped_slope, sc.plant_dt)
                _log_row(log, row, i, x, forces, gap, p, x_new)
                log.brake_flag[row, i] = float(brake)
                if out is not None:
                    log.slack[row, i] = out.slack_max
                    log.a_star[row, i] = out.a_star
                    log.coast_accel[row, i] = out.coast_accel
                    log.margin_now[row, i] = out.safety_margin_now
                    log.margin_min[row, i] = out.safety_margin_min
                else:
                    log.a_star[row, i] = a_cmd
                new_states.append(x_new)
            states = new_states
            row += 1
        manual_before = manual
        if sc.stop_after_standstill is not None:
            if all(x.v <= 1e-9 for x in states):
                standstill_since = t if standstill_since is None else standstill_since
                if t + cfg.dt - standstill_since >= sc.stop_after_standstill:
                    n_used = row + 1
                    break
            else:
                standstill_since = None
    for i, x in enumerate(states):
        log.s[row, i], log.v[row, i] = x.s, x.v
        log.gap[row, i] = math.inf if i == 0 else states[i - 1].s - x.s - sc.platoon[i - 1].length
    log = log.truncate(n_used)
    _fill_margins(log, envs)
    log.meta.update(replans=planner.plans if planner else 0, mpc_dt=cfg.dt, envelopes=[e.__dict__ for e in envs])
    return log


def _log_row(log: TrajectoryLog, row: int, i: int, x: VehicleState, forces, gap: float, p: VehicleParams,
             x_new: VehicleState) -> None:
    log.s[row, i], log.v[row, i] = x.s, x.v
    log.a[row, i] = (x_new.v - x.v) / log.dt
    log.F_e[row, i], log.F_b[row, i] = forces.F_e, forces.F_b
    log.F_g[row, i], log.F_r[row, i], log.F_d[row, i] = forces.F_g, forces.F_r, forces.F_d
    log.gap[row, i] = gap
    log.fuel_flow[row, i] = max(0.0, p.p1 * forces.F_e * 0.5 * (x.v + x_new.v) + p.p0)


# --------------------------------------------------------------------------- ideal tracking

def profile_time_law(profile: SpeedProfile):
    """Exact motion along a profile that is linear in space between grid points.

    Returns ``(t_grid, law)`` where ``law(t)`` gives ``(s, v)`` arrays; the
    vehicle is at ``grid[0]`` at ``t = 0`` and keeps the end speeds beyond
    either end.
    """
    z, v = np.asarray(profile.grid, float), np.asarray(profile.v, float)
    if np.any(v <= 0):
        raise ValueError("profile speeds must be positive")
    dz, dv = np.diff(z), np.diff(v)
    kappa = dv / dz
    with np.errstate(divide="ignore", invalid="ignore"):
        cell_t = np.where(np.abs(dv) > 1e-12, np.log(v[1:] / v[:-1]) / np.where(kappa == 0, 1, kappa), dz / v[:-1])
    t_grid = np.concatenate([[0.0], np.cumsum(cell_t)])

    def law(t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(t_grid, t, side="right") - 1, 0, len(dz) - 1)
        tau = t - t_grid[idx]
        va, za, kk = v[idx], z[idx], kappa[idx]
        flat = np.abs(kk) < 1e-15
        grow = np.exp(np.where(flat, 0.0, kk) * tau)
        s = np.where(flat, za + va * tau, za + va * (grow - 1) / np.where(flat, 1.0, kk))
        vel = np.where(flat, va, va * grow)
        before, after = t < 0, t > t_grid[-1]
        s = np.where(before, z[0] + v[0] * t, s)
        vel = np.where(before, v[0], vel)
        s = np.where(after, z[-1] + v[-1] * (t - t_grid[-1]), s)
        vel = np.where(after, v[-1], vel)
        return s, vel

    return t_grid, law


def _leader_cc(sc: Scenario, t: np.ndarray, s0: float) -> tuple[np.ndarray, np.ndarray]:
    """Cruise-control leader; steady at v0 for negative times."""
    p, dt = sc.platoon[0], sc.plant_dt
    s, v = np.empty(len(t)), np.empty(len(t))
    neg = t < 0
    s[neg], v[neg] = s0 + sc.v0 * t[neg], sc.v0
    x = VehicleState(sc.v0, s0)
    for n in np.flatnonzero(~neg):
        s[n], v[n] = x.s, x.v
        slope = sc.road.clamped_slope(x.s)
        vmax = sc.road.clamped_limits(x.s)[1]
        F_e, F_b = cc_command(sc.cruise_speed, x, p, math.inf, slope, vmax, dt)
        x = advance(p, x, F_e, F_b, math.inf, sc.road.clamped_slope, dt)[0]
    return s, v


def _sampled_law(t: np.ndarray, s: np.ndarray, v: np.ndarray):
    """Motion law through samples with constant acceleration between them.

    This is exact for the fixed-step plant, whose position update integrates
    each step's constant acceleration exactly. Before the first sample the
    vehicle keeps its initial speed.
    """
    dt = t[1] - t[0]
    acc = np.diff(v) / dt

    def law(tq):
        tq = np.asarray(tq, dtype=float)
        idx = np.clip(np.floor((tq - t[0]) / dt + 1e-9).astype(int), 0, len(acc) - 1)
        h = tq - t[idx]
        before = tq < t[0]
        a = np.where(before, 0.0, acc[idx])
        base_s, base_v = np.where(before, s[0], s[idx]), np.where(before, v[0], v[idx])
        h = np.where(before, tq - t[0], h)
        return base_s + base_v * h + 0.5 * a * h * h, base_v + a * h

    return law


def _headway(s_pred: np.ndarray, pred_len: float, tau: float, dt: float, s_init: float):
    """Integrate ds/dt = (s_pred - l - s) / tau exactly for s_pred linear between samples."""
    e = s_pred - pred_len
    decay = math.exp(-dt / tau)
    s = np.empty_like(s_pred)
    s[0] = s_init
    for n in range(len(e) - 1):
        slope = (e[n + 1] - e[n]) / dt
        s[n + 1] = e[n + 1] - tau * slope + (s[n] - e[n] + tau * slope) * decay
    return s, (e - s) / tau


def plan_for(sc: Scenario, start: float, beta: float | None = None) -> SpeedProfile:
    """Whole-road plan for the ideal-mode leader."""
    cfg = sc.dp if beta is None else replace(sc.dp, beta=beta)
    n_cells = int(math.floor((sc.road.end - start) / cfg.ds + 1e-9))
    cfg = replace(cfg, horizon_cells=max(n_cells, 1))
    term = sc.terminal_speed if sc.terminal_speed is not None else sc.v0
    if sc.strategy == "LAC":
        return plan_lac(sc.platoon[0], sc.road, start, sc.v0, cfg, terminal_speed=term)
    return plan_clac(sc.platoon, sc.time_gaps(), sc.road, start, sc.v0, cfg, terminal_speed=term)


def run_ideal_tracking(sc: Scenario) -> TrajectoryLog:
    """Leader follows its strategy exactly; followers satisfy their gap policy exactly.

    Follower forces are back-computed from the kinematics and may exceed the
    engine limits. The run ends once the last vehicle passes the road end.
    Rows start at ``t = 0`` with the platoon at its steady spacing.
    """
    if sc.mode != "ideal_tracking":
        raise ValueError("scenario is not in ideal_tracking mode")
    dt, N = sc.plant_dt, sc.n
    pos0 = sc.initial_positions()
    lead0 = float(pos0[0])
    spacing = lead0 - float(pos0[-1])
    lag_t = (spacing + 200.0) / max(sc.v0, 1.0) + 5.0
    m_neg = int(math.ceil(lag_t / dt)) + 2
    profile = None
    if sc.strategy == "CC":
        est = (sc.road.end - lead0 + spacing + 500.0) / max(0.5 * sc.v0, 1.0)
    else:
        profile = sc.profile or plan_for(sc, lead0)
        t_grid, law = profile_time_law(profile)
        est = t_grid[-1] + (spacing + 500.0) / profile.v[-1]
    n_pos = int(math.ceil(est / dt)) + 1
    t = np.arange(-m_neg, n_pos) * dt
    if sc.strategy == "CC":
        s_l, v_l = _leader_cc(sc, t, lead0)
    else:
        s_l, v_l = law(t)
    if sc.strategy == "CC":
        law = _sampled_law(t, s_l, v_l)
    S, V = [s_l], [v_l]
    for i in range(1, N):
        l_p = sc.platoon[i - 1].length
        pol = sc.gap_policy
        if pol.kind == "TG":
            # s_i(t) = s_{i-1}(t - tau) chains to the leader delayed by i * tau
            s_i, v_i = law(t - i * pol.value)
        elif pol.kind == "SG":
            s_i, v_i = S[-1] - l_p - pol.value, V[-1].copy()
        else:
            s_init = S[-1][0] - l_p - pol.value * sc.v0
            s_i, v_i = _headway(S[-1], l_p, pol.value, dt, s_init)
        S.append(s_i)
        V.append(v_i)
    S, V = np.stack(S, axis=1), np.stack(V, axis=1)
    first = m_neg
    last_cross = np.flatnonzero(S[:, -1] >= sc.road.end)
    stop = (int(last_cross[0]) + 1) if len(last_cross) else len(t) - 1
    S, V = S[first:stop + 1], V[first:stop + 1]
    if np.any(np.isnan(S)):
        raise RuntimeError("ideal-tracking history too short for the gap policy")
    n_samples = len(S)
    log = TrajectoryLog.empty(n_samples, sc.platoon, dt,
                              {"mode": sc.mode, "strategy": sc.strategy, "gap_policy": sc.gap_policy.kind,
                               "gap_value": sc.gap_policy.value})
    log.s[:], log.v[:] = S, V
    for i, p in enumerate(sc.platoon):
        gap = np.full(n_samples, math.inf) if i == 0 else S[:, i - 1] - S[:, i] - sc.platoon[i - 1].length
        log.gap[:, i] = gap
        s_n, v_n, v_next = S[:-1, i], V[:-1, i], V[1:, i]
        slope = _slopes(sc.road, s_n)
        F_g = -p.mass * p.g * np.sin(slope)
        F_r = np.full(len(s_n), -p.c_r * p.mass * p.g)
        F_d = -0.5 * p.rho * p.A_v * _drag_cd(p, gap[:-1]) * v_n**2
        required = p.mass * (v_next - v_n) / dt - (F_g + F_r + F_d)
        split = np.array([split_force(p, vv, rr) for vv, rr in zip(v_n, required)])
        log.a[:-1, i] = (v_next - v_n) / dt
        log.F_e[:-1, i], log.F_b[:-1, i] = split[:, 0], split[:, 1]
        log.F_g[:-1, i], log.F_r[:-1, i], log.F_d[:-1, i] = F_g, F_r, F_d
        log.fuel_flow[:-1, i] = np.maximum(0.0, p.p1 * split[:, 0] * 0.5 * (v_n + v_next) + p.p0)
        log.brake_flag[:-1, i] = (split[:, 1] < 0).astype(float)
    _fill_margins(log, sc.envelopes())
    log.meta.update(window=(lead0, sc.road.end), profile_beta=profile.beta if profile is not None else None)
    if profile is not None:
        log.meta["profile"] = profile
    return log


def _drag_cd(p: VehicleParams, gap: np.ndarray) -> np.ndarray:
    d = np.where(np.isfinite(gap), np.maximum(gap, 0.0), np.inf)
    return p.C_D0 * (1.0 - p.C_D1 / (p.C_D2 + d))


def run(sc: Scenario) -> TrajectoryLog:
    return run_closed_loop(sc) if sc.mode == "closed_loop" else run_ideal_tracking(sc)


def space_profile(log: TrajectoryLog, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Speed of vehicle ``i`` as a function of its position (for monotone motion)."""
    s, v = log.s[:, i], log.v[:, i]
    keep = np.concatenate([[True], np.diff(s) > 0])
    return s[keep], v[keep]
