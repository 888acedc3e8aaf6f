"""Per-vehicle model predictive controller with a convex safety constraint.

Each tick a vehicle solves a QCQP over a double-integrator model

    v(j+1) = v(j) + dt a(j),   s(j+1) = s(j) + dt v(j) + dt^2 a(j) / 2

tracking a blend of its own reference (from the speed profile) and its
predecessor's communicated trajectory delayed by the time gap. State-dependent
bounds are evaluated on the vehicle's assumed trajectory, which keeps the
problem convex. Followers must keep their stopping point behind the stopping
point of the predecessor's one-tick-old state:

    s(j+1) + v(j+1)^2 / (2 |a_min_ub,own|) <= s_p(j-1) + v_p(j-1)^2 / (2 |a_min_lb,pred|) - l_pred
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import cvxpy as cp
import numpy as np

from .coordinator import SpeedProfile
from .errors import MpcInfeasibleError
from .road import RoadProfile
from .safety import AccelEnvelope
from .vehicle import VehicleParams, VehicleState, engine_force_bounds, external_force

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MpcConfig:
    dt: float = 0.1  # s
    horizon: int = 50
    Q: tuple = ((1.0, 0.0), (0.0, 0.5))  # weights on (speed, position) errors
    R: float = 2.0
    P_soft: float = 1e4
    zeta_bar: float = 0.8
    solver_tol: float = 1e-7
    solver: str = "CLARABEL"
    safety_backoff: float = 1e-3  # m the solver keeps clear of the safety bound

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("MpcConfig.dt must be > 0")
        if self.horizon < 2:
            raise ValueError("MpcConfig.horizon must be >= 2")
        q = np.asarray(self.Q, dtype=float)
        if q.shape != (2, 2) or not np.allclose(q, q.T) or np.min(np.linalg.eigvalsh(q)) < -1e-12:
            raise ValueError("MpcConfig.Q must be a symmetric positive semidefinite 2x2 matrix")
        if self.R < 0 or self.P_soft < 0:
            raise ValueError("MpcConfig.R and P_soft must be >= 0")
        if not 0 <= self.zeta_bar <= 1:
            raise ValueError("MpcConfig.zeta_bar must lie in [0, 1]")
        if self.safety_backoff < 0:
            raise ValueError("MpcConfig.safety_backoff must be >= 0")

    @property
    def rate(self) -> float:
        return 1.0 / self.dt


@dataclass(frozen=True, eq=False)
class HorizonTrajectory:
    """States at ticks ``k0 .. k0 + len(v) - 1`` and the inputs between them."""

    v: np.ndarray
    s: np.ndarray
    a: np.ndarray
    kind: str
    k0: int = 0
    dt: float = 0.1
    off_profile: bool = False

    def __post_init__(self):
        if len(self.v) != len(self.s) or len(self.a) != len(self.v) - 1:
            raise ValueError("trajectory needs len(v) == len(s) == len(a) + 1")

    @property
    def k_end(self) -> int:
        return self.k0 + len(self.v) - 1

    def state_at(self, k: int) -> tuple[float, float]:
        """(v, s) at tick ``k``; constant speed outside the stored range."""
        if k < self.k0:
            v = float(self.v[0])
            return v, float(self.s[0]) - (self.k0 - k) * self.dt * v
        if k > self.k_end:
            v = float(self.v[-1])
            return v, float(self.s[-1]) + (k - self.k_end) * self.dt * v
        i = k - self.k0
        return float(self.v[i]), float(self.s[i])

    def states_at(self, ticks: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.state_at(k) for k in ticks]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def build_reference(profile: SpeedProfile, s_now: float, cfg: MpcConfig, k: int = 0) -> HorizonTrajectory:
    """Time-parametrize the space profile from ``s_now`` by forward recursion."""
    H, dt = cfg.horizon, cfg.dt
    s = np.empty(H + 1)
    s[0] = s_now
    for j in range(1, H + 1):
        s[j] = s[j - 1] + dt * profile.speed_at(s[j - 1])
    v = profile.speed_at(s)
    a = np.diff(v) / dt
    off = bool(s[0] < profile.start or s[-1] > profile.end)
    if off:
        log.debug("reference from s = %.1f leaves the profile [%.1f, %.1f]", s_now, profile.start, profile.end)
    return HorizonTrajectory(v, s, a, "reference", k, dt, off)


def coast_rollout(measured: VehicleState, accel: float, cfg: MpcConfig, k: int = 0) -> HorizonTrajectory:
    H, dt = cfg.horizon, cfg.dt
    v, s = np.empty(H + 1), np.empty(H + 1)
    v[0], s[0] = measured.v, measured.s
    for j in range(H):
        v[j + 1], s[j + 1] = _hold_step(v[j], s[j], accel, dt)
    return HorizonTrajectory(v, s, np.diff(v) / dt, "assumed", k, dt)


def _hold_step(v: float, s: float, a: float, dt: float) -> tuple[float, float]:
    """Exact step under constant acceleration, stopping at zero speed."""
    if v + dt * a < 0.0:
        return 0.0, s + v * v / (-2.0 * a)
    return v + dt * a, s + dt * v + 0.5 * dt * dt * a


def build_assumed(prev_optimal: HorizonTrajectory | None, measured: VehicleState, cfg: MpcConfig, k: int = 0,
                  history: Sequence[tuple[float, float]] = (), coast_accel: float = 0.0) -> HorizonTrajectory:
    """Trajectory a vehicle communicates at tick ``k``.

    Future ticks repeat the optimal trajectory of tick ``k - 1``, extended by
    one step with its last input. Without a previous solution the vehicle is
    assumed to coast from ``measured``. ``history`` holds the measured
    ``(v, s)`` at the ticks just before ``k``, oldest first.
    """
    dt = cfg.dt
    if prev_optimal is None:
        fut = coast_rollout(measured, coast_accel, cfg, k)
        fv, fs, fa = fut.v, fut.s, fut.a
    else:
        if prev_optimal.k0 != k - 1:
            raise ValueError(f"previous optimal starts at tick {prev_optimal.k0}, expected {k - 1}")
        a_last = float(prev_optimal.a[-1])
        v_end, s_end = _hold_step(max(float(prev_optimal.v[-1]), 0.0), float(prev_optimal.s[-1]), a_last, dt)
        fv = np.append(prev_optimal.v[1:], v_end)
        fs = np.append(prev_optimal.s[1:], s_end)
        fa = np.append(prev_optimal.a[1:], a_last)
    if history:
        hv = np.array([h[0] for h in history])
        hs = np.array([h[1] for h in history])
        v = np.concatenate([hv, fv])
        s = np.concatenate([hs, fs])
        a = np.concatenate([np.diff(np.append(hv, fv[0])) / dt, fa])
    else:
        v, s, a = fv, fs, fa
    return HorizonTrajectory(v, s, a, "assumed", k - len(history), dt)


def coasting_accel(vehicle: VehicleParams, state: VehicleState, pred_gap: float, slope: float) -> float:
    """Acceleration with the engine at its minimum force and no braking; 0 at standstill."""
    if state.v <= 0:
        return 0.0
    lo, _ = engine_force_bounds(vehicle, state.v)
    return (lo + float(external_force(vehicle, state.v, pred_gap, slope))) / vehicle.mass


def _gap(pred_s: float, own_s: float, pred_length: float) -> float:
    return max(0.0, pred_s - own_s - pred_length)


@dataclass(frozen=True, eq=False)
class MpcProblem:
    """Numeric data of one tick's QCQP, positions relative to ``origin``.

    Index ``j`` of the per-input arrays refers to input ``a(j)``; index ``j``
    of the per-state arrays refers to state ``j + 1`` (state 0 is fixed).
    """

    v0: float
    origin: float
    a_lo: np.ndarray
    a_hi: np.ndarray
    soft_lo: np.ndarray
    a_ref: np.ndarray
    v_lo: np.ndarray
    v_hi: np.ndarray
    v_tgt: np.ndarray
    s_tgt: np.ndarray
    safety_rhs: np.ndarray | None  # None for the leader
    safety_curv: float  # -1 / (2 a_min_ub,own) > 0
    coast0: float  # coasting acceleration at the measured state
    dt: float
    Q: np.ndarray
    R: float
    P_soft: float

    @property
    def horizon(self) -> int:
        return len(self.a_lo)

    def rollout(self, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """States 0..H (relative positions) for an input sequence."""
        dt = self.dt
        v = np.concatenate([[self.v0], self.v0 + dt * np.cumsum(a)])
        s = np.concatenate([[0.0], np.cumsum(dt * v[:-1] + 0.5 * dt * dt * a)])
        return v, s

    def objective(self, a: np.ndarray, eps: np.ndarray) -> float:
        v, s = self.rollout(a)
        e = np.stack([v[1:] - self.v_tgt, s[1:] - self.s_tgt])
        track = float(np.sum(e * (self.Q @ e)))
        return track + self.R * float(np.sum((a - self.a_ref) ** 2)) + self.P_soft * float(np.sum(eps**2))

    def safety_margins(self, v: np.ndarray, s: np.ndarray) -> np.ndarray:
        """rhs - lhs of every safety constraint (states 1..H); empty for the leader."""
        if self.safety_rhs is None:
            return np.zeros(0)
        return self.safety_rhs - (s[1:] + self.safety_curv * v[1:] ** 2)


def assemble(vehicle: VehicleParams, measured: VehicleState, reference: HorizonTrajectory,
             pred_assumed: HorizonTrajectory | None, T_i: int, env: tuple[AccelEnvelope | None, AccelEnvelope],
             road: RoadProfile, cfg: MpcConfig, *, pred_length: float = 0.0,
             own_assumed: HorizonTrajectory | None = None, k: int = 0) -> MpcProblem:
    H, dt, m = cfg.horizon, cfg.dt, vehicle.mass
    env_pred, env_own = env
    is_follower = pred_assumed is not None
    if own_assumed is None:
        own_assumed = coast_rollout(measured, 0.0, cfg, k)
    ticks = np.arange(k, k + H + 1)
    own_v, own_s = own_assumed.states_at(ticks)
    own_v = np.maximum(own_v, 0.0)
    own_v[0], own_s[0] = measured.v, measured.s  # the measured state replaces the assumed one at j = 0
    if is_follower:
        _, ps = pred_assumed.states_at(ticks)
        gaps = np.array([_gap(ps[j], own_s[j], pred_length) for j in range(H + 1)])
    else:
        gaps = np.full(H + 1, math.inf)

    a_lo, a_hi, coast = np.empty(H), np.empty(H), np.empty(H)
    for j in range(H):
        slope = road.clamped_slope(own_s[j])
        f_ext = float(external_force(vehicle, own_v[j], gaps[j], slope))
        lo_e, hi_e = engine_force_bounds(vehicle, own_v[j])
        a_lo[j] = (-vehicle.max_brake_force + f_ext) / m
        a_hi[j] = (hi_e + f_ext) / m
        coast[j] = coasting_accel(vehicle, VehicleState(own_v[j], own_s[j]), gaps[j], slope)
    a_ref = np.asarray(reference.a[:H], dtype=float)
    soft_lo = np.minimum(coast, a_ref)
    v_lo, v_hi = road.clamped_limits(own_s[1:])

    zeta = cfg.zeta_bar if is_follower else 0.0
    v_tgt = (1 - zeta) * reference.v[1:H + 1]
    s_tgt = (1 - zeta) * reference.s[1:H + 1]
    rhs = None
    curv = -1.0 / (2.0 * env_own.a_min_ub)
    if not curv > 0:
        raise ValueError("safety constraint curvature must be positive (a_min_ub < 0)")
    if is_follower:
        dv, dsp = pred_assumed.states_at(ticks[1:] - T_i)
        v_tgt = v_tgt + zeta * dv
        s_tgt = s_tgt + zeta * dsp
        if env_pred is None:
            raise ValueError("a follower needs the predecessor's envelope")
        pv_d, ps_d = pred_assumed.states_at(ticks[:H] - 1)
        pv_d = np.maximum(pv_d, 0.0)
        rhs = ps_d - pv_d**2 / (2.0 * env_pred.a_min_lb) - pred_length - measured.s
    return MpcProblem(
        v0=measured.v, origin=measured.s, a_lo=a_lo, a_hi=a_hi, soft_lo=soft_lo, a_ref=a_ref,
        v_lo=np.asarray(v_lo, dtype=float), v_hi=np.asarray(v_hi, dtype=float),
        v_tgt=np.asarray(v_tgt, dtype=float), s_tgt=np.asarray(s_tgt, dtype=float) - measured.s,
        safety_rhs=rhs, safety_curv=curv, coast0=float(coast[0]), dt=dt,
        Q=np.asarray(cfg.Q, dtype=float), R=cfg.R, P_soft=cfg.P_soft)


class _Qcqp:
    """A parametrized cvxpy problem, built once per structure and reused."""

    def __init__(self, H: int, dt: float, Q: np.ndarray, R: float, P: float, curv: float | None):
        self.H = H
        self.v0 = cp.Parameter()
        names = ("a_lo", "a_hi", "soft_lo", "a_ref", "v_lo", "v_hi", "v_tgt", "s_tgt")
        self.par = {n: cp.Parameter(H) for n in names}
        self.rhs = cp.Parameter(H) if curv is not None else None
        self.a, self.eps = cp.Variable(H), cp.Variable(H)
        self.v, self.s = cp.Variable(H + 1), cp.Variable(H + 1)
        p, a, eps, v, s = self.par, self.a, self.eps, self.v, self.s
        cons = [v[0] == self.v0, s[0] == 0,
                v[1:] == v[:-1] + dt * a, s[1:] == s[:-1] + dt * v[:-1] + 0.5 * dt * dt * a,
                a >= p["a_lo"], a <= p["a_hi"], a + eps >= p["soft_lo"], eps >= 0,
                v[1:] >= p["v_lo"], v[1:] <= p["v_hi"], v >= 0]
        if curv is not None:
            cons.append(s[1:] + curv * cp.square(v[1:]) <= self.rhs)
        self.n_base = len(cons)
        self.compiled: set = set()
        w, U = np.linalg.eigh(Q)
        dv, ds = v[1:] - p["v_tgt"], s[1:] - p["s_tgt"]
        track = sum(float(w[i]) * cp.sum_squares(float(U[0, i]) * dv + float(U[1, i]) * ds)
                    for i in range(2) if w[i] > 1e-15)
        obj = track + R * cp.sum_squares(a - p["a_ref"]) + P * cp.sum_squares(eps)
        self.problem = cp.Problem(cp.Minimize(obj), cons)
        if not self.problem.is_dpp():
            raise AssertionError("MPC problem is not DPP")

    def solve(self, data: MpcProblem, solver: str, v_lo_override: np.ndarray | None = None,
              backoff: float = 0.0, **opts):
        self.v0.value = data.v0
        for name, par in self.par.items():
            par.value = getattr(data, name)
        if v_lo_override is not None:
            self.par["v_lo"].value = v_lo_override
        if self.rhs is not None:
            self.rhs.value = data.safety_rhs - backoff
        try:
            with warnings.catch_warnings():
                # inaccurate solutions are screened by _primal_violation instead
                warnings.filterwarnings("ignore", message="Solution may be inaccurate")
                if solver == "CLARABEL":
                    opts = {**_CLARABEL_OPTS, **opts}
                if solver not in self.compiled:
                    # the compiling solve takes a different numeric path from later ones; discarding it
                    # keeps every tick independent of what was solved earlier in the process
                    self.problem.solve(solver=solver, **opts)
                    self.compiled.add(solver)
                self.problem.solve(solver=solver, **opts)
        except cp.error.SolverError as exc:
            return f"solver_error: {exc}"
        return self.problem.status


_CACHE: dict = {}
# Shorter interior-point steps keep Clarabel from stalling when the safety
# constraint is active along the whole horizon; the duality-gap tolerances come
# from MpcConfig.solver_tol.
_CLARABEL_OPTS = dict(max_step_fraction=0.95)
_FEAS_RTOL = 1e-6  # accepted violation per metre (or m/s) of problem scale
_SOLVED = ("optimal", "optimal_inaccurate")


def _qcqp_for(data: MpcProblem) -> _Qcqp:
    curv = data.safety_curv if data.safety_rhs is not None else None
    key = (data.horizon, data.dt, data.Q.tobytes(), data.R, data.P_soft, curv)
    if key not in _CACHE:
        _CACHE[key] = _Qcqp(data.horizon, data.dt, data.Q, data.R, data.P_soft, curv)
    return _CACHE[key]


@dataclass
class MpcOutput:
    a_star: float
    brake_flag: bool
    optimal: HorizonTrajectory
    slack_max: float
    coast_accel: float
    objective: float
    safety_margin_now: float = math.inf  # margin of the constraint on state k+1
    safety_margin_min: float = math.inf  # smallest margin over the horizon
    relaxed_v_min: bool = False
    status: str = "optimal"
    solve_time: float = 0.0
    problem: MpcProblem | None = field(default=None, repr=False)


def _primal_violation(data: MpcProblem, a: np.ndarray, eps: np.ndarray, v_lo: np.ndarray) -> float:
    """Largest violation of any constraint, recomputed from the input sequence alone."""
    v, s = data.rollout(a)
    parts = [data.a_lo - a, a - data.a_hi, data.soft_lo - a - eps, -eps,
             v_lo - v[1:], v[1:] - data.v_hi, -v, -data.safety_margins(v, s)]
    return float(max(np.max(p, initial=0.0) for p in parts))


def solve_problem(data: MpcProblem, cfg: MpcConfig, k: int = 0) -> MpcOutput:
    qp = _qcqp_for(data)
    t0 = time.perf_counter()
    scale = max(1.0, float(np.max(np.abs(data.s_tgt))), float(np.max(np.abs(data.v_hi))),
                float(np.max(np.abs(data.safety_rhs))) if data.safety_rhs is not None else 0.0)
    tol = _FEAS_RTOL * scale
    # Interior-point solutions meet an active safety bound only to solver
    # precision, so the solver sees the bound tightened by a back-off. An
    # "inaccurate" answer is retried with a wider back-off and accepted only if
    # it satisfies the untightened constraints; a back-off that alone makes the
    # tick infeasible is dropped.
    b = cfg.safety_backoff
    opts = {"tol_gap_abs": cfg.solver_tol, "tol_gap_rel": cfg.solver_tol} if cfg.solver == "CLARABEL" else {}
    best = None  # (violation, status, a, eps, objective, relaxed)
    status = "not solved"
    for backoff in dict.fromkeys((b, 10 * b, 0.0)):
        v_lo, relaxed = data.v_lo, False
        status = qp.solve(data, cfg.solver, backoff=backoff, **opts)
        if status not in _SOLVED:
            relaxed, v_lo = True, np.zeros(data.horizon)
            status = qp.solve(data, cfg.solver, v_lo_override=v_lo, backoff=backoff, **opts)
        if status not in _SOLVED:
            continue
        a, e = np.asarray(qp.a.value, dtype=float), np.asarray(qp.eps.value, dtype=float)
        viol = _primal_violation(data, a, e, v_lo)
        if best is None or viol < best[0]:
            best = (viol, status, a, e, float(qp.problem.value), relaxed)
        if status == "optimal" or viol <= tol:
            break
    elapsed = time.perf_counter() - t0
    if best is None:
        violated = _diagnose(data)
        raise MpcInfeasibleError(f"MPC infeasible at tick {k}: {status}; suspect {violated}", violated, data)
    viol, status, a, eps, objective, relaxed = best
    if status == "optimal_inaccurate" and viol > tol:
        raise MpcInfeasibleError(f"MPC solve at tick {k} inaccurate with violation {viol:.3g}", ["accuracy"], data)
    eps = np.maximum(eps, 0.0)
    a_star = float(a[0])
    # solver round-off just below the soft bound is not a braking request
    if data.soft_lo[0] - cfg.solver_tol <= a_star < data.soft_lo[0] <= data.a_hi[0]:
        a_star = float(data.soft_lo[0])
        a[0] = a_star
    v, s = data.rollout(a)
    margins = data.safety_margins(v, s)
    optimal = HorizonTrajectory(v, s + data.origin, a, "optimal", k, data.dt)
    return MpcOutput(
        a_star=a_star, brake_flag=bool(a_star < data.coast0), optimal=optimal,
        slack_max=float(np.max(eps)), coast_accel=data.coast0, objective=objective,
        safety_margin_now=float(margins[0]) if len(margins) else math.inf,
        safety_margin_min=float(np.min(margins)) if len(margins) else math.inf,
        relaxed_v_min=relaxed, status=status, solve_time=elapsed, problem=data)


def _diagnose(data: MpcProblem) -> list[str]:
    """Names of constraint groups that cannot all hold, checked pairwise along a full-brake rollout."""
    out = []
    if np.any(data.a_lo > data.a_hi + 1e-12):
        out.append("input bounds")
    v, s = data.rollout(data.a_lo)
    if data.safety_rhs is not None and np.any(data.safety_margins(v, s) < 0):
        out.append("safety")
    if np.any(data.v_hi < 0) or np.any(data.v_lo > data.v_hi):
        out.append("speed limits")
    return out or ["unknown"]


def solve_step(vehicle: VehicleParams, measured: VehicleState, reference: HorizonTrajectory,
               pred_assumed: HorizonTrajectory | None, T_i: int, env: tuple[AccelEnvelope | None, AccelEnvelope],
               road: RoadProfile, cfg: MpcConfig, *, pred_length: float = 0.0,
               own_assumed: HorizonTrajectory | None = None, k: int = 0) -> MpcOutput:
    """Solve one tick for one vehicle and return the first input and the brake flag.

    ``pred_assumed`` is ``None`` for the leader, which then tracks only its
    own reference and has no safety constraint.
    """
    if measured.v < 0:
        raise ValueError("measured speed must be >= 0")
    data = assemble(vehicle, measured, reference, pred_assumed, T_i, env, road, cfg,
                    pred_length=pred_length, own_assumed=own_assumed, k=k)
    return solve_problem(data, cfg, k)


def gap_steps(tau: float, dt: float) -> int:
    """Time gap in whole control ticks (rounded down)."""
    return int(math.floor(tau / dt + 1e-9))
