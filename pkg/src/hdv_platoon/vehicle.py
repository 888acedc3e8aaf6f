"""Longitudinal force model, fuel model and plant integration for one HDV."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Callable

import numpy as np

from .errors import DomainError

# Engine force ceiling at (and near) standstill, as an acceleration [m/s^2].
STANDSTILL_ACCEL = 1.0


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of one heavy-duty vehicle.

    Defaults are the nominal 40 t truck. Drag, fuel and braking coefficients
    are not published for that vehicle and are configurable estimates.
    """

    mass: float = 40_000.0  # kg
    length: float = 18.0  # m
    c_r: float = 3e-3
    A_v: float = 10.0  # m^2
    rho: float = 1.225  # kg/m^3
    C_D0: float = 0.6
    C_D1: float = 4.0  # m
    C_D2: float = 10.0  # m
    P_max: float = 298e3  # W
    P_min: float = -9e3  # W
    p1: float = 5e-5  # g/J
    p0: float = 0.3  # g/s
    eta_brake: float = 0.5
    mu: float = 1.0
    g: float = 9.81

    def __post_init__(self):
        for name in ("mass", "length", "A_v", "rho", "C_D0", "g", "C_D2", "p1"):
            if not getattr(self, name) > 0:
                raise ValueError(f"VehicleParams.{name} must be > 0, got {getattr(self, name)!r}")
        if self.c_r < 0 or self.p0 < 0:
            raise ValueError("VehicleParams.c_r and p0 must be >= 0")
        if not self.P_min < 0 < self.P_max:
            raise ValueError("VehicleParams requires P_min < 0 < P_max")
        if not self.eta_brake * self.mu > 0:
            raise ValueError("VehicleParams requires eta_brake * mu > 0")
        if not 0 <= self.C_D1 < self.C_D2:
            raise ValueError("VehicleParams requires 0 <= C_D1 < C_D2 so that C_D(d) > 0 for d >= 0")

    @property
    def max_brake_force(self) -> float:
        """Magnitude of the friction-limited braking force [N]."""
        return self.mass * self.eta_brake * self.g * self.mu

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "VehicleParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown vehicle parameter(s): {sorted(unknown)}")
        return cls(**data)

    def with_(self, **changes) -> "VehicleParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class VehicleState:
    v: float  # m/s
    s: float  # m

    def __post_init__(self):
        if self.v < 0:
            raise ValueError(f"speed must be >= 0, got {self.v}")


@dataclass(frozen=True)
class ForceBreakdown:
    F_e: float
    F_b: float
    F_g: float
    F_r: float
    F_d: float

    @property
    def external(self) -> float:
        return self.F_g + self.F_r + self.F_d

    @property
    def total(self) -> float:
        return self.F_e + self.F_b + self.F_g + self.F_r + self.F_d


def drag_coefficient(params: VehicleParams, gap):
    """C_D0 * (1 - C_D1 / (C_D2 + gap)); an infinite gap gives C_D0.

    Accepts a scalar or an array of gaps.
    """
    d = np.asarray(gap, dtype=float)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise DomainError(f"gap must be >= 0, got {gap!r}")
    cd = params.C_D0 * (1.0 - params.C_D1 / (params.C_D2 + d))
    return float(cd) if cd.ndim == 0 else cd


def external_forces(params: VehicleParams, state: VehicleState, gap: float, slope: float) -> ForceBreakdown:
    m, g = params.mass, params.g
    F_g = -m * g * math.sin(slope)
    F_r = -params.c_r * m * g
    F_d = -0.5 * params.rho * params.A_v * drag_coefficient(params, gap) * state.v**2
    return ForceBreakdown(0.0, 0.0, F_g, F_r, F_d)


def external_force(params: VehicleParams, v, gap, slope):
    """Sum of gravity, rolling and drag forces; vectorised over numpy inputs."""
    m, g = params.mass, params.g
    return (-m * g * (np.sin(slope) + params.c_r)
            - 0.5 * params.rho * params.A_v * drag_coefficient(params, gap) * np.square(v))


def engine_force_bounds(params: VehicleParams, v: float) -> tuple[float, float]:
    cap = params.mass * STANDSTILL_ACCEL
    if v <= 0:
        return 0.0, cap
    return max(params.P_min / v, -cap), min(params.P_max / v, cap)


def input_bounds(params: VehicleParams, v: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """Admissible (engine, brake) force ranges at speed ``v``."""
    if v < 0:
        raise DomainError(f"speed must be >= 0, got {v}")
    return engine_force_bounds(params, v), (-params.max_brake_force, 0.0)


def fuel_flow(params: VehicleParams, F_e: float, v: float, check_bounds: bool = True) -> float:
    """Fuel mass flow [g/s] of the affine engine model, clamped at zero.

    Ideal-tracking followers may exceed the engine power envelope; pass
    ``check_bounds=False`` to evaluate the model outside it.
    """
    power = F_e * v
    if check_bounds:
        slack = 1e-9 * max(abs(params.P_max), abs(params.P_min))
        if power > params.P_max + slack or power < params.P_min - slack:
            raise DomainError(f"engine power {power:.1f} W outside [{params.P_min}, {params.P_max}]")
    return max(0.0, params.p1 * power + params.p0)


def steady_state_power(params: VehicleParams, v: float, slope: float, gap: float = math.inf) -> float:
    """Engine-plus-brake power needed to hold speed ``v`` on grade ``slope``."""
    return -float(external_force(params, v, gap, slope)) * v


def advance(params: VehicleParams, state: VehicleState, F_e: float, F_b: float, gap: float,
            slope_fn: Callable[[float], float], dt: float) -> tuple[VehicleState, ForceBreakdown]:
    """One fixed step with forces frozen at the start; also returns the forces actually applied.

    Speed follows explicit Euler. Position moves exactly as under the
    resulting constant acceleration, so a vehicle commanded a constant
    acceleration lands where a zero-order-hold model predicts. When the step
    would reverse the vehicle it stops where constant deceleration would stop
    it, and the resisting forces are reduced (brake first, then engine braking,
    then the external terms) so that the applied forces match the kinetic-energy
    change.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    fx = external_forces(params, state, gap, slope_fn(state.s))
    forces = ForceBreakdown(F_e, F_b, fx.F_g, fx.F_r, fx.F_d)
    accel = forces.total / params.mass
    v_new = state.v + dt * accel
    if v_new < 0.0:
        s_new = state.s + state.v**2 / (-2.0 * accel)
        forces = _absorb_excess(forces, -params.mass * state.v / dt)
        v_new = 0.0
    else:
        s_new = state.s + dt * 0.5 * (state.v + v_new)
    return VehicleState(v_new, s_new), forces


def _absorb_excess(forces: ForceBreakdown, target_total: float) -> ForceBreakdown:
    excess = target_total - forces.total  # > 0: resisting forces are too strong
    parts = {"F_b": forces.F_b, "F_e": forces.F_e, "F_r": forces.F_r, "F_d": forces.F_d, "F_g": forces.F_g}
    for name in ("F_b", "F_e", "F_r", "F_d", "F_g"):
        if excess <= 0:
            break
        if parts[name] < 0:
            take = min(-parts[name], excess)
            parts[name] += take
            excess -= take
    return ForceBreakdown(parts["F_e"], parts["F_b"], parts["F_g"], parts["F_r"], parts["F_d"])


def step_plant(params: VehicleParams, state: VehicleState, F_e: float, F_b: float, gap: float,
               slope_fn: Callable[[float], float], dt: float, method: str = "euler") -> VehicleState:
    """Integrate m dv/dt = F_e + F_b + F_g + F_r + F_d, ds/dt = v over ``dt``.

    Engine and brake forces are held constant over the step. The speed never
    goes negative.
    """
    if method == "euler":
        return advance(params, state, F_e, F_b, gap, slope_fn, dt)[0]
    if method != "rk4":
        raise ValueError(f"unknown integration method {method!r}")
    if dt <= 0:
        raise ValueError("dt must be > 0")

    def rhs(v, s):
        v = max(v, 0.0)
        return (F_e + F_b + float(external_force(params, v, gap, slope_fn(s)))) / params.mass, v

    v0, s0 = state.v, state.s
    k1 = rhs(v0, s0)
    k2 = rhs(v0 + 0.5 * dt * k1[0], s0 + 0.5 * dt * k1[1])
    k3 = rhs(v0 + 0.5 * dt * k2[0], s0 + 0.5 * dt * k2[1])
    k4 = rhs(v0 + dt * k3[0], s0 + dt * k3[1])
    v1 = v0 + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    s1 = s0 + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return VehicleState(max(v1, 0.0), s1)


def split_force(params: VehicleParams, v: float, F_required: float) -> tuple[float, float]:
    """Engine/brake split for a required propulsive force.

    The engine covers as much as it can; the brake only absorbs what is left
    below the minimum engine force. Neither side is clamped at its upper end.
    """
    lo, _ = engine_force_bounds(params, v)
    if F_required >= lo:
        return F_required, 0.0
    return lo, F_required - lo
