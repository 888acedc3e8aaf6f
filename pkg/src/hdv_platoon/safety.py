"""Worst-case acceleration envelopes and the pairwise safety set.

The safety set contains the pair states (predecessor, follower) from which the
follower can always stop behind its predecessor, whatever admissible
acceleration the predecessor applies. Its four boundary functions are

    g1 = gap + v_p^2 / (2 |a_min_lb,p|) - v_f^2 / (2 |a_min_ub,f|)
    g2 = gap,  g3 = v_p,  g4 = v_f

where ``gap = s_p - s_f - l_p``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

from .vehicle import STANDSTILL_ACCEL, VehicleParams, VehicleState, drag_coefficient


@dataclass(frozen=True)
class AccelEnvelope:
    """Bounds on the minimum and maximum achievable accelerations [m/s^2]."""

    a_min_lb: float
    a_min_ub: float
    a_max_lb: float
    a_max_ub: float

    def __post_init__(self):
        if not self.a_min_lb <= self.a_min_ub < 0:
            raise ValueError(f"envelope requires a_min_lb <= a_min_ub < 0, got {self.a_min_lb}, {self.a_min_ub}")
        if not self.a_max_lb <= self.a_max_ub:
            raise ValueError("envelope requires a_max_lb <= a_max_ub")

    def predecessor_range(self, v: float) -> tuple[float, float]:
        """Accelerations a predecessor may apply (the disturbance set)."""
        return (self.a_min_lb if v > 0 else 0.0), self.a_max_ub

    def follower_range(self, v: float) -> tuple[float, float]:
        """Accelerations a follower is guaranteed to be able to apply."""
        return (self.a_min_ub if v > 0 else 0.0), self.a_max_lb


@dataclass(frozen=True)
class SafetyMargins:
    g1: float
    g2: float
    g3: float
    g4: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.g1, self.g2, self.g3, self.g4

    def in_set(self, tol: float = 0.0) -> bool:
        return min(self.as_tuple()) >= -tol


def _a_min(p: VehicleParams, v, m, alpha, gap):
    drag = 0.5 * p.rho * p.A_v * drag_coefficient(p, gap) * v**2
    return -p.mu * p.eta_brake * p.g - p.g * math.sin(alpha) - p.c_r * p.g - drag / m


def _a_max(p: VehicleParams, v, m, alpha, gap):
    cap = m * STANDSTILL_ACCEL
    engine = cap if v <= 0 else min(p.P_max / v, cap)
    drag = 0.5 * p.rho * p.A_v * drag_coefficient(p, gap) * v**2
    return engine / m - p.g * math.sin(alpha) - p.c_r * p.g - drag / m


def accel_envelope(params: VehicleParams, v_max: float, mass_range: tuple[float, float] | None = None,
                   alpha_max: float = 0.0) -> AccelEnvelope:
    """Extremes of a_min and a_max over speed, mass, slope and gap.

    Each acceleration expression is monotone in every variable, so the
    extremes sit on corners of the box ``[0, v_max] x mass_range x
    [-alpha_max, alpha_max] x {0, inf}``.
    """
    if mass_range is None:
        mass_range = (params.mass, params.mass)
    m_lo, m_hi = mass_range
    if not (0 < m_lo <= m_hi) or v_max < 0 or not 0 <= alpha_max < math.pi / 2:
        raise ValueError("invalid envelope box")
    corners = list(itertools.product((0.0, v_max), (m_lo, m_hi), (-alpha_max, alpha_max), (0.0, math.inf)))
    a_min = [_a_min(params, *c) for c in corners]
    a_max = [_a_max(params, *c) for c in corners]
    return AccelEnvelope(min(a_min), max(a_min), min(a_max), max(a_max))


def safety_margins(x_prev: VehicleState, x_foll: VehicleState, prev_len: float,
                   env_prev: AccelEnvelope, env_foll: AccelEnvelope) -> SafetyMargins:
    gap = x_prev.s - x_foll.s - prev_len
    g1 = gap - x_prev.v**2 / (2 * env_prev.a_min_lb) + x_foll.v**2 / (2 * env_foll.a_min_ub)
    return SafetyMargins(g1, gap, x_prev.v, x_foll.v)


def stopping_distance(v: float, decel: float) -> float:
    """Distance to stop from ``v`` under constant acceleration ``decel`` < 0."""
    return -v**2 / (2 * decel)


def min_safe_gap(v_prev: float, v_foll: float, env_prev: AccelEnvelope, env_foll: AccelEnvelope) -> float:
    """Smallest bumper-to-bumper gap with g1 >= 0."""
    return max(0.0, stopping_distance(v_foll, env_foll.a_min_ub) - stopping_distance(v_prev, env_prev.a_min_lb))


def certified_pair(env_prev: AccelEnvelope, env_foll: AccelEnvelope) -> bool:
    """Whether the safety set is invariant for this pair of envelopes.

    The gap boundary is only protected when the predecessor's hardest braking
    is at least as hard as the follower's guaranteed braking. Otherwise a
    faster follower braking harder can close the gap before both have stopped
    even though g1 stays non-negative.
    """
    return env_prev.a_min_lb <= env_foll.a_min_ub


def evasive_law(x_foll: VehicleState, env_foll: AccelEnvelope) -> float:
    return env_foll.a_min_ub if x_foll.v > 0 else 0.0


def boundary_derivatives(x_prev: VehicleState, x_foll: VehicleState, env_prev: AccelEnvelope,
                         env_foll: AccelEnvelope, a_prev: float, a_foll: float) -> tuple[float, float, float, float]:
    """Time derivatives of g1..g4 along the double-integrator pair dynamics."""
    d1 = (1 - a_prev / env_prev.a_min_lb) * x_prev.v - (1 - a_foll / env_foll.a_min_ub) * x_foll.v
    return d1, x_prev.v - x_foll.v, a_prev, a_foll


def nagumo_check(x_prev: VehicleState, x_foll: VehicleState, prev_len: float, env_prev: AccelEnvelope,
                 env_foll: AccelEnvelope, a_prev: float, tol: float = 1e-9) -> bool:
    """Check the boundary condition grad(g_j) . F >= 0 for all active g_j.

    The follower applies :func:`evasive_law`. Raises ``ValueError`` if the pair
    is not on the boundary of the safety set or ``a_prev`` is not admissible.
    """
    margins = safety_margins(x_prev, x_foll, prev_len, env_prev, env_foll).as_tuple()
    if min(margins) < -tol:
        raise ValueError(f"state outside the safety set: {margins}")
    active = [j for j, g in enumerate(margins) if g <= tol]
    if not active:
        raise ValueError(f"state not on the safety-set boundary: {margins}")
    lo, hi = env_prev.predecessor_range(x_prev.v)
    if not lo - tol <= a_prev <= hi + tol:
        raise ValueError(f"predecessor acceleration {a_prev} outside [{lo}, {hi}]")
    derivs = boundary_derivatives(x_prev, x_foll, env_prev, env_foll, a_prev, evasive_law(x_foll, env_foll))
    return all(derivs[j] >= -tol for j in active)
