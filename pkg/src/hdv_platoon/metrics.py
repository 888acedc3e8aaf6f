"""Energy decomposition by force, fuel totals and normalized comparison tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence, TextIO

import numpy as np

from .sim import TrajectoryLog


@dataclass(frozen=True)
class EnergyLedger:
    """Work of each force on one vehicle [J] plus its fuel [g].

    ``E_e`` is the net engine work and ``E_e_neg`` its negative part (engine
    braking). ``E_b``, ``E_r`` and ``E_d`` are dissipations (>= 0); ``E_g`` is
    the signed work done by gravity.
    """

    E_e: float
    E_e_neg: float
    E_b: float
    E_g: float
    E_r: float
    E_d: float
    dKE: float
    fuel_g: float
    distance: float
    duration: float

    @property
    def balance_residual(self) -> float:
        """E_e - (dKE + E_b + E_r + E_d - E_g); zero for an exact integrator."""
        return self.E_e - (self.dKE + self.E_b + self.E_r + self.E_d - self.E_g)

    @property
    def E_e_pos(self) -> float:
        return self.E_e - self.E_e_neg

    def balances(self, rtol: float = 1e-6) -> bool:
        scale = max(abs(self.E_e_pos), self.E_b + self.E_r + self.E_d + abs(self.E_g), abs(self.dKE), 1.0)
        return abs(self.balance_residual) <= rtol * scale

    def to_dict(self) -> dict:
        return asdict(self)


def _window_rows(s: np.ndarray, window) -> np.ndarray:
    n_steps = len(s) - 1
    if window is None:
        return np.arange(n_steps)
    z0, z1 = window
    rows = np.flatnonzero((s[:-1] >= z0) & (s[:-1] < z1))
    if len(rows) and np.any(np.diff(rows) != 1):
        raise ValueError("vehicle leaves and re-enters the window; the ledger needs one contiguous pass")
    return rows


def energy_ledger(log: TrajectoryLog, vehicle: int, window: tuple[float, float] | None = None) -> EnergyLedger:
    """Integrate force times speed over the logged steps of one vehicle.

    Each step uses the mean of its start and end speeds, which makes the
    balance exact for the explicit Euler plant. ``window`` restricts the sum
    to the steps starting inside ``[z0, z1)`` of the vehicle's own position.
    """
    p = log.platoon[vehicle]
    rows = _window_rows(log.s[:, vehicle], window)
    if len(rows) == 0:
        raise ValueError("no logged steps inside the window")
    v = log.v[:, vehicle]
    v_mid = 0.5 * (v[rows] + v[rows + 1])
    dt = log.dt

    def work(name):
        return float(np.sum(getattr(log, name)[rows, vehicle] * v_mid) * dt)

    p_e = log.F_e[rows, vehicle] * v_mid
    v0, v1 = v[rows[0]], v[rows[-1] + 1]
    return EnergyLedger(
        E_e=float(np.sum(p_e) * dt),
        E_e_neg=float(np.sum(np.minimum(p_e, 0.0)) * dt),
        E_b=0.0 - work("F_b"), E_g=work("F_g"), E_r=0.0 - work("F_r"), E_d=0.0 - work("F_d"),
        dKE=0.5 * p.mass * (v1**2 - v0**2),
        fuel_g=float(np.sum(log.fuel_flow[rows, vehicle]) * dt),
        distance=float(log.s[rows[-1] + 1, vehicle] - log.s[rows[0], vehicle]),
        duration=len(rows) * dt)


def energy_ledgers(log: TrajectoryLog, window: tuple[float, float] | None = None) -> list[EnergyLedger]:
    return [energy_ledger(log, i, window) for i in range(log.n_vehicles)]


def normalize(fuel: Sequence[float], baseline: Sequence[float]) -> np.ndarray:
    """Fuel of each vehicle as a percentage of its own baseline."""
    fuel, baseline = np.asarray(fuel, dtype=float), np.asarray(baseline, dtype=float)
    if fuel.shape != baseline.shape:
        raise ValueError("fuel and baseline need one entry per vehicle")
    if np.any(baseline == 0):
        raise ZeroDivisionError("baseline fuel is zero")
    return 100.0 * fuel / baseline


@dataclass
class ComparisonRow:
    label: str
    percent: list  # per vehicle
    platoon_percent: float
    avg_speed: float


def comparison_rows(results: Mapping[str, Sequence[float]], baseline: Sequence[float],
                    avg_speeds: Mapping[str, float] | None = None) -> list[ComparisonRow]:
    rows = []
    base_total = float(np.sum(baseline))
    for label, fuel in results.items():
        pct = normalize(fuel, baseline)
        rows.append(ComparisonRow(label, pct.tolist(), 100.0 * float(np.sum(fuel)) / base_total,
                                  (avg_speeds or {}).get(label, math.nan)))
    return rows


def table_csv(rows: Sequence[ComparisonRow], out: TextIO | None = None) -> str:
    buf = out or io.StringIO()
    n = max(len(r.percent) for r in rows)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cell", *[f"vehicle_{i + 1}_pct" for i in range(n)], "platoon_pct", "avg_speed_mps"])
    for r in rows:
        writer.writerow([r.label, *[f"{x:.3f}" for x in r.percent], f"{r.platoon_percent:.3f}", f"{r.avg_speed:.4f}"])
    return buf.getvalue() if out is None else ""


def table_text(rows: Sequence[ComparisonRow]) -> str:
    n = max(len(r.percent) for r in rows)
    header = ["cell", *[f"HDV{i + 1} %" for i in range(n)], "platoon %", "v_avg"]
    body = [[r.label, *[f"{x:.1f}" for x in r.percent], f"{r.platoon_percent:.1f}", f"{r.avg_speed:.3f}"] for r in rows]
    widths = [max(len(line[c]) for line in [header, *body]) for c in range(len(header))]
    fmt = lambda line: "  ".join(cell.rjust(w) if c else cell.ljust(w) for c, (cell, w) in enumerate(zip(line, widths)))
    return "\n".join([fmt(header), *(fmt(line) for line in body)])


def average_speed(log: TrajectoryLog, vehicle: int, window: tuple[float, float] | None = None) -> float:
    led = energy_ledger(log, vehicle, window)
    return led.distance / led.duration
