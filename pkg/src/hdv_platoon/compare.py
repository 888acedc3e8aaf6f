"""Strategy x gap-policy comparisons at a common average speed, normalized to solo cruise control."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

from .coordinator import plan_clac, plan_lac, tune_beta
from .errors import ComparisonError
from .metrics import ComparisonRow, EnergyLedger, comparison_rows, energy_ledger
from .sim import GapPolicy, Scenario, run_ideal_tracking


def _lac_planner(platoon, time_gaps, road, start_pos, start_speed, cfg, **kw):
    return plan_lac(platoon[0], road, start_pos, start_speed, cfg, **kw)


PLANNERS = {"LAC": _lac_planner, "CLAC": plan_clac}


@dataclass
class CellResult:
    strategy: str
    gap_policy: GapPolicy
    ledgers: list
    avg_speed: float  # leader, over the measurement window
    beta: float | None = None
    tune_evaluations: int = 0

    @property
    def label(self) -> str:
        return f"{self.strategy}/{self.gap_policy.kind}"

    def fuel(self) -> list:
        return [led.fuel_g for led in self.ledgers]

    def energy(self) -> list:
        return [led.E_e_pos for led in self.ledgers]


@dataclass
class Comparison:
    baseline: list  # solo cruise-control ledger per vehicle
    target_speed: float
    cells: list = field(default_factory=list)

    def fuel_rows(self) -> list[ComparisonRow]:
        return comparison_rows({c.label: c.fuel() for c in self.cells}, [b.fuel_g for b in self.baseline],
                               {c.label: c.avg_speed for c in self.cells})

    def energy_rows(self) -> list[ComparisonRow]:
        """Positive engine work as a percentage of the solo baseline."""
        return comparison_rows({c.label: c.energy() for c in self.cells}, [b.E_e_pos for b in self.baseline],
                               {c.label: c.avg_speed for c in self.cells})

    def cell(self, strategy: str, kind: str = "TG") -> CellResult:
        for c in self.cells:
            if c.strategy == strategy and c.gap_policy.kind == kind:
                return c
        raise KeyError(f"{strategy}/{kind}")

    def energy_bars_csv(self) -> str:
        """Per cell and vehicle: each force's energy, absolute and relative to the baseline engine work."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        parts = ("E_e_pos", "E_e_neg", "E_b", "E_g", "E_r", "E_d", "dKE")
        w.writerow(["cell", "vehicle", *(f"{p}_J" for p in parts), "fuel_g", *(f"{p}_pct" for p in parts)])
        for c in self.cells:
            for i, (led, base) in enumerate(zip(c.ledgers, self.baseline)):
                vals = [getattr(led, p) for p in parts]
                w.writerow([c.label, i + 1, *(f"{x:.1f}" for x in vals), f"{led.fuel_g:.3f}",
                            *(f"{100 * x / base.E_e_pos:.3f}" for x in vals)])
        return buf.getvalue()


def leader_start(sc: Scenario) -> float:
    return float(sc.initial_positions()[0])


def solo_baseline(base: Scenario, vehicle: int, start: float) -> EnergyLedger:
    """The vehicle alone under cruise control, measured from ``start`` to the road end."""
    solo = replace(base, platoon=(base.platoon[vehicle],), strategy="CC", mode="ideal_tracking",
                   rear_start=start, profile=None, leader_events=())
    log = run_ideal_tracking(solo)
    return energy_ledger(log, 0, log.meta["window"])


def run_cell(sc: Scenario, target_speed: float, tune_tol: float = 0.01) -> CellResult:
    """Run one strategy/policy cell; look-ahead strategies get the weight on time tuned to ``target_speed``."""
    beta, evals = None, 0
    if sc.strategy != "CC":
        start = leader_start(sc)
        n_cells = int(math.floor((sc.road.end - start) / sc.dp.ds + 1e-9))
        cfg = replace(sc.dp, horizon_cells=max(n_cells, 1))
        term = sc.terminal_speed if sc.terminal_speed is not None else sc.v0
        tr = tune_beta(PLANNERS[sc.strategy], sc.road, sc.platoon, target_speed, tune_tol,
                       time_gaps=sc.time_gaps(), start_pos=start, start_speed=sc.v0, cfg=cfg, terminal_speed=term)
        sc = replace(sc, profile=tr.profile, dp=replace(sc.dp, beta=tr.beta))
        beta, evals = tr.beta, tr.evaluations
    log = run_ideal_tracking(sc)
    window = log.meta["window"]
    ledgers = [energy_ledger(log, i, window) for i in range(log.n_vehicles)]
    return CellResult(sc.strategy, sc.gap_policy, ledgers, ledgers[0].distance / ledgers[0].duration, beta, evals)


def _star(args):
    fn, *rest = args
    return fn(*rest)


def _map(tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [_star(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_star, tasks))


def compare(base: Scenario, strategies: Sequence[str] = ("CC", "LAC", "CLAC"),
            policies: Sequence[GapPolicy] = (GapPolicy("TG", 1.4),), speed_tol: float = 0.05,
            tune_tol: float = 0.01, jobs: int = 1) -> Comparison:
    """Run every strategy/policy pair in ideal-tracking mode at the cruise-control average speed.

    All cells must start their leader at the same position so that every
    vehicle is measured over the same stretch of road; equal-distance
    policies (see :func:`~hdv_platoon.sim.equal_distance_policies`) satisfy
    this. Raises :class:`ComparisonError` when a leader's average speed is
    more than ``speed_tol`` away from the cruise-control leader's.
    """
    base = replace(base, mode="ideal_tracking", profile=None, leader_events=())
    scenarios = [replace(base, strategy=s, gap_policy=p) for s in strategies for p in policies]
    starts = {round(leader_start(sc), 6) for sc in scenarios}
    if len(starts) != 1:
        raise ComparisonError(f"gap policies place the leader at different positions {sorted(starts)}; "
                              "use equal-distance policies")
    start = starts.pop()
    baseline = _map([(solo_baseline, base, i, start) for i in range(base.n)], jobs)
    target = baseline[0].distance / baseline[0].duration
    cells = _map([(run_cell, sc, target, tune_tol) for sc in scenarios], jobs)
    bad = [(c.label, round(c.avg_speed, 4)) for c in cells if abs(c.avg_speed - target) > speed_tol]
    if bad:
        raise ComparisonError(f"average speeds {bad} differ from the cruise-control {target:.4f} m/s "
                              f"by more than {speed_tol} m/s")
    return Comparison(baseline, target, cells)
