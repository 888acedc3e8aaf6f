"""Command-line entry point: run, compare, roadgen and verify."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .compare import compare
from .config import COMPARE_DEFAULTS, ROAD_SCHEMA, ScenarioConfig, gap_policy_from
from .errors import ComparisonError, ConfigError, MpcInfeasibleError, TuningError
from .metrics import energy_ledger, table_csv, table_text
from .road import EXPORT_SPACING, dump_road
from .sim import run
from .verify import dp_oracle_suite, safety_invariance_suite

MANIFEST_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def versions() -> dict:
    out = {"python": platform.python_version(), "hdv_platoon": __version__}
    for pkg in ("numpy", "scipy", "cvxpy", "clarabel", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if dataclasses.is_dataclass(obj):
        return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def load_config(path: str, args) -> ScenarioConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
        raw = json.loads(Path(path).read_text())
        raw = raw.get("config", raw)
        if raw.get("road", {}).get("kind") == "random_hilly":
            overrides.append(f"road.seed={args.seed}")
    return ScenarioConfig.from_file(path, overrides)


def manifest(cfg: ScenarioConfig, command: str, overrides) -> dict:
    out = {"manifest_version": MANIFEST_VERSION, "command": command, "config": cfg.with_absolute_paths(),
           "seed": cfg.data["seed"], "overrides": list(overrides or []), "versions": versions()}
    road = cfg.road_path()
    if road is not None:
        out["road_sha256"] = _sha256(road)
    return out


def _out_dir(args, cfg: ScenarioConfig) -> Path:
    out = Path(args.out) if args.out else cfg.base_dir / cfg.data["output_dir"]
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_summary(log) -> dict:
    window = log.meta.get("window")
    vehicles = []
    for i, p in enumerate(log.platoon):
        led = energy_ledger(log, i, window)
        vehicles.append({"vehicle": i + 1, "mass_kg": p.mass, **led.to_dict(),
                         "E_e_pos": led.E_e_pos, "balance_residual_J": led.balance_residual,
                         "avg_speed_mps": led.distance / led.duration,
                         "brake_samples": int(np.nansum(log.brake_flag[:, i] > 0)),
                         "max_slack": float(np.nanmax(np.abs(log.slack[:, i]), initial=0.0))})
    return {"mode": log.meta.get("mode"), "strategy": log.meta.get("strategy"),
            "gap_policy": log.meta.get("gap_policy"), "samples": len(log.t), "dt_s": log.dt,
            "t_end_s": float(log.t[-1]), "window_m": list(window) if window else None,
            "min_gap_m": log.min_gap(), "vehicles": vehicles}


def cmd_run(args) -> int:
    cfg = load_config(args.config, args)
    out = _out_dir(args, cfg)
    sc = cfg.scenario()
    t0 = time.perf_counter()
    try:
        log = run(sc)
    except MpcInfeasibleError as exc:
        _write_json(out / "failure.json", {"error": str(exc), "constraints": list(exc.constraints),
                                           "problem": exc.dump})
        print(f"error: {exc} (problem data in {out / 'failure.json'})", file=sys.stderr)
        return EXIT_FAIL
    elapsed = time.perf_counter() - t0
    with open(out / "trajectory.csv", "w", newline="") as fh:
        log.write_csv(fh)
    if "profile" in log.meta:
        with open(out / "profile.csv", "w", newline="") as fh:
            log.meta["profile"].write_csv(fh)
    _write_json(out / "summary.json", run_summary(log))
    _write_json(out / "manifest.json", manifest(cfg, "run", args.set))
    print(f"{len(log.t)} samples in {elapsed:.1f} s, min gap {log.min_gap():.3f} m -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args)
    if cfg.data["mode"] != "ideal_tracking":
        raise ConfigError("mode", "comparisons run in ideal_tracking mode")
    block = cfg.data.get("compare") or {}
    block = {**COMPARE_DEFAULTS, **block}
    jobs = args.jobs or block["jobs"]
    out = _out_dir(args, cfg)
    policies = [gap_policy_from(b) for b in block["gap_policies"]]
    tune_tol = cfg.data["tuning"]["tol_mps"]
    try:
        result = compare(cfg.scenario(), block["strategies"], policies, block["speed_tolerance_mps"], tune_tol, jobs)
    except (ComparisonError, TuningError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    fuel, energy = result.fuel_rows(), result.energy_rows()
    (out / "fuel_table.csv").write_text(table_csv(fuel))
    (out / "fuel_table.txt").write_text(table_text(fuel) + "\n")
    (out / "energy_table.csv").write_text(table_csv(energy))
    (out / "energy_table.txt").write_text(table_text(energy) + "\n")
    (out / "energy_bars.csv").write_text(result.energy_bars_csv())
    cells = out / "cells"
    cells.mkdir(exist_ok=True)
    for c in result.cells:
        _write_json(cells / f"{c.strategy}_{c.gap_policy.kind}.json",
                    {"strategy": c.strategy, "gap_policy": dataclasses.asdict(c.gap_policy), "beta_gps": c.beta,
                     "avg_speed_mps": c.avg_speed, "vehicles": [led.to_dict() for led in c.ledgers]})
    _write_json(out / "baseline.json", {"target_speed_mps": result.target_speed,
                                        "vehicles": [b.to_dict() for b in result.baseline]})
    _write_json(out / "manifest.json", manifest(cfg, "compare", args.set))
    print("fuel, % of each vehicle driving alone under cruise control")
    print(table_text(fuel))
    print("\nengine energy, % of the same baseline")
    print(table_text(energy))
    return EXIT_OK


ROAD_ARGS = ("length_m", "rise_m", "approach_m", "up_m", "up_grade", "plateau_m", "down_m", "down_grade",
             "exit_m", "target_fraction", "v_ref_mps")


def cmd_roadgen(args) -> int:
    block = {"kind": args.kind}
    for name in ROAD_ARGS:
        value = getattr(args, name)
        if value is not None:
            block[name] = value
    if args.kind == "random_hilly":
        block["seed"] = args.seed if args.seed is not None else 0
    try:
        jsonschema.validate(block, ROAD_SCHEMA)
    except jsonschema.ValidationError as exc:
        field = ".".join(str(p) for p in exc.absolute_path) or exc.message.split("'")[1]
        raise ConfigError(f"road.{field}", exc.message) from None
    raw = {"road": block, "platoon": [{}], "strategy": "CC", "gap_policy": {"kind": "TG", "time_gap_s": 1.4},
           "mode": "ideal_tracking"}
    road = ScenarioConfig.from_dict(raw).road()
    spacing = args.spacing if args.spacing and args.spacing > 0 else None
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            dump_road(road, fh, spacing)
    else:
        dump_road(road, sys.stdout, spacing)
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    reports = [dp_oracle_suite(args.dp_runs, seed), safety_invariance_suite(args.safety_runs, seed)]
    for r in reports:
        print(r.line())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdv-platoon", description="Truck platoon planning and control simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config", help="scenario JSON file or a run manifest")
            p.add_argument("--set", action="append", metavar="PATH=VALUE",
                           help="override a config value by dotted path, e.g. mpc.dt_s=0.2 or platoon.1.mass_kg=45000")
        p.add_argument("--out", help="output directory (default: the config's output_dir)")
        p.add_argument("--seed", type=int, help="random seed (also the road seed for random_hilly roads)")

    p = sub.add_parser("run", help="simulate one scenario")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="strategy x gap-policy table at a common average speed")
    common(p)
    p.add_argument("--jobs", type=int, help="worker processes")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("roadgen", help="write a synthetic road CSV")
    p.add_argument("kind", choices=["flat", "ramp", "hill", "random_hilly"])
    for name in ROAD_ARGS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    p.add_argument("--spacing", type=float, default=None,
                   help=f"also sample every SPACING m (breakpoints only by default; {EXPORT_SPACING:g} is the usual grid)")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--seed", type=int, help="seed for random_hilly")
    p.set_defaults(func=cmd_roadgen)

    p = sub.add_parser("verify", help="randomized DP-oracle and safety-invariance suites")
    p.add_argument("--seed", type=int)
    p.add_argument("--dp-runs", type=int, default=200)
    p.add_argument("--safety-runs", type=int, default=1000)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
