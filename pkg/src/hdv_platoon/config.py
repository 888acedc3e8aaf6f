"""JSON scenario configuration: schema, defaults, dotted overrides and conversion to a Scenario."""
from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import jsonschema

from .coordinator import DpConfig
from .errors import ConfigError
from .mpc import MpcConfig
from .road import RoadProfile, load_road, synth_flat, synth_hill, synth_ramp, synth_random_hilly
from .sim import GAP_KINDS, MODES, STRATEGIES, GapPolicy, LeaderEvent, Scenario
from .vehicle import VehicleParams

# config key -> dataclass field; every physical quantity names its SI unit
VEHICLE_KEYS = {
    "mass_kg": "mass", "length_m": "length", "c_r": "c_r", "frontal_area_m2": "A_v",
    "air_density_kgpm3": "rho", "C_D0": "C_D0", "C_D1_m": "C_D1", "C_D2_m": "C_D2",
    "P_max_W": "P_max", "P_min_W": "P_min", "p1_gpJ": "p1", "p0_gps": "p0",
    "eta_brake": "eta_brake", "mu": "mu", "g_mps2": "g",
}
DP_KEYS = {
    "ds_m": "ds", "horizon_cells": "horizon_cells", "speed_levels": "speed_levels", "beta_gps": "beta",
    "replan_distance_m": "replan_distance", "replan_deviation_mps": "replan_deviation",
}
MPC_KEYS = {
    "dt_s": "dt", "horizon": "horizon", "Q": "Q", "R": "R", "P_soft": "P_soft", "zeta_bar": "zeta_bar",
    "solver_tol": "solver_tol", "solver": "solver", "safety_backoff_m": "safety_backoff",
}
GAP_VALUE_KEY = {"TG": "time_gap_s", "HG": "time_gap_s", "SG": "distance_m"}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}


def _block(keys: dict, extra: dict | None = None) -> dict:
    props = {k: copy.deepcopy(_NUM) for k in keys}
    props.update(extra or {})
    return {"type": "object", "properties": props, "additionalProperties": False}


_LIMITS = {"type": "array", "minItems": 1,
           "items": {"type": "array", "prefixItems": [_NONNEG, _POS, _POS], "minItems": 3, "maxItems": 3}}

ROAD_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["file", "flat", "ramp", "hill", "random_hilly"]},
        "path": {"type": "string"},
        "length_m": _POS, "rise_m": _NUM,
        "approach_m": _NONNEG, "up_m": _NONNEG, "up_grade": _NUM, "plateau_m": _NONNEG,
        "down_m": _NONNEG, "down_grade": _NUM, "exit_m": _NONNEG,
        "seed": {"type": "integer"}, "target_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "v_ref_mps": _POS,
        "speed_limits": _LIMITS,
    },
    "required": ["kind"],
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"kind": {"const": "file"}}}, "then": {"required": ["path"]}},
        {"if": {"properties": {"kind": {"const": "flat"}}}, "then": {"required": ["length_m"]}},
        {"if": {"properties": {"kind": {"const": "ramp"}}}, "then": {"required": ["length_m", "rise_m"]}},
        {"if": {"properties": {"kind": {"const": "hill"}}},
         "then": {"required": ["approach_m", "up_m", "up_grade", "plateau_m", "down_m", "down_grade", "exit_m"]}},
        {"if": {"properties": {"kind": {"const": "random_hilly"}}}, "then": {"required": ["length_m", "seed"]}},
    ],
}

GAP_SCHEMA = {
    "type": "object",
    "properties": {"kind": {"enum": list(GAP_KINDS)}, "time_gap_s": _POS, "distance_m": _NONNEG},
    "required": ["kind"],
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"kind": {"enum": ["TG", "HG"]}}}, "then": {"required": ["time_gap_s"]}},
        {"if": {"properties": {"kind": {"const": "SG"}}}, "then": {"required": ["distance_m"]}},
    ],
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "hdv_platoon scenario",
    "type": "object",
    "properties": {
        "road": ROAD_SCHEMA,
        "platoon": {"type": "array", "minItems": 1, "items": _block(VEHICLE_KEYS)},
        "strategy": {"enum": list(STRATEGIES)},
        "gap_policy": GAP_SCHEMA,
        "mode": {"enum": list(MODES)},
        "initial_speed_mps": _POS,
        "set_speed_mps": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "duration_s": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "plant_dt_s": _POS,
        "integrator": {"enum": ["euler", "rk4"]},
        "rear_start_m": _NONNEG,
        "terminal_speed_mps": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "envelope_speed_margin_mps": _NONNEG,
        "stop_after_standstill_s": {"type": ["number", "null"], "minimum": 0},
        "leader_events": {"type": "array", "items": {
            "type": "object",
            "properties": {"t_start_s": _NONNEG, "decel_mps2": _POS,
                           "duration_s": {"type": ["number", "null"], "exclusiveMinimum": 0}},
            "required": ["t_start_s", "decel_mps2"], "additionalProperties": False}},
        "dp": _block(DP_KEYS, {"horizon_cells": {"type": "integer", "minimum": 1},
                               "speed_levels": {"type": "integer", "minimum": 2}}),
        "mpc": _block(MPC_KEYS, {"horizon": {"type": "integer", "minimum": 2},
                                 "Q": {"type": "array", "minItems": 2, "maxItems": 2,
                                       "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
                                 "solver": {"type": "string"}}),
        "tuning": {"type": "object", "properties": {
            "enabled": {"type": "boolean"},
            "target_avg_speed_mps": {"type": ["number", "null"], "exclusiveMinimum": 0},
            "tol_mps": _POS}, "additionalProperties": False},
        "compare": {"type": "object", "properties": {
            "strategies": {"type": "array", "minItems": 1, "items": {"enum": list(STRATEGIES)}},
            "gap_policies": {"type": "array", "minItems": 1, "items": GAP_SCHEMA},
            "speed_tolerance_mps": _POS,
            "jobs": {"type": "integer", "minimum": 1}}, "additionalProperties": False},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
    },
    "required": ["road", "platoon", "strategy", "gap_policy", "mode"],
    "additionalProperties": False,
    "if": {"properties": {"mode": {"const": "closed_loop"}}},
    "then": {"properties": {"duration_s": {"type": "number"},
                            "gap_policy": {"properties": {"kind": {"const": "TG"}}}}},
}


def _defaults_of(cls, keys: dict) -> dict:
    inst = cls()
    out = {}
    for key, name in keys.items():
        value = getattr(inst, name)
        out[key] = [list(r) for r in value] if isinstance(value, tuple) else value
    return out


DEFAULTS: dict = {
    "initial_speed_mps": 22.0,
    "set_speed_mps": None,
    "duration_s": None,
    "plant_dt_s": 0.05,
    "integrator": "euler",
    "rear_start_m": 0.0,
    "terminal_speed_mps": None,
    "envelope_speed_margin_mps": 1.0,
    "stop_after_standstill_s": None,
    "leader_events": [],
    "dp": _defaults_of(DpConfig, DP_KEYS),
    "mpc": _defaults_of(MpcConfig, MPC_KEYS),
    "tuning": {"enabled": False, "target_avg_speed_mps": None, "tol_mps": 0.01},
    "seed": 0,
    "output_dir": "out",
}
VEHICLE_DEFAULTS = _defaults_of(VehicleParams, VEHICLE_KEYS)
COMPARE_DEFAULTS = {"strategies": ["CC", "LAC", "CLAC"], "gap_policies": [{"kind": "TG", "time_gap_s": 1.4}],
                    "speed_tolerance_mps": 0.05, "jobs": 1}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _error_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        path = f"{path}.{missing}" if path else missing
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1] if "'" in err.message else ""
        path = f"{path}.{extra}" if path else extra
    return path or "<root>"


def validate(raw: dict) -> None:
    """Raise :class:`ConfigError` naming the first offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        raise ConfigError(_error_path(err), err.message)


def resolve(raw: dict) -> dict:
    """Validate ``raw`` and fill every default, returning a new dict."""
    validate(raw)
    cfg = _merge(DEFAULTS, raw)
    cfg["platoon"] = [_merge(VEHICLE_DEFAULTS, v) for v in raw["platoon"]]
    if "compare" in raw:
        cfg["compare"] = _merge(COMPARE_DEFAULTS, raw["compare"])
    validate(cfg)
    return cfg


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``dotted.path=value`` override; list items are addressed by index."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like path=value")
    path, text = assignment.split("=", 1)
    keys = path.strip().split(".")
    out = copy.deepcopy(cfg)
    node = out
    for i, key in enumerate(keys[:-1]):
        if isinstance(node, list):
            try:
                node = node[int(key)]
            except (ValueError, IndexError):
                raise ConfigError(".".join(keys[:i + 1]), "no such list item") from None
        else:
            node = node.setdefault(key, {})
    last = keys[-1]
    if isinstance(node, list):
        try:
            node[int(last)] = _coerce(text)
        except (ValueError, IndexError):
            raise ConfigError(path, "no such list item") from None
    else:
        node[last] = _coerce(text)
    return out


@dataclass
class ScenarioConfig:
    """A resolved configuration plus the directory relative paths refer to."""

    data: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str | None = None, overrides=()) -> "ScenarioConfig":
        for item in overrides:
            raw = apply_override(raw, item)
        cfg = cls(resolve(raw), Path(base_dir) if base_dir else Path.cwd())
        cfg.check_files()
        return cfg

    @classmethod
    def from_file(cls, path: Path | str, overrides=()) -> "ScenarioConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path}: invalid JSON ({exc})") from None
        if isinstance(raw, dict) and "config" in raw and "manifest_version" in raw:
            raw = raw["config"]  # a run manifest carries the full resolved config
        return cls.from_dict(raw, path.parent, overrides)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def road_path(self) -> Path | None:
        road = self.data["road"]
        return (self.base_dir / road["path"]).resolve() if road["kind"] == "file" else None

    def check_files(self) -> None:
        path = self.road_path()
        if path is not None and not path.is_file():
            raise ConfigError("road.path", f"file not found: {path}")

    def with_absolute_paths(self) -> dict:
        data = copy.deepcopy(self.data)
        if data["road"]["kind"] == "file":
            data["road"]["path"] = str(self.road_path())
        return data

    # ------------------------------------------------------------------ builders

    def road(self) -> RoadProfile:
        r = self.data["road"]
        limits = tuple(tuple(x) for x in r["speed_limits"]) if "speed_limits" in r else None
        kind = r["kind"]
        if kind == "file":
            road = load_road(self.road_path().read_text())
            if limits is not None:
                road = RoadProfile(road.positions, road.altitudes, limits)
            return road
        if kind == "flat":
            return synth_flat(r["length_m"], limits)
        if kind == "ramp":
            return synth_ramp(r["length_m"], r["rise_m"], limits)
        if kind == "hill":
            return synth_hill(r["approach_m"], r["up_m"], r["up_grade"], r["plateau_m"],
                              r["down_m"], r["down_grade"], r["exit_m"], limits)
        return synth_random_hilly(r["length_m"], r["seed"], r.get("target_fraction", 0.23),
                                  self.platoon()[0], r.get("v_ref_mps", 22.0), limits=limits)

    def platoon(self) -> tuple:
        field_to_key = {name: key for key, name in VEHICLE_KEYS.items()}
        out = []
        for i, blk in enumerate(self.data["platoon"]):
            try:
                out.append(VehicleParams(**{VEHICLE_KEYS[k]: v for k, v in blk.items()}))
            except ValueError as exc:
                m = re.search(r"VehicleParams\.(\w+)", str(exc))
                key = field_to_key.get(m.group(1)) if m else None
                raise ConfigError(f"platoon.{i}.{key}" if key else f"platoon.{i}", str(exc)) from None
        return tuple(out)

    def dp(self) -> DpConfig:
        return DpConfig(**{DP_KEYS[k]: v for k, v in self.data["dp"].items()})

    def mpc(self) -> MpcConfig:
        blk = dict(self.data["mpc"])
        blk["Q"] = tuple(tuple(row) for row in blk["Q"])
        return MpcConfig(**{MPC_KEYS[k]: v for k, v in blk.items()})

    def scenario(self, road: RoadProfile | None = None) -> Scenario:
        d = self.data
        ratio = d["mpc"]["dt_s"] / d["plant_dt_s"]
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("mpc.dt_s", f"must be an integer multiple of plant_dt_s = {d['plant_dt_s']}")
        parts = {}
        for name, build in (("road", lambda: road or self.road()), ("platoon", self.platoon), ("dp", self.dp),
                            ("mpc", self.mpc), ("gap_policy", lambda: gap_policy_from(d["gap_policy"]))):
            try:
                parts[name] = build()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from None
        try:
            return Scenario(
                road=parts["road"], platoon=parts["platoon"], strategy=d["strategy"], gap_policy=parts["gap_policy"],
                mode=d["mode"], v0=d["initial_speed_mps"], v_set=d["set_speed_mps"],
                leader_events=tuple(LeaderEvent(e["t_start_s"], e["decel_mps2"], e.get("duration_s"))
                                    for e in d["leader_events"]),
                duration=d["duration_s"], dp=parts["dp"], mpc=parts["mpc"], plant_dt=d["plant_dt_s"],
                integrator=d["integrator"], rear_start=d["rear_start_m"], terminal_speed=d["terminal_speed_mps"],
                envelope_speed_margin=d["envelope_speed_margin_mps"],
                stop_after_standstill=d["stop_after_standstill_s"], seed=d["seed"])
        except ValueError as exc:
            raise ConfigError("platoon", str(exc)) from None


def gap_policy_from(block: dict) -> GapPolicy:
    kind = block["kind"]
    return GapPolicy(kind, float(block[GAP_VALUE_KEY[kind]]))


def gap_policy_block(policy: GapPolicy) -> dict:
    return {"kind": policy.kind, GAP_VALUE_KEY[policy.kind]: policy.value}


def scenario_to_config(sc: Scenario, road_block: dict) -> dict:
    """Inverse of :meth:`ScenarioConfig.scenario` for a given road block."""
    def unpack(obj, keys):
        out = {}
        for key, name in keys.items():
            v = getattr(obj, name)
            out[key] = [list(r) for r in v] if isinstance(v, tuple) else v
        return out

    return {
        "road": road_block,
        "platoon": [unpack(p, VEHICLE_KEYS) for p in sc.platoon],
        "strategy": sc.strategy, "gap_policy": gap_policy_block(sc.gap_policy), "mode": sc.mode,
        "initial_speed_mps": sc.v0, "set_speed_mps": sc.v_set, "duration_s": sc.duration,
        "plant_dt_s": sc.plant_dt, "integrator": sc.integrator, "rear_start_m": sc.rear_start,
        "terminal_speed_mps": sc.terminal_speed, "envelope_speed_margin_mps": sc.envelope_speed_margin,
        "stop_after_standstill_s": sc.stop_after_standstill,
        "leader_events": [{"t_start_s": e.t_start, "decel_mps2": e.decel, "duration_s": e.duration}
                          for e in sc.leader_events],
        "dp": unpack(sc.dp, DP_KEYS), "mpc": unpack(sc.mpc, MPC_KEYS), "seed": sc.seed,
    }
