"""Road topography and speed limits as functions of longitudinal position."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .errors import DomainError, RoadParseError, RoadValidationError
from .vehicle import VehicleParams, external_force

DEFAULT_V_MIN = 19.0
DEFAULT_V_MAX = 23.6
EXPORT_SPACING = 25.0

UPHILL = "uphill-power-limited"
DOWNHILL = "downhill-braking-required"


@dataclass(frozen=True, eq=False)
class RoadProfile:
    """Piecewise-linear altitude plus piecewise-constant speed limits.

    ``speed_limits`` holds ``(start, v_min, v_max)`` triples; each applies from
    its start position up to the next start (the last one to the road end).
    """

    positions: np.ndarray
    altitudes: np.ndarray
    speed_limits: tuple = ((0.0, DEFAULT_V_MIN, DEFAULT_V_MAX),)
    _slopes: np.ndarray = field(init=False, repr=False)
    _limit_starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        alt = np.array(self.altitudes, dtype=float)
        if pos.ndim != 1 or pos.shape != alt.shape:
            raise RoadValidationError("positions and altitudes must be 1-D arrays of equal length")
        if len(pos) < 2:
            raise RoadValidationError("a road needs at least 2 samples")
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(alt)):
            raise RoadValidationError("non-finite position or altitude")
        dup = np.nonzero(np.diff(pos) <= 0)[0]
        if len(dup):
            raise RoadValidationError(f"positions must be strictly increasing (violated at {pos[dup[0] + 1]:g} m)")
        pos.setflags(write=False)
        alt.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "altitudes", alt)

        limits = tuple(sorted((float(a), float(b), float(c)) for a, b, c in self.speed_limits))
        if not limits:
            limits = ((float(pos[0]), DEFAULT_V_MIN, DEFAULT_V_MAX),)
        for start, vmin, vmax in limits:
            if not (0 < vmin <= vmax):
                raise RoadValidationError(f"invalid speed limits at {start:g} m: require 0 < v_min <= v_max")
        starts = np.array([lim[0] for lim in limits])
        if np.any(np.diff(starts) <= 0):
            raise RoadValidationError("speed-limit segments must have distinct start positions")
        object.__setattr__(self, "speed_limits", limits)
        object.__setattr__(self, "_limit_starts", starts)
        slopes = np.arctan(np.diff(alt) / np.diff(pos))
        slopes.setflags(write=False)
        object.__setattr__(self, "_slopes", slopes)

    @property
    def start(self) -> float:
        return float(self.positions[0])

    @property
    def end(self) -> float:
        return float(self.positions[-1])

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def segment_slopes(self) -> np.ndarray:
        return self._slopes

    def _check(self, s):
        arr = np.asarray(s, dtype=float)
        tol = 1e-9 * max(1.0, abs(self.end))
        if np.any(arr < self.start - tol) or np.any(arr > self.end + tol) or np.any(np.isnan(arr)):
            raise DomainError(f"position outside road [{self.start:g}, {self.end:g}]: {s!r}")
        return arr

    def altitude(self, s):
        arr = self._check(s)
        out = np.interp(arr, self.positions, self.altitudes)
        return float(out) if out.ndim == 0 else out

    def slope(self, s):
        """Secant slope of the segment containing ``s`` (right-open segments)."""
        arr = self._check(s)
        idx = np.clip(np.searchsorted(self.positions, arr, side="right") - 1, 0, len(self._slopes) - 1)
        out = self._slopes[idx]
        return float(out) if out.ndim == 0 else out

    def cell_slope(self, z0: float, z1: float) -> float:
        """Average slope between two positions: atan of the altitude secant."""
        return math.atan((self.altitude(z1) - self.altitude(z0)) / (z1 - z0))

    def limits(self, s):
        """(v_min, v_max) at ``s``; vectorised over arrays."""
        arr = self._check(s)
        idx = np.clip(np.searchsorted(self._limit_starts, arr, side="right") - 1, 0, len(self.speed_limits) - 1)
        table = np.array(self.speed_limits)
        vmin, vmax = table[idx, 1], table[idx, 2]
        if vmin.ndim == 0:
            return float(vmin), float(vmax)
        return vmin, vmax

    def max_abs_slope(self) -> float:
        return float(np.max(np.abs(self._slopes)))

    def clamped_slope(self, s: float) -> float:
        """Slope with positions beyond the ends treated as flat."""
        if s < self.start or s > self.end:
            return 0.0
        return self.slope(s)

    def clamped_limits(self, s):
        arr = np.clip(np.asarray(s, dtype=float), self.start, self.end)
        return self.limits(arr)


def slope_at(profile: RoadProfile, s: float) -> float:
    return profile.slope(s)


def load_road(source: TextIO | str, v_min: float = DEFAULT_V_MIN, v_max: float = DEFAULT_V_MAX) -> RoadProfile:
    """Parse the road CSV format: ``s_m,altitude_m[,vmin_mps,vmax_mps]``.

    Positions are re-based to start at 0. Limit columns take effect from
    their row onward; blank cells keep the previous limits. Files without
    limit columns get ``(v_min, v_max)`` everywhere.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise RoadParseError(1, "empty file") from None
    header = [h.strip() for h in header]
    if header[:2] != ["s_m", "altitude_m"] or header[2:] not in ([], ["vmin_mps", "vmax_mps"]):
        raise RoadParseError(1, f"unexpected header {header!r}")
    has_limits = len(header) == 4

    positions, altitudes, limits = [], [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) not in (2, 4) or (len(row) == 4 and not has_limits):
            raise RoadParseError(line, f"expected {len(header)} columns, got {len(row)}")
        try:
            s, h = float(row[0]), float(row[1])
        except ValueError:
            raise RoadParseError(line, f"non-numeric position/altitude {row[:2]!r}") from None
        positions.append(s)
        altitudes.append(h)
        if has_limits and len(row) == 4 and (row[2].strip() or row[3].strip()):
            try:
                limits.append((s, float(row[2]), float(row[3])))
            except ValueError:
                raise RoadParseError(line, f"non-numeric speed limits {row[2:]!r}") from None
    if len(positions) < 2:
        raise RoadValidationError("a road needs at least 2 samples")
    origin = positions[0]
    positions = [p - origin for p in positions]
    limits = [(s - origin, a, b) for s, a, b in limits]
    if not limits or limits[0][0] > 0:
        limits.insert(0, (0.0, v_min, v_max))
    return RoadProfile(np.array(positions), np.array(altitudes), tuple(limits))


def dump_road(profile: RoadProfile, out: TextIO, spacing: float | None = EXPORT_SPACING) -> None:
    """Write the road CSV format, resampled every ``spacing`` metres.

    Road breakpoints and limit changes are always included, so the written
    file reproduces the profile exactly.
    """
    pts = set(profile.positions.tolist())
    if spacing:
        pts.update(np.arange(profile.start, profile.end, spacing).tolist())
    starts = {lim[0]: lim for lim in profile.speed_limits}
    pts.update(s for s in starts if profile.start <= s <= profile.end)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["s_m", "altitude_m", "vmin_mps", "vmax_mps"])
    for s in sorted(pts):
        row = [repr(float(s)), repr(float(profile.altitude(s)))]
        if s in starts:
            row += [repr(starts[s][1]), repr(starts[s][2])]
        else:
            row += ["", ""]
        writer.writerow(row)


@dataclass(frozen=True)
class SteepSegment:
    start: float
    end: float
    kind: str

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("SteepSegment requires start < end")

    @property
    def length(self) -> float:
        return self.end - self.start


def classify_steep(profile: RoadProfile, params: VehicleParams, v_ref: float) -> list[SteepSegment]:
    """Sections where cruising at ``v_ref`` would exceed P_max or need braking.

    Uses the steady-state force balance of a lone vehicle (no drag reduction).
    """
    if v_ref <= 0:
        raise DomainError("v_ref must be > 0")
    power = -external_force(params, v_ref, math.inf, profile.segment_slopes) * v_ref
    kinds = np.where(power > params.P_max, 1, np.where(power < params.P_min, -1, 0))
    out: list[SteepSegment] = []
    pos = profile.positions
    i, n = 0, len(kinds)
    while i < n:
        if kinds[i] == 0:
            i += 1
            continue
        j = i
        while j + 1 < n and kinds[j + 1] == kinds[i]:
            j += 1
        out.append(SteepSegment(float(pos[i]), float(pos[j + 1]), UPHILL if kinds[i] > 0 else DOWNHILL))
        i = j + 1
    return out


def steep_fraction(profile: RoadProfile, params: VehicleParams, v_ref: float) -> float:
    return sum(seg.length for seg in classify_steep(profile, params, v_ref)) / profile.length


def critical_grades(params: VehicleParams, v_ref: float) -> tuple[float, float]:
    """(downhill, uphill) grade ratios bounding the non-steep band at ``v_ref``."""
    resist = -float(external_force(params, v_ref, math.inf, 0.0))
    weight = params.mass * params.g
    up = math.tan(math.asin((params.P_max / v_ref - resist) / weight))
    down = math.tan(math.asin((params.P_min / v_ref - resist) / weight))
    return down, up


def _from_sections(sections: Iterable[tuple[float, float]], limits=None, start_alt: float = 0.0) -> RoadProfile:
    pos, alt = [0.0], [start_alt]
    for length, grade in sections:
        if length <= 0:
            continue
        pos.append(pos[-1] + length)
        alt.append(alt[-1] + length * grade)
    if len(pos) < 2:
        raise ValueError("road has zero length")
    return RoadProfile(np.array(pos), np.array(alt), limits or ((0.0, DEFAULT_V_MIN, DEFAULT_V_MAX),))


def synth_flat(length: float, limits=None) -> RoadProfile:
    return _from_sections([(length, 0.0)], limits)


def synth_ramp(length: float, rise: float, limits=None) -> RoadProfile:
    return _from_sections([(length, rise / length)], limits)


def synth_hill(approach_len: float, up_len: float, up_grade: float, plateau_len: float,
               down_len: float, down_grade: float, exit_len: float, limits=None) -> RoadProfile:
    """Flat approach, constant-grade climb, plateau, constant-grade descent, flat exit.

    ``down_grade`` is signed (negative for a descent).
    """
    return _from_sections([(approach_len, 0.0), (up_len, up_grade), (plateau_len, 0.0),
                           (down_len, down_grade), (exit_len, 0.0)], limits)


def synth_random_hilly(length: float, seed: int, target_fraction: float = 0.23,
                       params: VehicleParams | None = None, v_ref: float = 22.0,
                       lead_in: float = 1000.0, lead_out: float = 1000.0,
                       tolerance: float = 0.03, max_tries: int = 200, limits=None) -> RoadProfile:
    """Random piecewise-constant-grade road with a target steep fraction.

    Steep climbs are kept short enough that a loaded truck stays above the
    default minimum speed. The draw is repeated (deterministically from
    ``seed``) with an adjusted steep probability until the fraction of steep
    road, as judged by :func:`classify_steep` for ``params`` at ``v_ref``,
    lies within ``tolerance`` of the target.
    """
    params = params or VehicleParams()
    rng = np.random.default_rng(seed)
    down_thr, up_thr = critical_grades(params, v_ref)
    grid = EXPORT_SPACING
    p_steep = min(0.9, max(0.05, target_fraction * 1.2))

    def draw():
        sections = [(lead_in, 0.0)]
        core = 0.0
        core_len = length - lead_in - lead_out
        last_steep = True
        while core < core_len:
            if not last_steep and rng.random() < p_steep:
                if rng.random() < 0.5:
                    seg = (grid * rng.integers(8, 17), rng.uniform(up_thr + 0.002, up_thr + 0.011))
                else:
                    seg = (grid * rng.integers(12, 49), rng.uniform(-0.035, down_thr - 0.002))
                last_steep = True
            else:
                seg = (grid * rng.integers(12, 61), rng.uniform(0.6 * down_thr, 0.85 * up_thr))
                last_steep = False
            seg = (min(seg[0], core_len - core), seg[1])
            sections.append(seg)
            core += seg[0]
        sections.append((lead_out, 0.0))
        return _from_sections(sections, limits)

    best = None
    for _ in range(max_tries):
        road = draw()
        frac = steep_fraction(road, params, v_ref)
        if best is None or abs(frac - target_fraction) < abs(best[1] - target_fraction):
            best = (road, frac)
        if abs(frac - target_fraction) <= tolerance:
            return road
        p_steep = min(0.95, max(0.02, p_steep + 0.5 * (target_fraction - frac)))
    raise RuntimeError(f"could not reach steep fraction {target_fraction:.2f}; best {best[1]:.3f}")
