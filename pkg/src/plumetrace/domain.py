"""Shared domain types, scenario construction and file ingestion.

Coordinates are meters with the origin in the south-west corner; ``x``
grows east and ``y`` grows north. Wind directions use the meteorological
convention (degrees the wind blows *from*). Concentrations are kg/m^3 with
a unit (1 m) depth for the 2D plane.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import tomli
import tomli_w

from .errors import (
    EmptySeries,
    EmptyWindow,
    InvalidConfig,
    MalformedRow,
    NonMonotonicTime,
)

# Methane at 25 C and 1 atm: 1 ppm = 0.656 mg/m^3.
KG_M3_PER_PPM_CH4 = 6.56e-7

SCENARIO_SCHEMA_VERSION = 1


def ppm_to_kg_m3(ppm):
    return np.asarray(ppm, dtype=float) * KG_M3_PER_PPM_CH4


def kg_m3_to_ppm(c):
    return np.asarray(c, dtype=float) / KG_M3_PER_PPM_CH4


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    """Axis-aligned solid obstacle, ``[x0, x1] x [y0, y1]`` in meters."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise InvalidConfig(f"degenerate obstacle rectangle {self}")


@dataclass(frozen=True)
class Domain:
    """Rectangular site discretized into ``nx * ny`` cells.

    A cell is solid when its center lies inside any obstacle rectangle.
    """

    width: float
    height: float
    nx: int
    ny: int
    obstacles: tuple[Rect, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.nx < 4 or self.ny < 4:
            raise InvalidConfig(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if not (self.width > 0 and self.height > 0):
            raise InvalidConfig("domain width and height must be positive")
        mask = self.obstacle_mask
        if mask.all(axis=0).any() or mask.all(axis=1).any():
            raise InvalidConfig("obstacles block an entire grid row or column")

    @property
    def dx(self) -> float:
        return self.width / self.nx

    @property
    def dy(self) -> float:
        return self.height / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @cached_property
    def cell_x(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    @cached_property
    def cell_y(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.dy

    @cached_property
    def obstacle_mask(self) -> np.ndarray:
        """Boolean ``(ny, nx)`` array, True for solid cells."""
        X, Y = np.meshgrid(self.cell_x, self.cell_y)
        mask = np.zeros((self.ny, self.nx), dtype=bool)
        for r in self.obstacles:
            mask |= (X >= r.x0) & (X <= r.x1) & (Y >= r.y0) & (Y <= r.y1)
        mask.setflags(write=False)
        return mask

    @cached_property
    def fluid_mask(self) -> np.ndarray:
        m = ~self.obstacle_mask
        m.setflags(write=False)
        return m

    def contains(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x >= 0) & (x <= self.width) & (y >= 0) & (y <= self.height)

    def cell_index(self, x, y):
        """Indices ``(j, i)`` of the cells containing the points (clipped)."""
        i = np.clip(np.floor(np.asarray(x, dtype=float) / self.dx).astype(int), 0, self.nx - 1)
        j = np.clip(np.floor(np.asarray(y, dtype=float) / self.dy).astype(int), 0, self.ny - 1)
        return j, i

    def is_fluid(self, x, y):
        """True where the point lies inside the domain and in a fluid cell."""
        j, i = self.cell_index(x, y)
        return self.contains(x, y) & self.fluid_mask[j, i]


# ---------------------------------------------------------------------------
# Wind
# ---------------------------------------------------------------------------


def wind_components(speed, direction_from):
    """Meteorological (speed, from-direction in degrees) to (u, v)."""
    rad = np.deg2rad(direction_from)
    return -speed * np.sin(rad), -speed * np.cos(rad)


def wind_speed_direction(u, v):
    """Inverse of :func:`wind_components`; direction in [0, 360)."""
    speed = math.hypot(u, v)
    if speed == 0.0:
        return 0.0, 0.0
    direction = math.degrees(math.atan2(-u, -v)) % 360.0
    return speed, direction


@dataclass(frozen=True)
class WindSample:
    t: float
    speed: float
    direction_from: float

    def __post_init__(self):
        if not self.speed >= 0 or not math.isfinite(self.speed):
            raise InvalidConfig(f"wind speed must be finite and >= 0, got {self.speed}")

    @property
    def u(self) -> float:
        return float(-self.speed * math.sin(math.radians(self.direction_from)))

    @property
    def v(self) -> float:
        return float(-self.speed * math.cos(math.radians(self.direction_from)))

    @classmethod
    def from_uv(cls, t: float, u: float, v: float) -> "WindSample":
        speed, direction = wind_speed_direction(u, v)
        return cls(float(t), speed, direction)


@dataclass(frozen=True)
class WindSeries:
    samples: tuple[WindSample, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise EmptySeries("wind series is empty")
        ts = [s.t for s in self.samples]
        for a, b in zip(ts, ts[1:]):
            if not b > a:
                raise NonMonotonicTime(f"wind times must strictly increase ({a} then {b})")

    @cached_property
    def _arrays(self):
        t = np.array([s.t for s in self.samples])
        u = np.array([s.u for s in self.samples])
        v = np.array([s.v for s in self.samples])
        return t, u, v

    def uv_at(self, t) -> tuple[np.ndarray, np.ndarray]:
        ts, us, vs = self._arrays
        return np.interp(t, ts, us), np.interp(t, ts, vs)

    def mean_uv(self, t0: float, t1: float, n: int = 241) -> tuple[float, float]:
        """Time-averaged wind vector over ``[t0, t1]`` (trapezoid rule)."""
        ts = np.linspace(t0, t1, n)
        u, v = self.uv_at(ts)
        return float(np.trapezoid(u, ts) / (t1 - t0)), float(np.trapezoid(v, ts) / (t1 - t0))

    def mean_speed(self, t0: float, t1: float) -> float:
        ts = np.linspace(t0, t1, 241)
        u, v = self.uv_at(ts)
        return float(np.mean(np.hypot(u, v)))


def wind_at(series: WindSeries, t: float) -> WindSample:
    """Linear interpolation of the wind vector, clamped outside the record."""
    u, v = series.uv_at(t)
    return WindSample.from_uv(t, float(u), float(v))


def load_wind_csv(path: Union[str, Path]) -> WindSeries:
    """Read a ``t,speed,direction_from`` CSV into a :class:`WindSeries`."""
    path = Path(path)
    samples = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptySeries(f"{path}: file is empty") from None
        if [h.strip() for h in header] != ["t", "speed", "direction_from"]:
            raise MalformedRow(path, 1, f"expected header 't,speed,direction_from', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise MalformedRow(path, lineno, f"expected 3 fields, got {len(row)}")
            try:
                t, speed, direction = (float(c) for c in row)
            except ValueError:
                raise MalformedRow(path, lineno, f"non-numeric field in {row!r}") from None
            if not all(math.isfinite(x) for x in (t, speed, direction)) or speed < 0:
                raise MalformedRow(path, lineno, f"invalid values {row!r}")
            if samples and not t > samples[-1].t:
                raise NonMonotonicTime(f"{path}:{lineno}: t={t} follows t={samples[-1].t}")
            samples.append(WindSample(t, speed, direction % 360.0))
    if not samples:
        raise EmptySeries(f"{path}: no wind samples")
    return WindSeries(tuple(samples))


# ---------------------------------------------------------------------------
# Sensors and observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointSensor:
    x: float
    y: float

    def nodes(self) -> np.ndarray:
        return np.array([[self.x, self.y]])


@dataclass(frozen=True)
class BeamSensor:
    """Path-averaged sensor between two endpoints."""

    x0: float
    y0: float
    x1: float
    y1: float
    n_quadrature: int = 16

    def __post_init__(self):
        if self.n_quadrature < 2:
            raise InvalidConfig("beam n_quadrature must be >= 2")
        if (self.x0, self.y0) == (self.x1, self.y1):
            raise InvalidConfig("beam endpoints must be distinct")

    def nodes(self) -> np.ndarray:
        s = np.linspace(0.0, 1.0, self.n_quadrature)
        return np.column_stack([self.x0 + s * (self.x1 - self.x0), self.y0 + s * (self.y1 - self.y0)])


Sensor = Union[PointSensor, BeamSensor]


@dataclass(frozen=True)
class SensorLayout:
    sensors: tuple[Sensor, ...]

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(self.sensors))
        if not self.sensors:
            raise InvalidConfig("sensor layout is empty")

    def __len__(self):
        return len(self.sensors)

    @cached_property
    def quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        """All sample nodes ``(P, 2)`` and the ``(m, P)`` averaging matrix."""
        nodes = [s.nodes() for s in self.sensors]
        pts = np.vstack(nodes)
        avg = np.zeros((len(nodes), len(pts)))
        k = 0
        for row, n in enumerate(nodes):
            avg[row, k : k + len(n)] = 1.0 / len(n)
            k += len(n)
        return pts, avg

    def validate(self, domain: Domain) -> None:
        for idx, s in enumerate(self.sensors):
            ends = s.nodes() if isinstance(s, PointSensor) else np.array([[s.x0, s.y0], [s.x1, s.y1]])
            if not domain.is_fluid(ends[:, 0], ends[:, 1]).all():
                raise InvalidConfig(f"sensor {idx} lies outside the domain or inside an obstacle")


@dataclass(frozen=True)
class SensorObservation:
    t: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or not np.isfinite(vals).all():
            raise InvalidConfig("observation values must be a finite 1-D vector")
        object.__setattr__(self, "values", vals)


def write_observation_csv(path: Union[str, Path], times, readings) -> None:
    """``t,sensor_0..sensor_{m-1}`` with shortest round-trip float text."""
    readings = np.atleast_2d(np.asarray(readings, dtype=float))
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["t"] + [f"sensor_{j}" for j in range(readings.shape[1])]) + "\n")
        for t, row in zip(times, readings):
            fh.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")


def load_observation_csv(path: Union[str, Path], n_sensors: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Read an observation CSV back into ``(times, readings)``."""
    path = Path(path)
    times, rows = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptySeries(f"{path}: file is empty") from None
        m = len(header) - 1
        if not header or header[0] != "t" or header[1:] != [f"sensor_{j}" for j in range(m)] or m < 1:
            raise MalformedRow(path, 1, "expected header 't,sensor_0,...'")
        if n_sensors is not None and m != n_sensors:
            raise MalformedRow(path, 1, f"file has {m} sensor columns, the scenario has {n_sensors}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != m + 1:
                raise MalformedRow(path, lineno, f"expected {m + 1} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise MalformedRow(path, lineno, f"non-numeric field in {row!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise MalformedRow(path, lineno, "non-finite value")
            if times and not vals[0] > times[-1]:
                raise NonMonotonicTime(f"{path}:{lineno}: t={vals[0]} follows t={times[-1]}")
            times.append(vals[0])
            rows.append(vals[1:])
    if not times:
        raise EmptySeries(f"{path}: no observation rows")
    return np.array(times), np.array(rows)


# ---------------------------------------------------------------------------
# Background and emissions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantBackground:
    levels: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(x) for x in self.levels))
        if any(x < 0 for x in self.levels):
            raise InvalidConfig("background levels must be >= 0")


@dataclass(frozen=True)
class RollingQuantileBackground:
    window_s: float
    quantile: float = 0.1

    def __post_init__(self):
        if not 0 < self.quantile < 1:
            raise InvalidConfig("background quantile must lie in (0, 1)")
        if not self.window_s > 0:
            raise InvalidConfig("background window must be positive")


BackgroundModel = Union[ConstantBackground, RollingQuantileBackground]


def background_at(model: BackgroundModel, times, values, t: float) -> np.ndarray:
    """Background level per sensor at time ``t``.

    Args:
        model: Constant or rolling-quantile background model.
        times: ``(T,)`` observation times (ignored for constant mode).
        values: ``(T, m)`` per-sensor readings (ignored for constant mode).
        t: Query time in seconds.
    """
    if isinstance(model, ConstantBackground):
        return np.array(model.levels, dtype=float)
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = (times >= t - model.window_s) & (times <= t)
    if not keep.any():
        raise EmptyWindow(f"no observations in [{t - model.window_s}, {t}]")
    # Nearest-rank definition: the ceil(q*n)-th order statistic.
    return np.quantile(values[keep], model.quantile, axis=0, method="inverted_cdf")


@dataclass(frozen=True)
class EmissionProfile:
    """Piecewise-linear emission rate, held constant outside its knots."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(t), float(r)) for t, r in self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise InvalidConfig("emission profile is empty")
        for (a, _), (b, _) in zip(pts, pts[1:]):
            if not b > a:
                raise InvalidConfig("emission profile times must strictly increase")
        if any(not (math.isfinite(r) and r >= 0) for _, r in pts):
            raise InvalidConfig("emission rates must be finite and >= 0")

    @classmethod
    def constant(cls, rate: float) -> "EmissionProfile":
        return cls(((0.0, rate),))

    def rate_at(self, t):
        ts = [p[0] for p in self.points]
        rs = [p[1] for p in self.points]
        return np.interp(t, ts, rs)

    def mean_rate(self, t0: float, t1: float) -> float:
        ts = np.array([p[0] for p in self.points])
        inner = ts[(ts > t0) & (ts < t1)]
        knots = np.concatenate([[t0], inner, [t1]])
        return float(np.trapezoid(self.rate_at(knots), knots) / (t1 - t0))


@dataclass(frozen=True)
class Source:
    x: float
    y: float
    profile: EmissionProfile


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverParams:
    """Physical and numerical parameters shared by the flow and gas solvers."""

    viscosity: float = 1e-2
    diffusivity: float = 0.1
    injection_radius: float = 1.0
    projection_tol: float = 1e-10
    projection_max_iter: int = 4
    spinup_cap: float = 120.0
    flow_origin: Optional[float] = None  # common flow start time; None spins up per run


@dataclass(frozen=True)
class Scenario:
    domain: Domain
    wind: WindSeries
    layout: SensorLayout
    background: BackgroundModel
    sources: tuple[Source, ...]
    sensor_noise_sd: float
    dt_sim: float
    duration: float
    seed: int
    solver: SolverParams = field(default_factory=SolverParams)
    unit: str = "kg/m3"
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.dt_sim > 0:
            raise InvalidConfig("dt_sim must be positive")
        steps = self.duration / self.dt_sim
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise InvalidConfig("duration must be a multiple of dt_sim")
        if not self.sensor_noise_sd >= 0:
            raise InvalidConfig("sensor_noise_sd must be >= 0")
        if isinstance(self.background, ConstantBackground) and len(self.background.levels) != len(self.layout):
            raise InvalidConfig("constant background needs one level per sensor")
        self.layout.validate(self.domain)
        for s in self.sources:
            if not self.domain.is_fluid(s.x, s.y):
                raise InvalidConfig(f"source at ({s.x}, {s.y}) is outside the fluid domain")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt_sim))


def _sensor_to_dict(s: Sensor) -> dict:
    if isinstance(s, PointSensor):
        return {"kind": "point", "x": s.x, "y": s.y}
    return {"kind": "beam", "x0": s.x0, "y0": s.y0, "x1": s.x1, "y1": s.y1, "n_quadrature": s.n_quadrature}


_SENSOR_KEYS = {"point": {"kind", "x", "y"}, "beam": {"kind", "x0", "y0", "x1", "y1", "n_quadrature"}}


def _sensor_from_dict(d: dict) -> Sensor:
    kind = d.get("kind", "point")
    if kind not in _SENSOR_KEYS:
        raise InvalidConfig(f"unknown sensor kind {kind!r}")
    _check_keys("sensors", d, _SENSOR_KEYS[kind])
    try:
        if kind == "point":
            return PointSensor(float(d["x"]), float(d["y"]))
        return BeamSensor(float(d["x0"]), float(d["y0"]), float(d["x1"]), float(d["y1"]),
                          int(d.get("n_quadrature", 16)))
    except KeyError as exc:
        raise InvalidConfig(f"sensor missing field {exc}") from None


def scenario_to_dict(sc: Scenario) -> dict:
    bg = sc.background
    if isinstance(bg, ConstantBackground):
        background = {"mode": "constant", "levels": list(bg.levels)}
    else:
        background = {"mode": "rolling_quantile", "window_s": bg.window_s, "quantile": bg.quantile}
    return {
        "schema_version": SCENARIO_SCHEMA_VERSION,
        "name": sc.name,
        "seed": int(sc.seed),
        "dt_sim": sc.dt_sim,
        "duration": sc.duration,
        "unit": sc.unit,
        "domain": {
            "width": sc.domain.width,
            "height": sc.domain.height,
            "nx": sc.domain.nx,
            "ny": sc.domain.ny,
            "obstacles": [[r.x0, r.y0, r.x1, r.y1] for r in sc.domain.obstacles],
        },
        "wind": {
            "t": [w.t for w in sc.wind.samples],
            "speed": [w.speed for w in sc.wind.samples],
            "direction_from": [w.direction_from for w in sc.wind.samples],
        },
        "background": background,
        "noise": {"sensor_noise_sd": sc.sensor_noise_sd},
        "solver": {
            "viscosity": sc.solver.viscosity,
            "diffusivity": sc.solver.diffusivity,
            "injection_radius": sc.solver.injection_radius,
            "projection_tol": sc.solver.projection_tol,
            "projection_max_iter": sc.solver.projection_max_iter,
            "spinup_cap": sc.solver.spinup_cap,
            **({} if sc.solver.flow_origin is None else {"flow_origin": sc.solver.flow_origin}),
        },
        "sensors": [_sensor_to_dict(s) for s in sc.layout.sensors],
        "sources": [
            {"x": s.x, "y": s.y, "profile_t": [p[0] for p in s.profile.points],
             "profile_rate": [p[1] for p in s.profile.points]}
            for s in sc.sources
        ],
    }


_TOP_KEYS = {"schema_version", "name", "seed", "dt_sim", "duration", "unit", "domain", "wind",
             "background", "noise", "solver", "sensors", "sources"}


def _check_keys(section: str, d: dict, allowed: set) -> None:
    extra = set(d) - allowed
    if extra:
        raise InvalidConfig(f"unknown keys in [{section}]: {sorted(extra)}")


def scenario_from_dict(d: dict, base_dir: Union[str, Path, None] = None) -> Scenario:
    _check_keys("top level", d, _TOP_KEYS)
    try:
        dom = d["domain"]
        _check_keys("domain", dom, {"width", "height", "nx", "ny", "obstacles"})
        domain = Domain(
            float(dom["width"]), float(dom["height"]), int(dom["nx"]), int(dom["ny"]),
            tuple(Rect(*map(float, r)) for r in dom.get("obstacles", [])),
        )
        w = d["wind"]
        _check_keys("wind", w, {"t", "speed", "direction_from", "csv"})
        if "csv" in w:
            p = Path(w["csv"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            wind = load_wind_csv(p)
        else:
            wind = WindSeries(tuple(
                WindSample(float(t), float(s), float(a))
                for t, s, a in zip(w["t"], w["speed"], w["direction_from"])
            ))
        sensors = SensorLayout(tuple(_sensor_from_dict(s) for s in d["sensors"]))
        bg = d.get("background", {"mode": "constant", "levels": [0.0] * len(sensors)})
        mode = bg.get("mode", "constant")
        if mode == "constant":
            _check_keys("background", bg, {"mode", "levels"})
            levels = bg["levels"]
            if isinstance(levels, (int, float)):
                levels = [levels] * len(sensors)
            background: BackgroundModel = ConstantBackground(tuple(levels))
        elif mode == "rolling_quantile":
            _check_keys("background", bg, {"mode", "window_s", "quantile"})
            background = RollingQuantileBackground(float(bg["window_s"]), float(bg.get("quantile", 0.1)))
        else:
            raise InvalidConfig(f"unknown background mode {mode!r}")
        noise = d.get("noise", {})
        _check_keys("noise", noise, {"sensor_noise_sd"})
        solver_d = d.get("solver", {})
        _check_keys("solver", solver_d, set(SolverParams.__dataclass_fields__))
        solver = SolverParams(**solver_d)
        sources = []
        for s in d.get("sources", []):
            _check_keys("sources", s, {"x", "y", "profile_t", "profile_rate"})
            prof = EmissionProfile(tuple(zip(s["profile_t"], s["profile_rate"])))
            sources.append(Source(float(s["x"]), float(s["y"]), prof))
        return Scenario(
            domain=domain, wind=wind, layout=sensors, background=background,
            sources=tuple(sources), sensor_noise_sd=float(noise.get("sensor_noise_sd", 0.0)),
            dt_sim=float(d["dt_sim"]), duration=float(d["duration"]), seed=int(d["seed"]),
            solver=solver, unit=str(d.get("unit", "kg/m3")), name=str(d.get("name", "scenario")),
        )
    except KeyError as exc:
        raise InvalidConfig(f"scenario missing required key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidConfig):
            raise
        raise InvalidConfig(f"invalid scenario value: {exc}") from None


def dump_scenario(sc: Scenario) -> str:
    return tomli_w.dumps(scenario_to_dict(sc))


def loads_scenario(text: str, base_dir=None) -> Scenario:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise InvalidConfig(f"invalid TOML: {exc}") from None
    return scenario_from_dict(data, base_dir=base_dir)


def save_scenario(sc: Scenario, path: Union[str, Path]) -> None:
    Path(path).write_text(dump_scenario(sc), encoding="utf-8")


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    return loads_scenario(path.read_text(encoding="utf-8"), base_dir=path.parent)


# ---------------------------------------------------------------------------
# Obstructed case study
# ---------------------------------------------------------------------------

CASE_STUDY_WIDTH = 200.0
CASE_STUDY_HEIGHT = 200.0
CASE_STUDY_DURATION = 600.0
CASE_STUDY_N_SENSORS = 20

CASE_STUDY_OBSTACLES = (
    Rect(100.0, 40.0, 116.0, 76.0),
    Rect(112.0, 96.0, 128.0, 124.0),
    Rect(96.0, 140.0, 112.0, 172.0),
    Rect(140.0, 64.0, 152.0, 88.0),
    Rect(140.0, 120.0, 152.0, 148.0),
)

# (x, y, profile knots); event 1 rises, event 2 drops sharply at minute 5,
# event 3 decays with a fluctuation.
CASE_STUDY_EVENTS = {
    1: (40.0, 108.0, ((0.0, 0.6), (600.0, 1.2))),
    2: (52.0, 60.0, ((0.0, 1.2), (295.0, 1.2), (305.0, 0.6), (600.0, 0.6))),
    3: (64.0, 152.0, ((0.0, 1.3), (200.0, 1.05), (300.0, 1.0), (400.0, 0.8), (600.0, 0.65))),
}


@dataclass(frozen=True)
class CaseStudyConfig:
    """Knobs for the synthetic obstructed-site scenario.

    ``event`` selects one of the three built-in releases; passing
    ``custom_source`` overrides it with ``(x, y, EmissionProfile)``.
    """

    event: int = 1
    custom_source: tuple | None = None
    nx: int = 50
    ny: int = 50
    dt_sim: float = 0.5
    duration: float = CASE_STUDY_DURATION
    mean_speed: float = 2.5
    mean_direction: float = 270.0
    meander_deg: float = 14.0
    diffusivity: float = 3.0
    viscosity: float = 1e-2
    sensor_noise_sd: float = 0.0
    background_level: float = 0.0
    wind_dt: float = 10.0
    sensor_columns: tuple = (88.0, 185.0)


def build_case_study_scenario(config: CaseStudyConfig, seed: int) -> Scenario:
    """Obstructed 200 m x 200 m site with a line of 20 point sensors.

    The wind record depends only on ``seed`` (and the wind knobs), so all
    three events share a site and can share trained surrogates.
    """
    if config.custom_source is not None:
        try:
            x, y, profile = config.custom_source
        except (TypeError, ValueError):
            raise InvalidConfig("custom_source must be (x, y, EmissionProfile)") from None
        if not isinstance(profile, EmissionProfile):
            profile = EmissionProfile(tuple(profile))
    elif config.event in CASE_STUDY_EVENTS:
        x, y, knots = CASE_STUDY_EVENTS[config.event]
        profile = EmissionProfile(knots)
    else:
        raise InvalidConfig(f"unknown case-study event {config.event!r}; choose 1, 2 or 3")
    if config.duration <= 0:
        raise InvalidConfig("duration must be positive")

    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
    periods = rng.uniform([240.0, 90.0, 200.0, 70.0], [360.0, 140.0, 300.0, 110.0])
    ts = np.arange(0.0, config.duration + config.wind_dt, config.wind_dt)
    direction = (
        config.mean_direction
        + config.meander_deg * np.sin(2 * np.pi * ts / periods[0] + phases[0])
        + 0.4 * config.meander_deg * np.sin(2 * np.pi * ts / periods[1] + phases[1])
    )
    speed = config.mean_speed * (
        1.0 + 0.12 * np.sin(2 * np.pi * ts / periods[2] + phases[2])
        + 0.05 * np.sin(2 * np.pi * ts / periods[3] + phases[3])
    )
    wind = WindSeries(tuple(
        WindSample(float(t), round(float(s), 6), round(float(a) % 360.0, 6))
        for t, s, a in zip(ts, speed, direction)
    ))

    cols = tuple(config.sensor_columns)
    if not cols or CASE_STUDY_N_SENSORS % len(cols):
        raise InvalidConfig(f"sensor_columns must split {CASE_STUDY_N_SENSORS} sensors evenly")
    ys = np.linspace(15.0, CASE_STUDY_HEIGHT - 15.0, CASE_STUDY_N_SENSORS // len(cols))
    layout = SensorLayout(tuple(PointSensor(float(x), float(round(y, 6))) for x in cols for y in ys))

    domain = Domain(CASE_STUDY_WIDTH, CASE_STUDY_HEIGHT, config.nx, config.ny, CASE_STUDY_OBSTACLES)
    return Scenario(
        domain=domain,
        wind=wind,
        layout=layout,
        background=ConstantBackground((config.background_level,) * CASE_STUDY_N_SENSORS),
        sources=(Source(float(x), float(y), profile),),
        sensor_noise_sd=config.sensor_noise_sd,
        dt_sim=config.dt_sim,
        duration=config.duration,
        seed=int(seed),
        solver=SolverParams(viscosity=config.viscosity, diffusivity=config.diffusivity,
                            flow_origin=-crossing_time(domain, wind, 0.0, config.duration, config.dt_sim)),
        name=f"case-study-event-{config.event if config.custom_source is None else 'custom'}",
    )


def crossing_time(domain: Domain, wind: WindSeries, t0: float, t1: float, dt: float, cap: float = 120.0) -> float:
    """Domain crossing time at the mean speed over [t0, t1], capped and
    rounded up to a whole number of steps."""
    speed = wind.mean_speed(t0, t1)
    kappa = cap if speed <= 0 else min(domain.width / speed, cap)
    return math.ceil(kappa / dt - 1e-9) * dt


def with_sources(sc: Scenario, sources: Sequence[Source]) -> Scenario:
    return replace(sc, sources=tuple(sources))
