"""Stability-class-free Gaussian plume baseline.

Spreads are power laws of the along-wind distance, ``sigma = a * x**b``,
with coefficients fitted to simulated data instead of read from Pasquill
tables. The ground-reflected steady-state formula is used::

    C = Q / (2 pi U sy sz) * exp(-yd^2 / (2 sy^2))
          * [exp(-(z - H)^2 / (2 sz^2)) + exp(-(z + H)^2 / (2 sz^2))]

Upwind receptors (``xd <= 0``) read exactly zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import least_squares

from .domain import BeamSensor, PointSensor, SensorLayout, WindSeries, wind_components
from .errors import DegenerateFit, InsufficientData, InvalidParams


@dataclass(frozen=True)
class PlumeParams:
    a_y: float
    b_y: float
    a_z: float
    b_z: float
    speed: float
    direction_from: float
    source_height: float = 0.0

    def __post_init__(self):
        if not (self.a_y > 0 and self.a_z > 0):
            raise InvalidParams(f"spread coefficients must be positive (a_y={self.a_y}, a_z={self.a_z})")
        # b = 0 (constant spread) is admitted alongside the usual (0, 1].
        if not (0 <= self.b_y <= 1 and 0 <= self.b_z <= 1):
            raise InvalidParams(f"spread exponents must lie in [0, 1] (b_y={self.b_y}, b_z={self.b_z})")
        if not self.speed > 0:
            raise InvalidParams("plume wind speed must be positive")

    @property
    def wind_unit(self) -> tuple[float, float]:
        u, v = wind_components(1.0, self.direction_from)
        return float(u), float(v)

    def to_toml_dict(self) -> dict:
        return {"plume": asdict(self)}

    @classmethod
    def from_toml_dict(cls, d: dict) -> "PlumeParams":
        block = d.get("plume", d)
        extra = set(block) - set(cls.__dataclass_fields__)
        if extra:
            raise InvalidParams(f"unknown [plume] keys {sorted(extra)}")
        try:
            return cls(**{k: float(v) for k, v in block.items()})
        except TypeError as exc:
            raise InvalidParams(f"incomplete [plume] block: {exc}") from None


def plume_at_points(sources, points, Q, params: PlumeParams, z: float = 0.0) -> np.ndarray:
    """Concentration at ``points`` (P, 2) from each source (N, 2) -> (N, P)."""
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ex, ey = params.wind_unit
    rx = points[None, :, 0] - sources[:, None, 0]
    ry = points[None, :, 1] - sources[:, None, 1]
    xd = rx * ex + ry * ey
    yd = -rx * ey + ry * ex
    down = xd > 0
    xs = np.where(down, xd, 1.0)
    sy = params.a_y * xs**params.b_y
    sz = params.a_z * xs**params.b_z
    H = params.source_height
    vertical = np.exp(-((z - H) ** 2) / (2 * sz**2)) + np.exp(-((z + H) ** 2) / (2 * sz**2))
    c = np.asarray(Q, dtype=float).reshape(-1, 1) / (2 * np.pi * params.speed * sy * sz) \
        * np.exp(-(yd**2) / (2 * sy**2)) * vertical
    return np.where(down, c, 0.0)


def plume_unit_response(sources, layout: SensorLayout, params: PlumeParams, z: float = 0.0) -> np.ndarray:
    """Unit-emission readings ``(N, m)``; beams average their nodes."""
    pts, avg = layout.quadrature
    return plume_at_points(sources, pts, 1.0, params, z) @ avg.T


def plume_concentration(source, Q: float, sensor, params: PlumeParams, z: float = 0.0) -> float:
    """Reading of one point or beam sensor for a source emitting ``Q`` kg/s."""
    if isinstance(sensor, (PointSensor, BeamSensor)):
        nodes = sensor.nodes()
    else:
        nodes = np.atleast_2d(np.asarray(sensor, dtype=float))
    return float(plume_at_points([tuple(source)[:2]], nodes, Q, params, z).mean())


def window_params_guess(wind: WindSeries, t0: float, t1: float) -> tuple[float, float]:
    """Mean speed and from-direction of the window-averaged wind vector."""
    from .domain import wind_speed_direction

    u, v = wind.mean_uv(t0, t1)
    speed, direction = wind_speed_direction(u, v)
    return max(speed, 1e-6), direction


_STARTS = ((0.5, 0.8, 0.5, 0.8), (1.0, 0.5, 1.0, 0.5), (2.0, 0.3, 2.0, 0.3), (0.2, 0.95, 0.2, 0.95),
           (1.0, 0.9, 0.3, 0.3))


def fit_plume_params(sources, readings, layout: SensorLayout, speed: float, direction_from: float, *,
                     source_height: float = 0.0, floor_fraction: float = 1e-2, max_nfev: int = 2000) -> PlumeParams:
    """Least-squares fit of the spread laws on log concentrations.

    Only readings above ``floor_fraction * max(readings)`` from sensors
    with at least one downwind quadrature node enter the fit. A fixed grid
    of starting points keeps the result deterministic.

    Raises:
        InsufficientData: fewer than 8 rows with usable readings.
        DegenerateFit: no positive downwind readings at all.
    """
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    readings = np.atleast_2d(np.asarray(readings, dtype=float))
    if len(sources) < 8:
        raise InsufficientData(f"need at least 8 rows, got {len(sources)}")
    peak = float(readings.max()) if readings.size else 0.0
    if not peak > 0:
        raise DegenerateFit("all readings are zero or negative")
    probe = PlumeParams(1.0, 0.5, 1.0, 0.5, speed, direction_from, source_height)
    downwind = plume_unit_response(sources, layout, probe) > 0
    use = (readings > floor_fraction * peak) & downwind
    if not use.any():
        raise DegenerateFit("no positive readings at downwind sensors")
    if int(use.any(axis=1).sum()) < 8:
        raise InsufficientData("fewer than 8 rows have usable downwind readings")
    target = np.log(readings[use])

    def build(theta):
        return PlumeParams(float(np.exp(theta[0])), float(theta[1]), float(np.exp(theta[2])), float(theta[3]),
                           speed, direction_from, source_height)

    def resid(theta):
        pred = plume_unit_response(sources, layout, build(theta))[use]
        return np.log(np.maximum(pred, 1e-300)) - target

    lo = [np.log(1e-3), 0.0, np.log(1e-3), 0.0]
    hi = [np.log(1e3), 1.0, np.log(1e3), 1.0]
    best = None
    for a_y, b_y, a_z, b_z in _STARTS:
        x0 = np.array([np.log(a_y), b_y, np.log(a_z), b_z])
        res = least_squares(resid, x0, bounds=(lo, hi), method="trf", x_scale="jac",
                            xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=max_nfev)
        if best is None or res.cost < best.cost:
            best = res
    return build(best.x)
