"""Gas advection-diffusion through a precomputed flow, and sensor sampling.

The gas step is linear in the field, so each step is assembled once as a
pair of sparse operators (semi-Lagrangian advection, explicit diffusion)
and applied to a whole batch of source hypotheses at once: column ``k`` of
the ``(n_cells, K)`` batch holds the field produced by source ``k``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .domain import Domain, Scenario, SensorLayout, WindSeries, crossing_time, wind_at
from .errors import InvalidConfig, NumericalError, StabilityViolation
from .flow import INFLOW, FlowConfig, FlowState, VelocitySampler, initial_flow, step_flow

NEGATIVE_ALARM = -1e-12
DEBUG = bool(os.environ.get("PLUMETRACE_DEBUG"))


@dataclass(frozen=True)
class TransportConfig:
    diffusivity: float = 0.1
    dt: float = 0.1
    # Half-width of the square source footprint (2 m x 2 m by default).
    injection_radius: float = 1.0

    def __post_init__(self):
        if self.diffusivity < 0:
            raise InvalidConfig("diffusivity must be >= 0")
        if not self.dt > 0:
            raise InvalidConfig("transport dt must be positive")
        if not self.injection_radius > 0:
            raise InvalidConfig("injection_radius must be positive")


@dataclass(frozen=True)
class GasField:
    c: np.ndarray
    t: float


def check_diffusion_stability(config: TransportConfig, domain: Domain) -> None:
    D = config.diffusivity
    if D > 0 and D * config.dt * (1 / domain.dx**2 + 1 / domain.dy**2) > 0.5 * (1 + 1e-12):
        raise StabilityViolation(
            f"explicit diffusion unstable: D={D} m^2/s, dt={config.dt} s, dx={domain.dx} m "
            f"(need dt <= {0.5 / (D * (1 / domain.dx**2 + 1 / domain.dy**2)):.6g} s)"
        )


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def advection_matrix(flow: FlowState, domain: Domain, dt: float) -> sp.csr_matrix:
    """Semi-Lagrangian bilinear advection of cell-centered values.

    Ghost cells past an inflow edge, or past any edge face where the flow
    enters the domain (backflow at an outflow edge), hold clean air; other
    ghosts copy the nearest edge cell. Weights landing on solid cells are
    dropped and the rest renormalized.
    """
    ny, nx = domain.shape
    dx, dy = domain.dx, domain.dy
    mask = domain.obstacle_mask
    n = nx * ny
    sampler = VelocitySampler(flow.u, flow.v, dx, dy, flow.boundary)
    jj, ii = np.mgrid[0:ny, 0:nx]
    x = (ii + 0.5) * dx
    y = (jj + 0.5) * dy
    xb, yb = sampler.backtrace(x, y, dt)
    # Work in padded index space so zero flow maps exactly onto the cell.
    fi = np.clip(ii + 1.0 - (x - xb) / dx, 0.0, nx + 1.0)
    fj = np.clip(jj + 1.0 - (y - yb) / dy, 0.0, ny + 1.0)
    i0 = np.minimum(np.floor(fi).astype(np.int64), nx)
    j0 = np.minimum(np.floor(fj).astype(np.int64), ny)
    a = fi - i0
    b = fj - j0

    west, east, south, north = flow.boundary
    rows = np.arange(n).reshape(ny, nx)
    cols_all, wts_all, fluid_all = [], [], []
    for di, dj, w in ((0, 0, (1 - a) * (1 - b)), (1, 0, a * (1 - b)), (0, 1, (1 - a) * b), (1, 1, a * b)):
        pi = i0 + di  # padded indices, 0 and nx+1 / ny+1 are ghosts
        pj = j0 + dj
        ci = np.clip(pi - 1, 0, nx - 1)
        cj = np.clip(pj - 1, 0, ny - 1)
        clean = ((pi == 0) & ((west == INFLOW) | (flow.u[cj, 0] > 0))) \
            | ((pi == nx + 1) & ((east == INFLOW) | (flow.u[cj, nx] < 0))) \
            | ((pj == 0) & ((south == INFLOW) | (flow.v[0, ci] > 0))) \
            | ((pj == ny + 1) & ((north == INFLOW) | (flow.v[ny, ci] < 0)))
        solid = mask[cj, ci] & ~clean
        cols_all.append(np.where(clean, -1, cj * nx + ci))
        wts_all.append(w)
        fluid_all.append(~solid)
    W = np.stack(wts_all)
    keep = np.stack(fluid_all)
    W = np.where(keep, W, 0.0)
    total = W.sum(axis=0)
    scale = np.zeros_like(total)
    ok = (total > 0) & ~mask
    scale[ok] = 1.0 / total[ok]
    # Avoid touching exact weights for rows with no solid neighbors.
    scale[ok & np.all(keep, axis=0)] = 1.0
    W = W * scale
    C = np.stack(cols_all)
    sel = (W > 0) & (C >= 0)
    R = np.broadcast_to(rows, W.shape)
    A = sp.csr_matrix((W[sel], (R[sel], C[sel])), shape=(n, n))
    A.sum_duplicates()
    A.eliminate_zeros()
    return A


@lru_cache(maxsize=16)
def _diffusion_matrix_cached(mask_bytes, shape, dx, dy, coeff_x, coeff_y):
    ny, nx = shape
    fluid = ~np.frombuffer(mask_bytes, dtype=bool).reshape(shape)
    n = nx * ny
    idx = np.arange(n).reshape(shape)
    diag = np.ones(n)
    rows, cols, vals = [], [], []
    for (a_sl, b_sl, c) in (((np.s_[:, :-1]), (np.s_[:, 1:]), coeff_x), ((np.s_[:-1, :]), (np.s_[1:, :]), coeff_y)):
        both = fluid[a_sl] & fluid[b_sl]
        ia = idx[a_sl][both]
        ib = idx[b_sl][both]
        rows += [ia, ib]
        cols += [ib, ia]
        vals += [np.full(ia.size, c), np.full(ib.size, c)]
        np.subtract.at(diag, ia, c)
        np.subtract.at(diag, ib, c)
    diag[~fluid.ravel()] = 0.0
    M = sp.csr_matrix(
        (np.concatenate(vals + [diag]), (np.concatenate(rows + [np.arange(n)]), np.concatenate(cols + [np.arange(n)]))),
        shape=(n, n),
    )
    M.sum_duplicates()
    return M


def diffusion_matrix(domain: Domain, config: TransportConfig) -> Optional[sp.csr_matrix]:
    """``I + D dt L`` with no-flux walls and obstacles; None when ``D == 0``."""
    if config.diffusivity == 0:
        return None
    check_diffusion_stability(config, domain)
    D, dt = config.diffusivity, config.dt
    return _diffusion_matrix_cached(
        domain.obstacle_mask.tobytes(), domain.shape, domain.dx, domain.dy,
        D * dt / domain.dx**2, D * dt / domain.dy**2,
    )


def _overlap_1d(lo: float, hi: float, edges: np.ndarray) -> np.ndarray:
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None)


def source_footprint(domain: Domain, x: float, y: float, radius: float) -> np.ndarray:
    """Fraction of the source square falling in each fluid cell (sums to 1)."""
    ex = np.arange(domain.nx + 1) * domain.dx
    ey = np.arange(domain.ny + 1) * domain.dy
    w = np.outer(_overlap_1d(y - radius, y + radius, ey), _overlap_1d(x - radius, x + radius, ex))
    w[domain.obstacle_mask] = 0.0
    total = w.sum()
    if total <= 0:
        raise InvalidConfig(f"source footprint at ({x}, {y}) has no fluid overlap")
    return w / total


def footprint_matrix(domain: Domain, sources, radius: float) -> np.ndarray:
    """``(n_cells, K)`` per-unit-mass concentration increments."""
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    cell_volume = domain.dx * domain.dy * 1.0
    F = np.empty((domain.nx * domain.ny, len(sources)))
    for k, (x, y) in enumerate(sources):
        F[:, k] = source_footprint(domain, x, y, radius).ravel() / cell_volume
    return F


def bilinear_sample_matrix(domain: Domain, points: np.ndarray) -> sp.csr_matrix:
    """Rows interpolate cell-centered values at ``points`` (clamped)."""
    points = np.atleast_2d(points)
    ny, nx = domain.shape
    fi = np.clip(points[:, 0] / domain.dx - 0.5, 0.0, nx - 1.0)
    fj = np.clip(points[:, 1] / domain.dy - 0.5, 0.0, ny - 1.0)
    i0 = np.minimum(np.floor(fi).astype(np.int64), nx - 2)
    j0 = np.minimum(np.floor(fj).astype(np.int64), ny - 2)
    a = fi - i0
    b = fj - j0
    r = np.arange(len(points))
    rows = np.concatenate([r] * 4)
    cols = np.concatenate([j0 * nx + i0, j0 * nx + i0 + 1, (j0 + 1) * nx + i0, (j0 + 1) * nx + i0 + 1])
    vals = np.concatenate([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b])
    S = sp.csr_matrix((vals, (rows, cols)), shape=(len(points), nx * ny))
    S.sum_duplicates()
    S.eliminate_zeros()
    return S


def sensor_matrix(domain: Domain, layout: SensorLayout) -> sp.csr_matrix:
    """``(m, n_cells)`` operator mapping a field to sensor readings."""
    pts, avg = layout.quadrature
    return sp.csr_matrix(avg) @ bilinear_sample_matrix(domain, pts)


def sample_sensors(gas: GasField, layout: SensorLayout, domain: Domain) -> np.ndarray:
    """Point sensors read the bilinear value; beams average their nodes."""
    return sensor_matrix(domain, layout) @ np.asarray(gas.c, dtype=float).ravel()


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------


def _clamp(C: np.ndarray) -> np.ndarray:
    if DEBUG and C.size and C.min() < NEGATIVE_ALARM:
        raise NumericalError(f"negative concentration {C.min():.3e} below alarm threshold")
    np.maximum(C, 0.0, out=C)
    return C


class _BatchStepper:
    """Applies one step's operators to column blocks, optionally threaded."""

    def __init__(self, threads: int = 1):
        self.threads = max(1, int(threads))
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def blocks(self, K: int):
        n = min(self.threads, K) if K else 1
        edges = np.linspace(0, K, n + 1).astype(int)
        return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]

    def map(self, fn, K: int):
        blocks = self.blocks(K)
        if self._pool is None or len(blocks) == 1:
            for b in blocks:
                fn(b)
        else:
            list(self._pool.map(fn, blocks))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def transport_step_batch(C: np.ndarray, A: sp.csr_matrix, Dm, inject: Optional[np.ndarray]) -> np.ndarray:
    out = A @ C
    if Dm is not None:
        out = Dm @ out
    if inject is not None:
        out += inject
    return _clamp(out)


def step_transport(gas: GasField, flow: FlowState, config: TransportConfig, source, domain: Domain) -> GasField:
    """Advance the gas field one step through ``flow``.

    ``source`` is ``(x, y, rate)`` in meters and kg/s, or None.
    """
    check_diffusion_stability(config, domain)
    c = np.asarray(gas.c, dtype=float)
    if c.shape != domain.shape:
        raise InvalidConfig(f"gas field shape {c.shape} does not match grid {domain.shape}")
    A = advection_matrix(flow, domain, config.dt)
    Dm = diffusion_matrix(domain, config)
    inject = None
    if source is not None:
        x, y, rate = source
        if rate != 0:
            inject = footprint_matrix(domain, [(x, y)], config.injection_radius) * (rate * config.dt)
    out = transport_step_batch(c.reshape(-1, 1), A, Dm, inject)
    return GasField(out.reshape(domain.shape), gas.t + config.dt)


# ---------------------------------------------------------------------------
# Flow histories and windowed sensor simulation
# ---------------------------------------------------------------------------


def spinup_horizon(domain: Domain, wind: WindSeries, t0: float, t1: float, dt: float, cap: float = 120.0) -> float:
    """Flow spin-up time: domain crossing time at the mean speed, capped."""
    return crossing_time(domain, wind, t0, t1, dt, cap)


def _n_steps(span: float, dt: float, what: str) -> int:
    n = span / dt
    if abs(n - round(n)) > 1e-6:
        raise InvalidConfig(f"{what} ({span} s) is not a multiple of dt ({dt} s)")
    return int(round(n))


def flow_history(domain: Domain, wind: WindSeries, flow_cfg: FlowConfig, t_start: float,
                 n_steps: int) -> Iterator[FlowState]:
    """Yield the flow after each of ``n_steps`` steps starting at ``t_start``.

    The wind boundary of a step is the wind sampled at the step's end.
    """
    state = initial_flow(domain, wind_at(wind, t_start), flow_cfg)
    for k in range(1, n_steps + 1):
        # Times are rebuilt from the step index so no rounding drift builds up.
        t_next = t_start + k * flow_cfg.dt
        state = step_flow(state, flow_cfg, wind_at(wind, t_next), domain)
        state = FlowState(state.u, state.v, state.p, t_next, state.boundary)
        yield state


@dataclass(frozen=True)
class SolverSetup:
    """Everything the coupled solver needs besides the source."""

    domain: Domain
    wind: WindSeries
    layout: SensorLayout
    flow: FlowConfig
    transport: TransportConfig
    spinup_cap: float = 120.0
    # When set, every run starts its flow at this time so all windows see
    # the same flow realization as a continuous run from the origin.
    flow_origin: Optional[float] = None

    def spinup_for(self, t0: float, t1: float) -> float:
        if self.flow_origin is not None:
            if t0 < self.flow_origin - 1e-9:
                raise InvalidConfig(f"window starts at {t0}, before the flow origin {self.flow_origin}")
            return t0 - self.flow_origin
        return spinup_horizon(self.domain, self.wind, t0, t1, self.flow.dt, self.spinup_cap)

    @classmethod
    def from_scenario(cls, sc: Scenario) -> "SolverSetup":
        s = sc.solver
        return cls(
            domain=sc.domain, wind=sc.wind, layout=sc.layout,
            flow=FlowConfig(viscosity=s.viscosity, dt=sc.dt_sim, projection_tol=s.projection_tol,
                            projection_max_iter=s.projection_max_iter),
            transport=TransportConfig(diffusivity=s.diffusivity, dt=sc.dt_sim, injection_radius=s.injection_radius),
            spinup_cap=s.spinup_cap,
            flow_origin=s.flow_origin,
        )


def simulate_sensor_batch(setup: SolverSetup, sources, window: tuple[float, float], *, avg_tail: float = 20.0,
                          unit_rate: float = 1.0, n_segments: int = 1, threads: int = 1,
                          spinup: Optional[float] = None, emission_start: Optional[float] = None) -> np.ndarray:
    """Tail-averaged sensor readings for many candidate sources at once.

    All sources emit ``unit_rate`` kg/s into a clean field from
    ``emission_start`` (default ``t0``) on; readings are averaged over the
    last ``avg_tail`` seconds of the window. The flow is spun up for
    ``spinup`` seconds before the emission starts (default:
    :meth:`SolverSetup.spinup_for`). With ``n_segments > 1`` the window is
    cut into equal emission segments, any lead-in before ``t0`` counting
    towards the first, and the per-segment responses are returned
    separately.

    Returns:
        ``(K, m)`` readings, or ``(K, n_segments, m)`` when segmented.
    """
    t0, t1 = map(float, window)
    if t1 - t0 < avg_tail:
        raise InvalidConfig(f"window [{t0}, {t1}] shorter than the averaging tail {avg_tail} s")
    if setup.flow.dt != setup.transport.dt:
        raise InvalidConfig("flow and transport must share dt")
    dt = setup.flow.dt
    domain = setup.domain
    check_diffusion_stability(setup.transport, domain)
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    K = len(sources)
    m = len(setup.layout)
    t_emit = t0 if emission_start is None else float(emission_start)
    if t_emit > t0 + 1e-9:
        raise InvalidConfig(f"emission_start {t_emit} is after the window start {t0}")
    n_lead = _n_steps(t0 - t_emit, dt, "emission lead-in")
    n_steps = _n_steps(t1 - t0, dt, "window")
    n_tail = _n_steps(avg_tail, dt, "averaging tail")
    seg_steps = _n_steps((t1 - t0) / n_segments, dt, "emission segment") if n_segments > 1 else n_steps
    if unit_rate == 0 or K == 0:
        shape = (K, n_segments, m) if n_segments > 1 else (K, m)
        return np.zeros(shape)
    if spinup is None:
        spinup = setup.spinup_for(t_emit, t1)
    n_spin = _n_steps(spinup, dt, "spin-up")

    F = footprint_matrix(domain, sources, setup.transport.injection_radius) * (unit_rate * dt)
    if n_segments > 1:
        F = np.repeat(F, n_segments, axis=1)
        seg_of_col = np.tile(np.arange(n_segments), K)
    Q = sensor_matrix(domain, setup.layout)
    Dm = diffusion_matrix(domain, setup.transport)
    C = np.zeros((domain.nx * domain.ny, F.shape[1]))
    acc = np.zeros((m, F.shape[1]))
    stepper = _BatchStepper(threads)
    try:
        flows = flow_history(domain, setup.wind, setup.flow, t_emit - spinup, n_spin + n_lead + n_steps)
        for k, flow in enumerate(flows):
            gas_step = k - n_spin - n_lead  # steps since t0; negative during spin-up and lead-in
            if gas_step < -n_lead:
                continue
            A = advection_matrix(flow, domain, dt)
            if n_segments > 1:
                active = (seg_of_col == min(max(gas_step, 0) // seg_steps, n_segments - 1)).astype(float)
                inj = F * active
            else:
                inj = F

            def run(block, A=A, inj=inj, gas_step=gas_step):
                C[:, block] = transport_step_batch(C[:, block], A, Dm, inj[:, block])
                if gas_step >= n_steps - n_tail:
                    acc[:, block] += Q @ C[:, block]

            stepper.map(run, C.shape[1])
    finally:
        stepper.close()
    out = (acc / n_tail).T
    if n_segments > 1:
        return out.reshape(K, n_segments, m)
    return out


def simulate_sensor_series(setup: SolverSetup, source, window: tuple[float, float], *, avg_tail: float = 20.0,
                           unit_rate: float = 1.0, n_segments: int = 1, spinup: Optional[float] = None,
                           emission_start: Optional[float] = None) -> np.ndarray:
    """Single-source version of :func:`simulate_sensor_batch`."""
    out = simulate_sensor_batch(setup, [tuple(source)[:2]], window, avg_tail=avg_tail, unit_rate=unit_rate,
                                n_segments=n_segments, spinup=spinup, emission_start=emission_start)
    return out[0]


def simulate_truth(setup: SolverSetup, sources: Sequence, t_end: float, *, t_start: float = 0.0,
                   record_every: int = 1, spinup: Optional[float] = None, field_dump=None):
    """Run the coupled solver with time-varying emission profiles.

    ``sources`` holds :class:`~plumetrace.domain.Source` objects; each
    emits ``profile.rate_at(t)`` (evaluated at the step midpoint). Returns
    ``(times, readings)`` sampled every ``record_every`` steps.
    ``field_dump(step, flow, gas)`` is called at every recorded step.
    """
    dt = setup.flow.dt
    domain = setup.domain
    if spinup is None:
        spinup = setup.spinup_for(t_start, t_end)
    n_spin = _n_steps(spinup, dt, "spin-up")
    n_steps = _n_steps(t_end - t_start, dt, "simulation span")
    F = footprint_matrix(domain, [(s.x, s.y) for s in sources], setup.transport.injection_radius) * dt
    Q = sensor_matrix(domain, setup.layout)
    Dm = diffusion_matrix(domain, setup.transport)
    c = np.zeros((domain.nx * domain.ny, 1))
    times, readings = [], []
    for k, flow in enumerate(flow_history(domain, setup.wind, setup.flow, t_start - spinup, n_spin + n_steps)):
        step = k - n_spin
        if step < 0:
            continue
        t_mid = flow.t - 0.5 * dt
        rates = np.array([float(s.profile.rate_at(t_mid)) if t_mid >= 0 else 0.0 for s in sources])
        inject = (F @ rates).reshape(-1, 1)
        c = transport_step_batch(c, advection_matrix(flow, domain, dt), Dm, inject)
        if (step + 1) % record_every == 0:
            times.append(flow.t)
            readings.append(Q @ c[:, 0])
            if field_dump is not None:
                field_dump(step + 1, flow, GasField(c.reshape(domain.shape).copy(), flow.t))
    return np.array(times), np.array(readings)
