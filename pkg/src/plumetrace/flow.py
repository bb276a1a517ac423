"""Unsteady 2D incompressible flow on a staggered (MAC) grid.

Layout for an ``ny x nx`` cell grid:

* ``u`` has shape ``(ny, nx + 1)``; ``u[j, i]`` lives on the vertical face
  at ``x = i*dx``, ``y = (j + 0.5)*dy``.
* ``v`` has shape ``(ny + 1, nx)``; ``v[j, i]`` lives on the horizontal face
  at ``x = (i + 0.5)*dx``, ``y = j*dy``.
* ``p`` has shape ``(ny, nx)`` at cell centers.

Each step sets inflow faces to the (spatially uniform) wind, advects the
velocity semi-Lagrangian style, applies explicit viscosity and projects
onto a divergence-free field with a direct sparse Poisson solve.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import splu

from .domain import Domain, WindSample
from .errors import CflViolation, InvalidConfig, ProjectionDiverged, StabilityViolation

INFLOW = "inflow"
OUTFLOW = "outflow"
NOSLIP = "noslip"
_ROLES = (INFLOW, OUTFLOW, NOSLIP)
# Edge order used throughout: west, east, south, north.
CLOSED = (NOSLIP, NOSLIP, NOSLIP, NOSLIP)


@dataclass(frozen=True)
class FlowConfig:
    viscosity: float = 1e-2
    dt: float = 0.1
    projection_tol: float = 1e-10
    projection_max_iter: int = 4
    # Fixed (west, east, south, north) roles; None derives them from the wind.
    boundary: Optional[tuple[str, str, str, str]] = None

    def __post_init__(self):
        if self.viscosity < 0:
            raise InvalidConfig("viscosity must be >= 0")
        if not self.dt > 0:
            raise InvalidConfig("flow dt must be positive")
        if self.projection_max_iter < 1:
            raise InvalidConfig("projection_max_iter must be >= 1")
        if self.boundary is not None:
            if len(self.boundary) != 4 or any(r not in _ROLES for r in self.boundary):
                raise InvalidConfig(f"boundary roles must be 4 of {_ROLES}")


@dataclass(frozen=True)
class FlowState:
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    t: float
    boundary: tuple[str, str, str, str] = (OUTFLOW,) * 4


def boundary_roles(wind_u: float, wind_v: float) -> tuple[str, str, str, str]:
    """Edges the wind enters through are inflow, all others outflow.

    Components below 1e-12 of the speed count as zero, so a due-west wind
    (whose v is a rounding residue of cos 270 deg) has no inflow edge in y.
    """
    eps = 1e-12 * max(abs(wind_u), abs(wind_v))
    return (
        INFLOW if wind_u > eps else OUTFLOW,
        INFLOW if wind_u < -eps else OUTFLOW,
        INFLOW if wind_v > eps else OUTFLOW,
        INFLOW if wind_v < -eps else OUTFLOW,
    )


def divergence(u: np.ndarray, v: np.ndarray, dx: float, dy: float) -> np.ndarray:
    return (u[:, 1:] - u[:, :-1]) / dx + (v[1:, :] - v[:-1, :]) / dy


def relative_divergence(u, v, mask, dx, dy, u_ref: float = 1.0) -> float:
    """Max |div| over fluid cells, times the cell size, over a velocity scale.

    Multiplying by ``min(dx, dy)`` turns the divergence (1/s) into a face
    flux imbalance (m/s) comparable with the velocity magnitude.
    """
    div = divergence(u, v, dx, dy)
    fluid = ~np.asarray(mask, dtype=bool)
    if not fluid.any():
        return 0.0
    scale = max(float(np.abs(u).max()), float(np.abs(v).max()), u_ref)
    return float(np.abs(div[fluid]).max()) * min(dx, dy) / scale


def face_masks(mask: np.ndarray, boundary: Sequence[str]):
    """Classify faces as fixed (prescribed velocity) or free.

    Returns ``(u_fixed, v_fixed)`` boolean arrays. A face is fixed when it
    touches a solid cell or lies on an inflow / no-slip domain edge.
    """
    mask = np.asarray(mask, dtype=bool)
    ny, nx = mask.shape
    u_fixed = np.zeros((ny, nx + 1), dtype=bool)
    v_fixed = np.zeros((ny + 1, nx), dtype=bool)
    u_fixed[:, 1:-1] = mask[:, :-1] | mask[:, 1:]
    v_fixed[1:-1, :] = mask[:-1, :] | mask[1:, :]
    west, east, south, north = boundary
    u_fixed[:, 0] = mask[:, 0] | (west != OUTFLOW)
    u_fixed[:, -1] = mask[:, -1] | (east != OUTFLOW)
    v_fixed[0, :] = mask[0, :] | (south != OUTFLOW)
    v_fixed[-1, :] = mask[-1, :] | (north != OUTFLOW)
    return u_fixed, v_fixed


def apply_fixed_faces(u, v, mask, boundary, inflow=(0.0, 0.0)):
    """Write prescribed values into fixed faces in place."""
    mask = np.asarray(mask, dtype=bool)
    west, east, south, north = boundary
    wu, wv = inflow
    u[:, 0] = wu if west == INFLOW else (u[:, 0] if west == OUTFLOW else 0.0)
    u[:, -1] = wu if east == INFLOW else (u[:, -1] if east == OUTFLOW else 0.0)
    v[0, :] = wv if south == INFLOW else (v[0, :] if south == OUTFLOW else 0.0)
    v[-1, :] = wv if north == INFLOW else (v[-1, :] if north == OUTFLOW else 0.0)
    u_fixed, v_fixed = face_masks(mask, boundary)
    # Faces touching solids are impermeable regardless of edge role.
    solid_u = np.zeros_like(u_fixed)
    solid_u[:, 1:-1] = mask[:, :-1] | mask[:, 1:]
    solid_u[:, 0] = mask[:, 0]
    solid_u[:, -1] = mask[:, -1]
    solid_v = np.zeros_like(v_fixed)
    solid_v[1:-1, :] = mask[:-1, :] | mask[1:, :]
    solid_v[0, :] = mask[0, :]
    solid_v[-1, :] = mask[-1, :]
    u[solid_u] = 0.0
    v[solid_v] = 0.0


@lru_cache(maxsize=32)
def _poisson_factor(mask_bytes: bytes, shape: tuple[int, int], dx: float, dy: float,
                    open_edges: tuple[bool, bool, bool, bool]):
    ny, nx = shape
    mask = np.frombuffer(mask_bytes, dtype=bool).reshape(shape)
    fluid = ~mask
    nf = int(fluid.sum())
    idx = -np.ones(shape, dtype=np.int64)
    idx[fluid] = np.arange(nf)
    cx, cy = 1.0 / dx**2, 1.0 / dy**2
    diag = np.zeros(nf)
    rows, cols, vals = [], [], []

    def couple(a, b, c):
        rows.extend((a, b))
        cols.extend((b, a))
        vals.extend((np.full(a.size, c), np.full(a.size, c)))
        np.subtract.at(diag, a, c)
        np.subtract.at(diag, b, c)

    both = fluid[:, :-1] & fluid[:, 1:]
    couple(idx[:, :-1][both], idx[:, 1:][both], cx)
    both = fluid[:-1, :] & fluid[1:, :]
    couple(idx[:-1, :][both], idx[1:, :][both], cy)

    dirichlet = np.zeros(shape, dtype=bool)
    west, east, south, north = open_edges
    for flag, sl, c in ((west, np.s_[:, 0], cx), (east, np.s_[:, -1], cx),
                        (south, np.s_[0, :], cy), (north, np.s_[-1, :], cy)):
        if flag:
            cells = idx[sl][fluid[sl]]
            np.subtract.at(diag, cells, c)
            dirichlet[sl] |= fluid[sl]

    # Components without a Dirichlet face get one anchored cell (gauge).
    labels, n_comp = ndimage.label(fluid)
    anchors = []
    for comp in range(1, n_comp + 1):
        cells = labels == comp
        if not (dirichlet & cells).any():
            anchors.append(int(idx[cells].min()))
    anchors = np.array(anchors, dtype=np.int64)

    r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    val = np.concatenate(vals) if vals else np.zeros(0)
    if anchors.size:
        keep = ~np.isin(r, anchors)
        r, c, val = r[keep], c[keep], val[keep]
        diag[anchors] = 1.0
    A = sp.csc_matrix(
        (np.concatenate([val, diag]), (np.concatenate([r, np.arange(nf)]), np.concatenate([c, np.arange(nf)]))),
        shape=(nf, nf),
    )
    return splu(A), idx, anchors


def project_divergence_free(u, v, mask, tol: float = 1e-10, max_iter: int = 4, *, dx: float = 1.0,
                            dy: float = 1.0, boundary: Sequence[str] = CLOSED, inflow=(0.0, 0.0),
                            dt: float = 1.0, u_ref: float = 1.0):
    """Remove the divergent part of a face-velocity field.

    Fixed faces (solids, inflow and no-slip edges) are first set to their
    prescribed values and never corrected; outflow edges carry a zero
    pressure ghost. Each pass is a direct sparse solve of the masked
    Poisson problem; up to ``max_iter`` passes refine the result until the
    relative divergence is at most ``tol``.

    Returns:
        ``(u, v, p)`` with ``p`` the pressure (unit density) that realizes
        the correction over a step ``dt``.

    Raises:
        ProjectionDiverged: divergence still above ``tol`` after
            ``max_iter`` passes (e.g. net inflow into a closed pocket).
    """
    mask = np.ascontiguousarray(mask, dtype=bool)
    boundary = tuple(boundary)
    u = np.array(u, dtype=float)
    v = np.array(v, dtype=float)
    ny, nx = mask.shape
    if u.shape != (ny, nx + 1) or v.shape != (ny + 1, nx):
        raise InvalidConfig(f"face arrays {u.shape}, {v.shape} do not match grid {mask.shape}")
    apply_fixed_faces(u, v, mask, boundary, inflow)
    open_edges = tuple(r == OUTFLOW for r in boundary)
    lu, idx, anchors = _poisson_factor(mask.tobytes(), mask.shape, float(dx), float(dy), open_edges)
    fluid = ~mask
    u_fixed, v_fixed = face_masks(mask, boundary)
    u_free, v_free = ~u_fixed, ~v_fixed
    phi = np.zeros(mask.shape)
    for _ in range(max_iter):
        div = divergence(u, v, dx, dy)
        rhs = div[fluid]
        if anchors.size:
            rhs[anchors] = 0.0
        step = np.zeros(mask.shape)
        step[fluid] = lu.solve(rhs)
        phi += step
        padx = np.zeros((ny, nx + 2))
        padx[:, 1:-1] = step
        gx = (padx[:, 1:] - padx[:, :-1]) / dx
        pady = np.zeros((ny + 2, nx))
        pady[1:-1, :] = step
        gy = (pady[1:, :] - pady[:-1, :]) / dy
        u[u_free] -= gx[u_free]
        v[v_free] -= gy[v_free]
        if relative_divergence(u, v, mask, dx, dy, u_ref) <= tol:
            break
    else:
        raise ProjectionDiverged(
            f"relative divergence {relative_divergence(u, v, mask, dx, dy, u_ref):.3e} > tol {tol:.1e} "
            f"after {max_iter} passes"
        )
    return u, v, phi / dt


# ---------------------------------------------------------------------------
# Semi-Lagrangian advection helpers
# ---------------------------------------------------------------------------


def _bilinear(P: np.ndarray, fi: np.ndarray, fj: np.ndarray) -> np.ndarray:
    H, W = P.shape
    fi = np.clip(fi, 0.0, W - 1.0)
    fj = np.clip(fj, 0.0, H - 1.0)
    i0 = np.minimum(np.floor(fi).astype(np.int64), W - 2)
    j0 = np.minimum(np.floor(fj).astype(np.int64), H - 2)
    a = fi - i0
    b = fj - j0
    return ((1 - a) * (1 - b) * P[j0, i0] + a * (1 - b) * P[j0, i0 + 1]
            + (1 - a) * b * P[j0 + 1, i0] + a * b * P[j0 + 1, i0 + 1])


def _tangential_ghost(edge_vals, role, wind_comp):
    if role == INFLOW:
        return np.full_like(edge_vals, wind_comp)
    if role == NOSLIP:
        return -edge_vals
    return edge_vals


def _pad_u(u, boundary, wind_u):
    ny, n1 = u.shape
    P = np.empty((ny + 2, n1 + 2))
    P[1:-1, 1:-1] = u
    P[1:-1, 0] = u[:, 0]
    P[1:-1, -1] = u[:, -1]
    P[0, :] = _tangential_ghost(P[1, :], boundary[2], wind_u)
    P[-1, :] = _tangential_ghost(P[-2, :], boundary[3], wind_u)
    return P


def _pad_v(v, boundary, wind_v):
    n1, nx = v.shape
    P = np.empty((n1 + 2, nx + 2))
    P[1:-1, 1:-1] = v
    P[0, 1:-1] = v[0, :]
    P[-1, 1:-1] = v[-1, :]
    P[:, 0] = _tangential_ghost(P[:, 1], boundary[0], wind_v)
    P[:, -1] = _tangential_ghost(P[:, -2], boundary[1], wind_v)
    return P


class VelocitySampler:
    """Bilinear sampling of a staggered velocity field at arbitrary points."""

    def __init__(self, u, v, dx, dy, boundary, wind=(0.0, 0.0)):
        self.Pu = _pad_u(u, boundary, wind[0])
        self.Pv = _pad_v(v, boundary, wind[1])
        self.dx = dx
        self.dy = dy

    def u_at(self, x, y):
        return _bilinear(self.Pu, x / self.dx + 1.0, y / self.dy + 0.5)

    def v_at(self, x, y):
        return _bilinear(self.Pv, x / self.dx + 0.5, y / self.dy + 1.0)

    def backtrace(self, x, y, dt):
        """Departure points of a midpoint (RK2) trace over ``dt``."""
        xm = x - 0.5 * dt * self.u_at(x, y)
        ym = y - 0.5 * dt * self.v_at(x, y)
        return x - dt * self.u_at(xm, ym), y - dt * self.v_at(xm, ym)


def _face_coords(shape, dx, dy):
    ny, nx = shape
    xu, yu = np.meshgrid(np.arange(nx + 1) * dx, (np.arange(ny) + 0.5) * dy)
    xv, yv = np.meshgrid((np.arange(nx) + 0.5) * dx, np.arange(ny + 1) * dy)
    return xu, yu, xv, yv


def _laplacian_padded(P: np.ndarray, hx: float, hy: float) -> np.ndarray:
    return ((P[1:-1, 2:] - 2 * P[1:-1, 1:-1] + P[1:-1, :-2]) / hx**2
            + (P[2:, 1:-1] - 2 * P[1:-1, 1:-1] + P[:-2, 1:-1]) / hy**2)


def max_speed(state: FlowState) -> float:
    return max(float(np.abs(state.u).max()), float(np.abs(state.v).max()))


def check_cfl(state: FlowState, dt: float, dx: float, dy: float, wind_speed: float = 0.0) -> None:
    speed = max(max_speed(state), wind_speed)
    h = min(dx, dy)
    if speed > 0 and dt * speed > h * (1 + 1e-12):
        raise CflViolation(speed, h, dt)


def initial_flow(domain: Domain, wind: WindSample, config: FlowConfig) -> FlowState:
    """Uniform wind projected around the obstacles."""
    ny, nx = domain.shape
    u = np.full((ny, nx + 1), wind.u)
    v = np.full((ny + 1, nx), wind.v)
    roles = config.boundary or boundary_roles(wind.u, wind.v)
    u, v, p = project_divergence_free(
        u, v, domain.obstacle_mask, config.projection_tol, config.projection_max_iter,
        dx=domain.dx, dy=domain.dy, boundary=roles, inflow=(wind.u, wind.v), dt=config.dt,
        u_ref=max(wind.speed, 1.0),
    )
    return FlowState(u, v, p, float(wind.t), roles)


def zero_flow(domain: Domain, t: float = 0.0) -> FlowState:
    ny, nx = domain.shape
    return FlowState(np.zeros((ny, nx + 1)), np.zeros((ny + 1, nx)), np.zeros((ny, nx)), t)


def step_flow(state: FlowState, config: FlowConfig, wind: WindSample, domain: Domain) -> FlowState:
    """Advance the flow by ``config.dt``.

    Raises:
        CflViolation: ``dt * max_speed > min(dx, dy)``.
        StabilityViolation: explicit viscosity unstable for this ``dt``.
        ProjectionDiverged: see :func:`project_divergence_free`.
    """
    dx, dy, dt = domain.dx, domain.dy, config.dt
    mask = domain.obstacle_mask
    check_cfl(state, dt, dx, dy, wind.speed)
    nu = config.viscosity
    if nu > 0 and nu * dt * (1 / dx**2 + 1 / dy**2) > 0.5:
        raise StabilityViolation(f"viscous step unstable: nu*dt*(1/dx^2+1/dy^2) > 0.5 (nu={nu}, dt={dt})")
    roles = config.boundary or boundary_roles(wind.u, wind.v)
    inflow = (wind.u, wind.v)

    u = state.u.copy()
    v = state.v.copy()
    apply_fixed_faces(u, v, mask, roles, inflow)

    sampler = VelocitySampler(u, v, dx, dy, roles, inflow)
    xu, yu, xv, yv = _face_coords(mask.shape, dx, dy)
    xb, yb = sampler.backtrace(xu, yu, dt)
    u_new = sampler.u_at(xb, yb)
    xb, yb = sampler.backtrace(xv, yv, dt)
    v_new = sampler.v_at(xb, yb)

    if nu > 0:
        u_new = u_new + nu * dt * _laplacian_padded(_pad_u(u_new, roles, wind.u), dx, dy)
        v_new = v_new + nu * dt * _laplacian_padded(_pad_v(v_new, roles, wind.v), dx, dy)

    # Zero-gradient outflow for the normal component on open edges.
    if roles[0] == OUTFLOW:
        u_new[:, 0] = u_new[:, 1]
    if roles[1] == OUTFLOW:
        u_new[:, -1] = u_new[:, -2]
    if roles[2] == OUTFLOW:
        v_new[0, :] = v_new[1, :]
    if roles[3] == OUTFLOW:
        v_new[-1, :] = v_new[-2, :]

    u_new, v_new, p = project_divergence_free(
        u_new, v_new, mask, config.projection_tol, config.projection_max_iter,
        dx=dx, dy=dy, boundary=roles, inflow=inflow, dt=dt, u_ref=max(wind.speed, 1.0),
    )
    return FlowState(u_new, v_new, p, state.t + dt, roles)


def cell_center_velocity(state: FlowState) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * (state.u[:, :-1] + state.u[:, 1:]), 0.5 * (state.v[:-1, :] + state.v[1:, :])


def write_flow_csv(state: FlowState, path) -> None:
    """Dump cell-centered ``x,y,u,v,p`` rows (row-major, south to north)."""
    ny, nx = state.p.shape
    uc, vc = cell_center_velocity(state)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# t={state.t!r} nx={nx} ny={ny} columns=j,i,u,v,p\n")
        fh.write("j,i,u,v,p\n")
        for j in range(ny):
            for i in range(nx):
                fh.write(f"{j},{i},{uc[j, i]!r},{vc[j, i]!r},{state.p[j, i]!r}\n")
