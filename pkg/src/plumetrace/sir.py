"""Sequential importance resampling over source location and rate.

Particles live in a plain ``(N, d)`` state array. For source inversion the
columns are ``x, y, s`` (or ``x, y, s_1..s_H`` in rate-history mode); the
kernels below are generic so the same code also runs the 1D
linear-Gaussian toy used to check the filter against a Kalman recursion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .domain import Domain
from .errors import AllWeightsVanished, DegenerateRun, InvalidConfig, OperatorWindowMismatch, PriorUnsampleable

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Priors and process noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RatePrior:
    lo: float
    hi: float
    kind: str = "loguniform"  # or "uniform"

    def __post_init__(self):
        if self.kind not in ("loguniform", "uniform"):
            raise InvalidConfig(f"unknown rate prior {self.kind!r}")
        if not self.lo < self.hi:
            raise InvalidConfig("rate prior needs lo < hi")
        if self.kind == "loguniform" and not self.lo > 0:
            raise InvalidConfig("log-uniform rate prior needs lo > 0")
        if self.lo < 0:
            raise InvalidConfig("rate prior must be non-negative")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, size=n)
        return np.exp(rng.uniform(math.log(self.lo), math.log(self.hi), size=n))


@dataclass(frozen=True)
class PriorSpec:
    """Uniform location over the fluid part of ``region`` plus a rate prior."""

    domain: Domain
    rate: RatePrior
    n_rates: int = 1
    region: Optional[tuple[float, float, float, float]] = None

    @property
    def dim(self) -> int:
        return 2 + self.n_rates

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        x0, y0, x1, y1 = self.region or (0.0, 0.0, self.domain.width, self.domain.height)
        out = np.empty((0, 2))
        drawn = 0
        while len(out) < n:
            batch = rng.uniform([x0, y0], [x1, y1], size=(max(n, 64), 2))
            drawn += len(batch)
            keep = batch[self.domain.is_fluid(batch[:, 0], batch[:, 1])]
            out = np.vstack([out, keep])
            if drawn >= 10_000 and len(out) < 0.01 * drawn:
                raise PriorUnsampleable(f"{len(out)} of {drawn} location draws fell in fluid cells")
        rates = self.rate.sample(n, rng)
        return np.column_stack([out[:n], np.repeat(rates[:, None], self.n_rates, axis=1)])


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return len(np.atleast_1d(self.mean))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        return rng.multivariate_normal(mean, cov, size=n, method="cholesky")


@dataclass(frozen=True)
class ProcessNoise:
    cov: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, atol=1e-14):
            raise InvalidConfig("process noise covariance must be square and symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12 * max(1.0, abs(cov).max()):
            raise InvalidConfig("process noise covariance must be positive semi-definite")
        object.__setattr__(self, "cov", cov)

    @classmethod
    def diagonal(cls, *sd: float) -> "ProcessNoise":
        return cls(np.diag(np.square(np.asarray(sd, dtype=float))))

    @classmethod
    def default_for(cls, prior: PriorSpec) -> "ProcessNoise":
        s = 0.02 * prior.rate.midpoint
        return cls.diagonal(1.0, 1.0, *([s] * prior.n_rates))

    def factor(self) -> np.ndarray:
        w, V = np.linalg.eigh(self.cov)
        return V * np.sqrt(np.clip(w, 0.0, None))


# ---------------------------------------------------------------------------
# Ensemble and kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParticleEnsemble:
    states: np.ndarray
    weights: np.ndarray
    iteration: int = 0
    ancestry: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.states.ndim != 2 or len(self.states) < 2:
            raise InvalidConfig("an ensemble needs at least 2 particles")
        if self.weights.shape != (len(self.states),):
            raise InvalidConfig("weights must have one entry per particle")

    @property
    def n(self) -> int:
        return len(self.states)

    def ess(self) -> float:
        return float(1.0 / np.dot(self.weights, self.weights))

    def mean(self) -> np.ndarray:
        return self.weights @ self.states


def init_particles(prior, n: int, seed) -> ParticleEnsemble:
    if n < 2:
        raise InvalidConfig("need at least 2 particles")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    states = np.asarray(prior.sample(n, rng), dtype=float).reshape(n, -1)
    return ParticleEnsemble(states, np.full(n, 1.0 / n))


class BoundaryReflector:
    """Keeps location proposals inside the domain and out of obstacles.

    Walls mirror the coordinate. A proposal landing in an obstacle is
    retried with the displacement mirrored; if that also fails the particle
    keeps its previous location. Rates are reflected at zero.
    """

    def __init__(self, domain: Domain, eps: float = 1e-9):
        self.domain = domain
        self.eps = eps

    @staticmethod
    def _fold(v: np.ndarray, hi: float) -> np.ndarray:
        v = np.mod(v, 2.0 * hi)
        return np.where(v > hi, 2.0 * hi - v, v)

    def _walls(self, x, y):
        d = self.domain
        x = np.clip(self._fold(x, d.width), self.eps, d.width - self.eps)
        y = np.clip(self._fold(y, d.height), self.eps, d.height - self.eps)
        return x, y

    def __call__(self, old: np.ndarray, new: np.ndarray) -> np.ndarray:
        out = new.copy()
        x, y = self._walls(new[:, 0], new[:, 1])
        bad = ~self.domain.is_fluid(x, y)
        if bad.any():
            mx, my = self._walls(2 * old[bad, 0] - new[bad, 0], 2 * old[bad, 1] - new[bad, 1])
            ok = self.domain.is_fluid(mx, my)
            x[bad] = np.where(ok, mx, old[bad, 0])
            y[bad] = np.where(ok, my, old[bad, 1])
        out[:, 0], out[:, 1] = x, y
        out[:, 2:] = np.abs(out[:, 2:])
        return out


def predict(ensemble: ParticleEnsemble, noise: ProcessNoise, rng: np.random.Generator,
            reflect: Optional[Callable] = None) -> ParticleEnsemble:
    """Random-walk proposal; weights are left untouched."""
    L = noise.factor()
    if L.shape[0] != ensemble.states.shape[1]:
        raise InvalidConfig(f"process noise is {L.shape[0]}-D, particles are {ensemble.states.shape[1]}-D")
    if not L.any():
        return replace(ensemble, iteration=ensemble.iteration + 1)
    new = ensemble.states + rng.standard_normal(ensemble.states.shape) @ L.T
    if reflect is not None:
        new = reflect(ensemble.states, new)
    return replace(ensemble, states=new, iteration=ensemble.iteration + 1)


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------


class LinearOperator:
    """``d_hat = states @ H.T``; the toy-model observation operator."""

    def __init__(self, H, op_id: str = "linear"):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.op_id = op_id
        self.window = None

    def predict(self, states: np.ndarray) -> np.ndarray:
        return states @ self.H.T


class UnitResponseOperator:
    """Wraps a unit-emission response ``f(xy) -> (N, m)`` or ``(N, H, m)``.

    ``scaling`` picks how the particle's rate columns enter: ``"rate"``
    scales the whole response by ``s``, ``"history"`` contracts per-segment
    responses with ``s_1..s_H`` and ``"none"`` ignores the rate.
    """

    def __init__(self, response: Callable, op_id: str, window=None, scaling: str = "rate", n_sensors=None):
        if scaling not in ("rate", "history", "none"):
            raise InvalidConfig(f"unknown emission scaling {scaling!r}")
        self.response = response
        self.op_id = op_id
        self.window = window
        self.scaling = scaling
        self.n_sensors = n_sensors

    def predict(self, states: np.ndarray) -> np.ndarray:
        r = np.asarray(self.response(states[:, :2]), dtype=float)
        if self.scaling == "none":
            return r
        if self.scaling == "rate":
            return r * states[:, 2:3]
        H = states.shape[1] - 2
        if self.n_sensors is None:
            raise InvalidConfig("history scaling needs n_sensors")
        r = r.reshape(len(states), H, self.n_sensors)
        return np.einsum("nhm,nh->nm", r, states[:, 2:])


@dataclass(frozen=True)
class LikelihoodSpec:
    sigma: object  # scalar or per-sensor array
    background: object = 0.0
    operator: object = None

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float)
        if not np.all(s > 0) or not np.all(np.isfinite(s)):
            raise InvalidConfig("sensor noise sd must be positive and finite")


def log_likelihoods(states: np.ndarray, observation, spec: LikelihoodSpec) -> np.ndarray:
    """Gaussian log-density of ``observation`` for every particle."""
    if spec.operator is None:
        raise OperatorWindowMismatch("no concentration operator for this observation")
    d = np.asarray(observation, dtype=float)
    d_hat = spec.operator.predict(states) + np.asarray(spec.background, dtype=float)
    if d_hat.shape[-1] != d.shape[-1]:
        raise OperatorWindowMismatch(f"operator predicts {d_hat.shape[-1]} sensors, observation has {d.shape[-1]}")
    sigma = np.broadcast_to(np.asarray(spec.sigma, dtype=float), d.shape)
    r = (d - d_hat) / sigma
    return -0.5 * np.sum(r * r, axis=1) - float(np.sum(np.log(sigma))) - d.shape[-1] * LOG_SQRT_2PI


def log_likelihood(state, observation, spec: LikelihoodSpec) -> float:
    return float(log_likelihoods(np.atleast_2d(np.asarray(state, dtype=float)), observation, spec)[0])


def normalize_log_weights(logw: np.ndarray) -> np.ndarray:
    """Shift by the maximum, exponentiate, and normalize with an exact sum."""
    top = np.max(logw)
    if not np.isfinite(top):
        raise AllWeightsVanished(f"largest log-weight is {top}")
    w = np.exp(logw - top)
    return w / math.fsum(w)


def update_weights(ensemble: ParticleEnsemble, observation, spec: LikelihoodSpec) -> tuple[ParticleEnsemble, float]:
    ll = log_likelihoods(ensemble.states, observation, spec)
    with np.errstate(divide="ignore"):
        logw = np.log(ensemble.weights) + ll
    w = normalize_log_weights(logw)
    out = replace(ensemble, weights=w)
    return out, out.ess()


def systematic_indices(weights: np.ndarray, u: float) -> np.ndarray:
    n = len(weights)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    positions = (np.arange(n) + u) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def resample_systematic(ensemble: ParticleEnsemble, rng) -> ParticleEnsemble:
    """Systematic resampling with a single uniform draw; weights reset."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    idx = systematic_indices(ensemble.weights, float(rng.uniform()))
    n = ensemble.n
    return replace(ensemble, states=ensemble.states[idx].copy(), weights=np.full(n, 1.0 / n), ancestry=idx)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

CHI2_2DOF_95 = 5.991464547107979


def posterior_summary(ensemble: ParticleEnsemble, reference=None) -> dict:
    w = ensemble.weights
    S = ensemble.states
    mean = w @ S
    out = {"mean": mean.tolist()}
    if S.shape[1] >= 2:
        d = S[:, :2] - mean[:2]
        cov = (d * w[:, None]).T @ d
        evals, evecs = np.linalg.eigh(cov)
        evals = np.clip(evals, 0.0, None)
        major = evecs[:, 1]
        out.update(
            x=float(mean[0]), y=float(mean[1]),
            s=float(mean[-1]) if S.shape[1] > 2 else None,
            cov_xy=cov.tolist(),
            ellipse95={
                "semi_major": float(math.sqrt(CHI2_2DOF_95 * evals[1])),
                "semi_minor": float(math.sqrt(CHI2_2DOF_95 * evals[0])),
                "angle_deg": float(math.degrees(math.atan2(major[1], major[0])) % 180.0),
            },
        )
    if reference is not None:
        out["mean_distance"] = mean_distance(ensemble, reference)
    return out


def mean_distance(ensemble: ParticleEnsemble, reference) -> float:
    rx, ry = float(reference[0]), float(reference[1])
    dist = np.hypot(ensemble.states[:, 0] - rx, ensemble.states[:, 1] - ry)
    return float(ensemble.weights @ dist)


# ---------------------------------------------------------------------------
# Filter loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationWindow:
    t: float
    values: np.ndarray
    window: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class Snapshot:
    t: float
    window: tuple[float, float]
    ensemble: ParticleEnsemble
    ess: float
    operator_id: str
    iteration: int


@dataclass
class FilterTrace:
    meta: dict
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)  # wall-clock, never serialized

    def write_ndjson(self, path, dump_particles: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"meta": self.meta}, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if dump_particles:
                for snap in self.snapshots:
                    fh.write(json.dumps({
                        "snapshot": snap.iteration, "t": snap.t, "operator": snap.operator_id,
                        "particles": snap.ensemble.states.tolist(), "weights": snap.ensemble.weights.tolist(),
                    }) + "\n")

    @classmethod
    def read_ndjson(cls, path) -> "FilterTrace":
        meta, records, snaps = {}, [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "meta" in rec:
                    meta = rec["meta"]
                elif "particles" in rec:
                    ens = ParticleEnsemble(np.array(rec["particles"], dtype=float), np.array(rec["weights"], dtype=float),
                                           iteration=rec["snapshot"])
                    snaps.append(Snapshot(rec["t"], (0.0, 0.0), ens, ens.ess(), rec["operator"], rec["snapshot"]))
                else:
                    records.append(rec)
        return cls(meta, records, snaps)


def _shift_history(states: np.ndarray, shift: int) -> np.ndarray:
    if shift <= 0 or states.shape[1] <= 3:
        return states
    hist = states[:, 2:]
    shift = min(shift, hist.shape[1])
    out = states.copy()
    out[:, 2:] = np.concatenate([hist[:, shift:], np.repeat(hist[:, -1:], shift, axis=1)], axis=1)
    return out


def run_filter(observations: Sequence[ObservationWindow], model_provider: Callable, prior, noise: ProcessNoise,
               spec: LikelihoodSpec, iters_per_step: int, n_particles: int, seed: int, *,
               resample: str = "adaptive", ess_fraction: float = 0.5, reflect: Optional[Callable] = None,
               history_segment: Optional[float] = None, meta: Optional[dict] = None,
               record_every: int = 1, progress=None) -> FilterTrace:
    """Run predict, update and resample against each arriving observation.

    ``model_provider(obs)`` returns the concentration operator covering
    ``obs``. Each observation is assimilated ``iters_per_step`` times and a
    snapshot is kept after the last iteration.

    Raises:
        DegenerateRun: ESS below 2 for 10 consecutive iterations.
    """
    if resample not in ("adaptive", "every"):
        raise InvalidConfig("resample must be 'adaptive' or 'every'")
    if iters_per_step < 1:
        raise InvalidConfig("iters_per_step must be >= 1")
    root = np.random.SeedSequence(int(seed))
    init_seq, walk_seq, res_seq = root.spawn(3)
    rng_walk = np.random.default_rng(walk_seq)
    rng_res = np.random.default_rng(res_seq)
    ens = init_particles(prior, n_particles, np.random.default_rng(init_seq))
    trace = FilterTrace(meta={"n_particles": n_particles, "iters_per_step": iters_per_step, "seed": int(seed),
                              "resample": resample, **(meta or {})})
    low_streak = 0
    prev_end = None
    for k, obs in enumerate(observations):
        op = model_provider(obs)
        if op is None:
            raise OperatorWindowMismatch(f"no operator for observation at t={obs.t}")
        if history_segment and prev_end is not None:
            ens = replace(ens, states=_shift_history(ens.states, int(round((obs.window[1] - prev_end) / history_segment))))
        prev_end = obs.window[1]
        step_spec = replace(spec, operator=op)
        ess = ens.ess()
        for it in range(iters_per_step):
            ens = predict(ens, noise, rng_walk, reflect)
            ens, ess = update_weights(ens, obs.values, step_spec)
            low_streak = low_streak + 1 if ess < 2.0 else 0
            if low_streak >= 10:
                raise DegenerateRun(f"ESS below 2 for 10 consecutive iterations (t={obs.t}, iteration {ens.iteration})")
            if (it + 1) % record_every == 0 or it == iters_per_step - 1:
                mean = ens.mean()
                rec = {"iter": ens.iteration, "t": float(obs.t), "ess": ess, "operator": op.op_id,
                       "mean": {"x": float(mean[0])} if len(mean) == 1 else
                       {"x": float(mean[0]), "y": float(mean[1]), "s": float(mean[-1]) if len(mean) > 2 else None}}
                trace.records.append(rec)
            if it == iters_per_step - 1:
                trace.snapshots.append(Snapshot(float(obs.t), tuple(obs.window), ens, ess, op.op_id, ens.iteration))
            if resample == "every" or ess < ess_fraction * ens.n:
                ens = resample_systematic(ens, rng_res)
        if progress is not None:
            progress(k, obs, ens)
    return trace
