"""End-to-end glue: observations, per-window operators and inversion runs."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .domain import Scenario
from .errors import InvalidConfig, OperatorWindowMismatch
from .evaluation import tail_average
from .plume import PlumeParams, fit_plume_params, plume_unit_response, window_params_guess
from .sir import (
    BoundaryReflector,
    LikelihoodSpec,
    ObservationWindow,
    PriorSpec,
    ProcessNoise,
    RatePrior,
    UnitResponseOperator,
    run_filter,
)
from .surrogate import WindowModelSet, mlp_forward, window_bounds
from .transport import SolverSetup, simulate_sensor_batch, simulate_truth


def observe_scenario(scenario: Scenario, t_end: Optional[float] = None, *, noise_seed: Optional[int] = None,
                     record_every: int = 1, field_dump=None):
    """Sensor readings of the scenario's true sources every ``record_every`` steps.

    Background levels and, when ``sensor_noise_sd > 0``, Gaussian noise
    drawn from ``noise_seed`` (default: the scenario seed) are added.
    """
    setup = SolverSetup.from_scenario(scenario)
    t_end = scenario.duration if t_end is None else t_end
    times, readings = simulate_truth(setup, scenario.sources, t_end, record_every=record_every,
                                     field_dump=field_dump)
    bg = scenario.background
    if hasattr(bg, "levels"):
        readings = readings + np.asarray(bg.levels, dtype=float)
    if scenario.sensor_noise_sd > 0:
        rng = np.random.default_rng(scenario.seed if noise_seed is None else noise_seed)
        readings = readings + rng.normal(0.0, scenario.sensor_noise_sd, size=readings.shape)
    return times, readings


def window_observations(times, readings, windows: Sequence[tuple[float, float]], avg_tail: float = 20.0
                        ) -> list[ObservationWindow]:
    """Tail-averaged observation for each window, stamped at its end."""
    times = np.asarray(times, dtype=float)
    readings = np.atleast_2d(np.asarray(readings, dtype=float))
    if len(times) == 0:
        raise InvalidConfig("observation series is empty")
    out = []
    for w in windows:
        if w[1] > times[-1] + 1e-9:
            raise InvalidConfig(f"observations end at t={times[-1]}, window needs t={w[1]}")
        out.append(ObservationWindow(float(w[1]), tail_average(times, readings, w[1], avg_tail), (float(w[0]), float(w[1]))))
    return out


def fit_window_plumes(models: WindowModelSet, setup: SolverSetup) -> list[PlumeParams]:
    """Fit the plume spread laws to each window's training set."""
    out = []
    for ds, (t0, t1) in zip(models.datasets, models.windows):
        speed, direction = window_params_guess(setup.wind, t0, t1)
        if ds.n_segments == 1:
            targets = ds.targets
        else:
            targets = ds.targets.reshape(len(ds.inputs), ds.n_segments, -1).sum(axis=1)
        out.append(fit_plume_params(ds.inputs, targets, setup.layout, speed, direction))
    return out


class WindowOperators:
    """Maps an observation to the operator of its (completed) window."""

    def __init__(self, windows, operators):
        self.windows = [tuple(map(float, w)) for w in windows]
        self.operators = list(operators)

    def __call__(self, obs: ObservationWindow):
        end = float(obs.window[1]) if obs.window != (0.0, 0.0) else float(obs.t)
        for w, op in zip(self.windows, self.operators):
            if abs(w[1] - end) < 1e-9 and (obs.window == (0.0, 0.0) or abs(w[0] - obs.window[0]) < 1e-9):
                return op
        raise OperatorWindowMismatch(f"no operator trained for the window ending at t={end}")


def mlp_operators(models: WindowModelSet, n_sensors: int) -> WindowOperators:
    ops = []
    for k, model in enumerate(models.models):
        scaling = "history" if model.n_segments > 1 else "rate"
        ops.append(UnitResponseOperator(lambda xy, m=model: mlp_forward(m, xy), f"mlp:w{k}", models.windows[k],
                                        scaling, n_sensors))
    return WindowOperators(models.windows, ops)


def plume_operators(params: Sequence[PlumeParams], windows, setup: SolverSetup) -> WindowOperators:
    ops = [UnitResponseOperator(lambda xy, p=p: plume_unit_response(xy, setup.layout, p), f"plume:w{k}", w)
           for k, (p, w) in enumerate(zip(params, windows))]
    return WindowOperators(windows, ops)


def solver_operators(setup: SolverSetup, windows, avg_tail: float = 20.0, threads: int = 1) -> WindowOperators:
    """Runs the coupled solver for every particle: exact but slow."""
    ops = [UnitResponseOperator(lambda xy, w=w: simulate_sensor_batch(setup, xy, w, avg_tail=avg_tail, threads=threads),
                                f"solver:w{k}", w) for k, w in enumerate(windows)]
    return WindowOperators(windows, ops)


@dataclass(frozen=True)
class InversionConfig:
    n_particles: int = 1000
    iters_per_step: int = 100
    rate_lo: float = 0.05
    rate_hi: float = 5.0
    rate_prior: str = "loguniform"
    walk_sd_xy: float = 1.0
    walk_sd_rate: Optional[float] = None
    sigma: Optional[float] = None
    sigma_rel_floor: float = 0.05
    resample: str = "adaptive"
    seed: int = 0

    def prior(self, domain, n_rates: int = 1) -> PriorSpec:
        return PriorSpec(domain, RatePrior(self.rate_lo, self.rate_hi, self.rate_prior), n_rates)

    def noise(self, prior: PriorSpec) -> ProcessNoise:
        s = 0.02 * prior.rate.midpoint if self.walk_sd_rate is None else self.walk_sd_rate
        return ProcessNoise.diagonal(self.walk_sd_xy, self.walk_sd_xy, *([s] * prior.n_rates))


def choose_sigma(observations: Sequence[ObservationWindow], background, config: InversionConfig,
                 pre_release: Optional[np.ndarray] = None) -> float:
    """Sensor-noise sd for the likelihood.

    An explicit value wins. Otherwise the sd of pre-release residuals is
    used, floored at ``sigma_rel_floor`` times the largest background-free
    observation so a noise-free record still gives a usable likelihood.
    """
    if config.sigma is not None:
        return float(config.sigma)
    peak = max(float(np.max(np.abs(o.values - background))) for o in observations)
    est = 0.0
    if pre_release is not None and len(pre_release) > 1:
        est = float(np.std(np.asarray(pre_release) - background, ddof=1))
    sigma = max(est, config.sigma_rel_floor * peak)
    if not sigma > 0:
        raise InvalidConfig("observations carry no signal; pass an explicit sigma")
    return sigma


def invert(observations: Sequence[ObservationWindow], operators: WindowOperators, domain, background,
           config: InversionConfig, *, n_rates: int = 1, history_segment: Optional[float] = None,
           pre_release=None, meta: Optional[dict] = None, record_every: int = 1):
    prior = config.prior(domain, n_rates)
    sigma = choose_sigma(observations, background, config, pre_release)
    spec = LikelihoodSpec(sigma=sigma, background=background)
    t = time.perf_counter()
    trace = run_filter(observations, operators, prior, config.noise(prior), spec, config.iters_per_step,
                       config.n_particles, config.seed, resample=config.resample, reflect=BoundaryReflector(domain),
                       history_segment=history_segment, record_every=record_every,
                       meta={"sigma": sigma, **(meta or {})})
    trace.timing["inversion_s"] = time.perf_counter() - t
    return trace


def case_study_windows(duration: float, window_len: float, stride: float):
    return window_bounds(duration, window_len, stride)
