"""Metrics and the minute-by-minute prediction benchmark."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidConfig, NoValidPoints
from .sir import FilterTrace, mean_distance

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MapeResult:
    percent: float
    n_used: int
    n_excluded: int

    def __float__(self) -> float:
        return self.percent


def mape(predicted, observed, floor: float = 0.0) -> MapeResult:
    """Mean absolute percentage error over points with ``|obs| >= floor``."""
    p = np.asarray(predicted, dtype=float).ravel()
    o = np.asarray(observed, dtype=float).ravel()
    if p.shape != o.shape:
        raise InvalidConfig(f"prediction has {p.size} points, observation has {o.size}")
    use = (np.abs(o) >= floor) & (np.abs(o) > 0)
    if not use.any():
        raise NoValidPoints(f"no observation reaches the floor {floor}")
    err = np.abs(p[use] - o[use]) / np.abs(o[use])
    return MapeResult(float(np.mean(err) * 100.0), int(use.sum()), int(o.size - use.sum()))


def localization_error(trace: FilterTrace, truth) -> np.ndarray:
    """Weight-averaged particle distance to ``truth`` for each snapshot."""
    if not trace.snapshots:
        raise InvalidConfig("trace has no snapshots")
    return np.array([mean_distance(s.ensemble, truth) for s in trace.snapshots])


def rate_tracking_error(trace: FilterTrace, profile, t_min: Optional[float] = None) -> dict:
    """Posterior-mean rate against the true profile at snapshot times.

    The estimate is the last rate column, i.e. the most recent segment in
    rate-history mode.
    """
    snaps = [s for s in trace.snapshots if t_min is None or s.t >= t_min - 1e-9]
    if not snaps:
        raise InvalidConfig("trace has no snapshots in range")
    t = np.array([s.t for s in snaps])
    est = np.array([float(s.ensemble.mean()[-1]) for s in snaps])
    true = np.asarray(profile.rate_at(t), dtype=float) if not callable(profile) else np.asarray(profile(t), dtype=float)
    rel = np.abs(est - true) / np.maximum(np.abs(true), 1e-300)
    return {"t": t, "estimate": est, "truth": true, "rel_error": rel, "mean_rel_error": float(rel.mean())}


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------


@dataclass
class ModelEntry:
    """A prediction function ``t_end -> (m,)`` plus its one-off build cost."""

    predict: Callable[[float], np.ndarray]
    build_seconds: float = 0.0


@dataclass
class PredictionReport:
    times: np.ndarray
    observed: np.ndarray
    predictions: dict
    mape: dict
    wall_seconds: dict
    cold_seconds: dict
    floor: float
    meta: dict = field(default_factory=dict)

    def residuals(self, name: str) -> np.ndarray:
        return self.predictions[name] - self.observed

    def to_json(self, include_timing: bool = True) -> dict:
        models = {}
        for name in self.predictions:
            m = self.mape[name]
            entry = {"mape_percent": m.percent, "n_used": m.n_used, "n_excluded": m.n_excluded}
            if include_timing:
                entry.update(wall_seconds=self.wall_seconds[name], cold_seconds=self.cold_seconds[name])
            models[name] = entry
        return {"schema_version": REPORT_SCHEMA_VERSION, "floor": self.floor, "times": self.times.tolist(),
                "models": models, "meta": self.meta}

    def write(self, out_dir, stem: str = "benchmark", include_timing: bool = True) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "t", "sensor", "observed", "predicted", "residual"])
            for name, pred in self.predictions.items():
                for k, t in enumerate(self.times):
                    for j in range(self.observed.shape[1]):
                        o, p = self.observed[k, j], pred[k, j]
                        w.writerow([name, repr(float(t)), j, repr(float(o)), repr(float(p)), repr(float(p - o))])
        json_path.write_text(json.dumps(self.to_json(include_timing), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return csv_path, json_path


def benchmark_models(times: Sequence[float], observed, models: Mapping[str, ModelEntry], floor: float,
                     meta: Optional[dict] = None) -> PredictionReport:
    """Run each model at every evaluation time and score it against ``observed``.

    Models run one after another (never interleaved) so their wall-clock
    numbers do not contend. MAPE pools all (sensor, time) pairs.
    """
    times = np.asarray(times, dtype=float)
    observed = np.atleast_2d(np.asarray(observed, dtype=float))
    if observed.shape[0] != len(times):
        raise InvalidConfig("observed must have one row per evaluation time")
    preds, scores, wall, cold = {}, {}, {}, {}
    for name, entry in models.items():
        t0 = time.perf_counter()
        rows = [np.asarray(entry.predict(float(t)), dtype=float) for t in times]
        wall[name] = time.perf_counter() - t0
        cold[name] = wall[name] + entry.build_seconds
        preds[name] = np.vstack(rows)
        scores[name] = mape(preds[name], observed, floor)
    return PredictionReport(times, observed, preds, scores, wall, cold, float(floor), dict(meta or {}))


def tail_average(times: np.ndarray, readings: np.ndarray, t_end: float, tail: float) -> np.ndarray:
    """Mean of the readings recorded in ``(t_end - tail, t_end]``."""
    sel = (times > t_end - tail + 1e-9) & (times <= t_end + 1e-9)
    if not sel.any():
        raise InvalidConfig(f"no readings in the {tail} s before t={t_end}")
    return readings[sel].mean(axis=0)
