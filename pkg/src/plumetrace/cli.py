"""``plumetrace`` command line.

Every subcommand takes an optional ``--config`` TOML file whose keys are
the long option names (dashes or underscores). Explicit flags override the
file, and the file overrides built-in defaults. Each run writes a
``manifest.json`` echoing the effective configuration plus the SHA-256 of
every output, so any artifact can be regenerated from its manifest.

Exit codes: 0 ok, 2 configuration or input error, 3 numerical failure,
4 inference degeneracy.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import tomli

from . import __version__
from .domain import (
    CaseStudyConfig,
    ConstantBackground,
    RollingQuantileBackground,
    background_at,
    build_case_study_scenario,
    crossing_time,
    load_observation_csv,
    load_scenario,
    save_scenario,
    write_observation_csv,
)
from .errors import CflViolation, InferenceError, InputError, InvalidConfig, NumericalError
from .evaluation import ModelEntry, benchmark_models, localization_error, rate_tracking_error, tail_average
from .flow import write_flow_csv
from .pipeline import (
    InversionConfig,
    fit_window_plumes,
    invert,
    mlp_operators,
    observe_scenario,
    plume_operators,
    solver_operators,
    window_observations,
)
from .plume import plume_unit_response
from .sir import FilterTrace, ParticleEnsemble, Snapshot, posterior_summary
from .surrogate import (
    TrainConfig,
    TrainingSet,
    WindowModelSet,
    generate_training_set,
    load_model,
    mlp_forward,
    save_model,
    _derive_seed,
    train_mlp,
    window_bounds,
)
from .transport import SolverSetup, simulate_sensor_series

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_INFERENCE = 0, 2, 3, 4
MANIFEST_VERSION = 1
MAX_SUBSTEP_HALVINGS = 3

# ---------------------------------------------------------------------------
# Option parsing helpers
# ---------------------------------------------------------------------------

_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(s|sec|min|m|h)?\s*$")


def parse_duration(text) -> float:
    """``"4min"``, ``"90s"``, ``"1.5min"`` or a bare number of seconds."""
    if isinstance(text, (int, float)):
        return float(text)
    m = _DURATION.match(str(text))
    if not m:
        raise InvalidConfig(f"cannot parse duration {text!r}; use e.g. 90s or 4min")
    value, unit = float(m.group(1)), (m.group(2) or "s")
    return value * {"s": 1.0, "sec": 1.0, "min": 60.0, "m": 60.0, "h": 3600.0}[unit]


def parse_int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise InvalidConfig(f"expected comma-separated integers, got {text!r}") from None


def parse_point(text) -> tuple[float, float]:
    if isinstance(text, (list, tuple)) and len(text) == 2:
        return float(text[0]), float(text[1])
    try:
        x, y = (float(v) for v in str(text).split(","))
    except ValueError:
        raise InvalidConfig(f"expected a point 'x,y', got {text!r}") from None
    return x, y


# Defaults per subcommand; keys double as the allowed config-file keys.
DEFAULTS = {
    "scenario": {"event": 1, "nx": 50, "ny": 50, "dt": 0.5, "duration": "10min", "diffusivity": 3.0,
                 "noise_sd": 0.0, "background": 0.0, "mean_speed": 2.5},
    "simulate": {"dt_obs": "1s", "dump_every": 0},
    "gen-data": {"windows": "4min", "stride": "1min", "n_sources": 499, "sampling": "uniform", "holdout": [],
                 "holdout_radius": 5.0, "avg_tail": "window", "lead_in": "auto", "duration": None},
    "train": {"windows": "4min", "stride": "1min", "n_sources": 499, "sampling": "uniform", "holdout": [],
              "holdout_radius": 5.0, "avg_tail": "window", "lead_in": "auto", "duration": None,
              "hidden": "100,100,100,100", "epochs": 20000, "batch_size": 32, "learning_rate": 1e-3,
              "optimizer": "momentum", "validation_fraction": 0.1, "early_stop_patience": 2000, "data": None},
    "invert": {"model": "mlp", "models": None, "particles": 1000, "iters": None, "iters_per_step": 100,
               "rate_lo": 0.05, "rate_hi": 5.0, "rate_prior": "loguniform", "walk_sd_xy": 1.0,
               "walk_sd_rate": None, "sigma": None, "sigma_rel_floor": 0.05, "resample": "adaptive",
               "dump_particles": False, "windows": "4min", "stride": "1min", "avg_tail": "window",
               "lead_in": "auto"},
    "evaluate": {"truth": None, "require_truth": False},
    "benchmark": {"models": None, "tail": None, "floor": None},
}

GLOBAL_DEFAULTS = {"seed": 0, "threads": None, "out_dir": "."}


def _norm_key(k: str) -> str:
    return k.replace("-", "_")


def load_config_file(path, command: str) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    data = {_norm_key(k): v for k, v in data.items()}
    allowed = set(DEFAULTS[command]) | set(GLOBAL_DEFAULTS)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise InvalidConfig(f"{path}: unknown keys for '{command}': {', '.join(unknown)}")
    return data


def effective_config(args: argparse.Namespace) -> dict:
    cmd = args.command
    cfg = dict(GLOBAL_DEFAULTS)
    cfg.update(DEFAULTS[cmd])
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config, cmd))
    for key in list(GLOBAL_DEFAULTS) + list(DEFAULTS[cmd]):
        val = getattr(args, key, None)
        if val is not None and val != []:
            cfg[key] = val
    if cfg["threads"] is None:
        env = os.environ.get("PLUMETRACE_THREADS")
        try:
            cfg["threads"] = int(env) if env else 1
        except ValueError:
            raise InvalidConfig(f"PLUMETRACE_THREADS must be an integer, got {env!r}") from None
    if int(cfg["threads"]) < 1:
        raise InvalidConfig("--threads must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def write_manifest(out_dir: Path, command: str, config: dict, outputs, extra: Optional[dict] = None) -> Path:
    # The echoed config leaves out thread count and output location, which
    # do not change any numbers.
    echoed = {k: _jsonable(v) for k, v in config.items() if k not in ("threads", "out_dir")}
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "tool": "plumetrace",
        "version": __version__,
        "command": command,
        "config": echoed,
        "outputs": [{"path": str(Path(p).relative_to(out_dir)), "sha256": sha256_file(p)} for p in outputs],
        **(extra or {}),
    }
    path = out_dir / "manifest.json"
    write_json(path, manifest)
    return path


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8")) | {"_root": str(path.parent)}
    except FileNotFoundError:
        raise InvalidConfig(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from None


def _scenario(path):
    if not Path(path).exists():
        raise InvalidConfig(f"scenario file not found: {path}")
    return load_scenario(path)


def _lead_in(value, scenario) -> float:
    if value == "auto":
        return 2.0 * crossing_time(scenario.domain, scenario.wind, 0.0, scenario.duration, scenario.dt_sim,
                                   scenario.solver.spinup_cap)
    return parse_duration(value)


def _avg_tail(value, window_len: float) -> float:
    return window_len if value == "window" else parse_duration(value)


def _windows(cfg, scenario):
    duration = scenario.duration if cfg.get("duration") in (None, "") else parse_duration(cfg["duration"])
    return window_bounds(duration, parse_duration(cfg["windows"]), parse_duration(cfg["stride"]))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_scenario(cfg) -> int:
    sc = build_case_study_scenario(CaseStudyConfig(
        event=int(cfg["event"]), nx=int(cfg["nx"]), ny=int(cfg["ny"]), dt_sim=float(cfg["dt"]),
        duration=parse_duration(cfg["duration"]), diffusivity=float(cfg["diffusivity"]),
        sensor_noise_sd=float(cfg["noise_sd"]), background_level=float(cfg["background"]),
        mean_speed=float(cfg["mean_speed"]),
    ), seed=int(cfg["seed"]))
    out = _out_dir(cfg)
    path = out / "scenario.toml"
    save_scenario(sc, path)
    write_manifest(out, "scenario", cfg, [path])
    print(path)
    return EXIT_OK


def _record_every(dt_obs: float, dt: float) -> int:
    k = dt_obs / dt
    if k < 1 - 1e-9 or abs(k - round(k)) > 1e-6:
        raise InvalidConfig(f"--dt-obs {dt_obs} s must be a positive multiple of the solver step {dt} s")
    return int(round(k))


def cmd_simulate(cfg) -> int:
    sc = _scenario(cfg["scenario"])
    out = _out_dir(cfg)
    every = _record_every(parse_duration(cfg["dt_obs"]), sc.dt_sim)
    dump_every = int(cfg["dump_every"])
    outputs = []
    dump = None
    if dump_every > 0:
        fields = out / "fields"
        fields.mkdir(exist_ok=True)

        def dump(step, flow, gas):
            row = step // every
            if row % dump_every:
                return
            fp = fields / f"flow_{row:06d}.csv"
            write_flow_csv(flow, fp)
            gp = fields / f"gas_{row:06d}.csv"
            np.savetxt(gp, gas.c, delimiter=",", fmt="%.17g", header=f"t={gas.t!r} rows=j cols=i")
            outputs.extend([fp, gp])

    # The solver refuses steps that break CFL; split dt and retry.
    for attempt in range(MAX_SUBSTEP_HALVINGS + 1):
        try:
            times, readings = observe_scenario(sc, record_every=every, field_dump=dump)
            break
        except CflViolation as exc:
            if attempt == MAX_SUBSTEP_HALVINGS:
                raise
            _log(f"simulate: {exc}; halving dt to {sc.dt_sim / 2:g} s")
            sc = replace(sc, dt_sim=sc.dt_sim / 2)
            every *= 2
            outputs.clear()
    obs_path = out / "observations.csv"
    write_observation_csv(obs_path, times, readings)
    write_manifest(out, "simulate", cfg, [obs_path] + sorted(outputs),
                   {"rows": int(len(times)), "sensors": int(readings.shape[1])})
    print(obs_path)
    return EXIT_OK


def _generate_data(cfg, sc, out: Path) -> tuple[list, list[TrainingSet], list[Path]]:
    setup = SolverSetup.from_scenario(sc)
    windows = _windows(cfg, sc)
    window_len = windows[0][1] - windows[0][0]
    tail = _avg_tail(cfg["avg_tail"], window_len)
    lead = _lead_in(cfg["lead_in"], sc)
    holdout = [parse_point(p) for p in cfg["holdout"]]
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    sets, paths = [], []
    for k, w in enumerate(windows):
        seed = _derive_seed(int(cfg["seed"]), k)
        ds = generate_training_set(setup, int(cfg["n_sources"]), w, seed, sampling=cfg["sampling"],
                                   holdout=holdout, holdout_radius=float(cfg["holdout_radius"]), avg_tail=tail,
                                   threads=int(cfg["threads"]), lead_in=lead, release_start=0.0)
        csv_path = data_dir / f"window_{k:02d}.csv"
        side_path = data_dir / f"window_{k:02d}.json"
        ds.to_csv(csv_path)
        write_json(side_path, ds.sidecar() | {"window_id": k})
        sets.append(ds)
        paths += [csv_path, side_path]
        _log(f"gen-data: window {k} [{w[0]:g}, {w[1]:g}] s, {len(ds.inputs)} rows")
    return windows, sets, paths


def cmd_gen_data(cfg) -> int:
    sc = _scenario(cfg["scenario"])
    out = _out_dir(cfg)
    windows, sets, paths = _generate_data(cfg, sc, out)
    write_manifest(out, "gen-data", cfg, paths, {
        "windows": [{"id": k, "window": list(w), "rows": len(ds.inputs), "sha256": ds.digest(),
                     "csv": f"data/window_{k:02d}.csv"} for k, (w, ds) in enumerate(zip(windows, sets))],
    })
    return EXIT_OK


def _load_datasets(manifest: dict) -> tuple[list, list[TrainingSet]]:
    root = Path(manifest["_root"])
    windows, sets = [], []
    for entry in manifest.get("windows", []):
        csv_path = root / entry["csv"]
        side = json.loads(csv_path.with_suffix(".json").read_text(encoding="utf-8"))
        ds = TrainingSet.from_csv(csv_path, side)
        if ds.digest() != entry["sha256"]:
            raise InvalidConfig(f"{csv_path}: content hash does not match the manifest")
        windows.append(tuple(entry["window"]))
        sets.append(ds)
    if not sets:
        raise InvalidConfig("manifest lists no datasets")
    return windows, sets


def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    if cfg.get("data"):
        manifest = _read_manifest(cfg["data"])
        windows, sets = _load_datasets(manifest)
        data_paths = []
    else:
        if not cfg.get("scenario"):
            raise InvalidConfig("train needs a scenario file or --data DIR")
        sc = _scenario(cfg["scenario"])
        windows, sets, data_paths = _generate_data(cfg, sc, out)
    tc = TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                     learning_rate=float(cfg["learning_rate"]), optimizer=str(cfg["optimizer"]),
                     seed=int(cfg["seed"]), validation_fraction=float(cfg["validation_fraction"]),
                     early_stop_patience=int(cfg["early_stop_patience"]))
    hidden = parse_int_list(cfg["hidden"])
    model_dir = out / "models"
    model_dir.mkdir(exist_ok=True)
    model_paths, entries, timing = [], [], {}
    for k, (w, ds) in enumerate(zip(windows, sets)):
        t = time.perf_counter()
        model = train_mlp(ds, hidden, tc, window_id=k)
        timing[f"window_{k:02d}"] = time.perf_counter() - t
        path = model_dir / f"window_{k:02d}.json"
        save_model(model, path)
        model_paths.append(path)
        entries.append({"id": k, "window": list(w), "model": f"models/window_{k:02d}.json",
                        "csv": f"data/window_{k:02d}.csv" if data_paths else None, "dataset_sha256": ds.digest(),
                        "epochs_run": len(model.log), "best_val_mse": min(r[2] for r in model.log)})
        _log(f"train: window {k} done in {timing[f'window_{k:02d}']:.1f} s ({len(model.log)} epochs)")
    datasets = {}
    if cfg.get("data"):
        # Relative to the train directory so manifests do not depend on where the run happened.
        datasets["data_dir"] = Path(os.path.relpath(Path(cfg["data"]).resolve(), out.resolve())).as_posix()
    write_manifest(out, "train", cfg, data_paths + model_paths, {"windows": entries, **datasets})
    write_json(out / "timing.json", {"train_seconds": timing})
    return EXIT_OK


def _model_set(manifest: dict) -> WindowModelSet:
    root = Path(manifest["_root"])
    windows, models, sets = [], [], []
    data_root = root / manifest["data_dir"] if manifest.get("data_dir") else root
    for entry in manifest["windows"]:
        windows.append(tuple(entry["window"]))
        models.append(load_model(root / entry["model"]))
        csv_name = entry.get("csv") or f"data/window_{entry['id']:02d}.csv"
        csv_path = data_root / csv_name
        if csv_path.exists():
            side = json.loads(csv_path.with_suffix(".json").read_text(encoding="utf-8"))
            sets.append(TrainingSet.from_csv(csv_path, side))
    return WindowModelSet(windows, sets if len(sets) == len(models) else [], models)


def _background_vector(sc, times, readings, t: float) -> np.ndarray:
    bg = sc.background
    if isinstance(bg, ConstantBackground):
        return np.asarray(bg.levels, dtype=float)
    if isinstance(bg, RollingQuantileBackground):
        return background_at(bg, times, readings, t)
    return np.zeros(len(sc.layout))


def _build_operators(cfg, sc, windows):
    kind = cfg["model"]
    setup = SolverSetup.from_scenario(sc)
    if kind == "solver":
        window_len = windows[0][1] - windows[0][0]
        return solver_operators(setup, windows, avg_tail=_avg_tail(cfg["avg_tail"], window_len),
                                threads=int(cfg["threads"]))
    if not cfg.get("models"):
        raise InvalidConfig(f"--model {kind} needs --models DIR (output of 'train')")
    ms = _model_set(_read_manifest(cfg["models"]))
    if [tuple(map(float, w)) for w in ms.windows] != [tuple(map(float, w)) for w in windows]:
        raise InvalidConfig("the trained windows do not match --windows/--stride")
    if kind == "mlp":
        return mlp_operators(ms, len(sc.layout))
    if kind == "plume":
        if not ms.datasets:
            raise InvalidConfig("plume fitting needs the training datasets next to the models")
        return plume_operators(fit_window_plumes(ms, setup), ms.windows, setup)
    raise InvalidConfig(f"unknown --model {kind!r}; use mlp, plume or solver")


def _windows_from_models(cfg, sc):
    if cfg["model"] != "solver" and cfg.get("models"):
        manifest = _read_manifest(cfg["models"])
        windows = [tuple(map(float, e["window"])) for e in manifest["windows"]]
        echoed = manifest.get("config", {})
        for key in ("windows", "stride", "avg_tail", "lead_in"):
            if key in echoed:
                cfg[key] = echoed[key]
        return windows
    return _windows(cfg, sc)


def cmd_invert(cfg) -> int:
    sc = _scenario(cfg["scenario"])
    out = _out_dir(cfg)
    times, readings = load_observation_csv(cfg["observations"], len(sc.layout))
    windows = _windows_from_models(cfg, sc)
    window_len = windows[0][1] - windows[0][0]
    if times[-1] < windows[-1][1] - 1e-9:
        raise InvalidConfig(f"{cfg['observations']}: only {len(times)} rows up to t={times[-1]:g} s; "
                            f"the windows need data up to t={windows[-1][1]:g} s")
    obs = window_observations(times, readings, windows, _avg_tail(cfg["avg_tail"], window_len))
    iters_per_step = int(cfg["iters_per_step"])
    if cfg.get("iters") is not None:
        total = int(cfg["iters"])
        if total % len(obs):
            raise InvalidConfig(f"--iters {total} does not split evenly over {len(obs)} windows")
        iters_per_step = total // len(obs)
    ops = _build_operators(cfg, sc, windows)
    icfg = InversionConfig(
        n_particles=int(cfg["particles"]), iters_per_step=iters_per_step, rate_lo=float(cfg["rate_lo"]),
        rate_hi=float(cfg["rate_hi"]), rate_prior=str(cfg["rate_prior"]), walk_sd_xy=float(cfg["walk_sd_xy"]),
        walk_sd_rate=None if cfg["walk_sd_rate"] is None else float(cfg["walk_sd_rate"]),
        sigma=None if cfg["sigma"] is None else float(cfg["sigma"]),
        sigma_rel_floor=float(cfg["sigma_rel_floor"]), resample=str(cfg["resample"]), seed=int(cfg["seed"]),
    )
    background = _background_vector(sc, times, readings, windows[0][1])
    meta = {"model": cfg["model"], "particles": icfg.n_particles, "iters": iters_per_step * len(obs),
            "windows": [list(w) for w in windows], "scenario": sc.name}
    trace = invert(obs, ops, sc.domain, background, icfg, meta=meta)
    trace_path = out / "trace.ndjson"
    trace.write_ndjson(trace_path, dump_particles=bool(cfg["dump_particles"]))
    snap_path = out / "snapshots.ndjson"
    with open(snap_path, "w", encoding="utf-8") as fh:
        for s in trace.snapshots:
            fh.write(json.dumps({"t": s.t, "window": list(s.window), "iter": s.iteration, "operator": s.operator_id,
                                 "ess": s.ess, "particles": s.ensemble.states.tolist(),
                                 "weights": s.ensemble.weights.tolist()}) + "\n")
    final = trace.snapshots[-1]
    summary = {"final": posterior_summary(final.ensemble) | {"t": final.t, "operator": final.operator_id},
               "rates": [{"t": s.t, "s": float(s.ensemble.mean()[-1])} for s in trace.snapshots],
               "sigma": trace.meta["sigma"], "meta": trace.meta}
    sum_path = out / "summary.json"
    write_json(sum_path, summary)
    write_manifest(out, "invert", cfg, [trace_path, snap_path, sum_path])
    write_json(out / "timing.json", trace.timing)
    print(sum_path)
    return EXIT_OK


def _read_snapshots(path) -> list[tuple[float, ParticleEnsemble, list]]:
    path = Path(path)
    if path.is_dir():
        path = path / "snapshots.ndjson"
    if not path.exists():
        raise InvalidConfig(f"snapshot file not found: {path}")
    snaps = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ens = ParticleEnsemble(np.array(rec["particles"], dtype=float), np.array(rec["weights"], dtype=float))
                snaps.append((float(rec["t"]), ens, rec.get("window", [0.0, 0.0])))
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                raise InvalidConfig(f"{path}:{lineno}: not a snapshot record ({exc})") from None
    if not snaps:
        raise InvalidConfig(f"{path}: no snapshots")
    return snaps


def cmd_evaluate(cfg) -> int:
    snaps = _read_snapshots(cfg["trace"])
    out = _out_dir(cfg)
    outputs = []
    final_t, final, _ = snaps[-1]
    post_path = out / "posterior.csv"
    with open(post_path, "w", encoding="utf-8") as fh:
        fh.write("x,y,s,weight\n")
        for st, w in zip(final.states, final.weights):
            fh.write(f"{st[0]!r},{st[1]!r},{st[-1]!r},{w!r}\n")
    outputs.append(post_path)
    if not cfg.get("truth"):
        if cfg["require_truth"]:
            raise InvalidConfig("--require-truth given but no --truth scenario")
        write_manifest(out, "evaluate", cfg, outputs)
        return EXIT_OK
    sc = _scenario(cfg["truth"])
    src = sc.sources[0]
    trace = FilterTrace(meta={}, snapshots=[Snapshot(t, tuple(w), e, e.ess(), "", 0) for t, e, w in snaps])
    dist = localization_error(trace, (src.x, src.y))
    rates = rate_tracking_error(trace, src.profile)
    loc_path = out / "localization.csv"
    with open(loc_path, "w", encoding="utf-8") as fh:
        fh.write("t,mean_distance\n")
        for t, d in zip(rates["t"], dist):
            fh.write(f"{float(t)!r},{float(d)!r}\n")
    rate_path = out / "rates.csv"
    with open(rate_path, "w", encoding="utf-8") as fh:
        fh.write("t,estimate,truth,rel_error\n")
        for t, e, tr, r in zip(rates["t"], rates["estimate"], rates["truth"], rates["rel_error"]):
            fh.write(f"{float(t)!r},{float(e)!r},{float(tr)!r},{float(r)!r}\n")
    metrics = {
        "schema_version": 1,
        "rate_mape_percent": float(rates["mean_rel_error"] * 100.0),
        "final_mean_distance": float(dist[-1]),
        "final_distance_fraction_of_width": float(dist[-1] / sc.domain.width),
        "initial_mean_distance": float(dist[0]),
        "truth": {"x": src.x, "y": src.y},
    }
    mape_path = out / "mape.json"
    write_json(mape_path, metrics)
    outputs += [loc_path, rate_path, mape_path]
    write_manifest(out, "evaluate", cfg, outputs)
    print(mape_path)
    return EXIT_OK


def cmd_benchmark(cfg) -> int:
    sc = _scenario(cfg["scenario"])
    out = _out_dir(cfg)
    if not cfg.get("models"):
        raise InvalidConfig("benchmark needs --models DIR (output of 'train')")
    manifest = _read_manifest(cfg["models"])
    ms = _model_set(manifest)
    if not ms.datasets:
        raise InvalidConfig("benchmark needs the training datasets next to the models")
    setup = SolverSetup.from_scenario(sc)
    src = sc.sources[0]
    xy = np.array([[src.x, src.y]])

    data_tail = float(ms.datasets[0].meta.get("avg_tail", ms.windows[0][1] - ms.windows[0][0]))
    tail = data_tail if cfg["tail"] is None else parse_duration(cfg["tail"])
    if abs(data_tail - tail) > 1e-9:
        raise InvalidConfig(f"models were trained on {data_tail:g} s averages; benchmark asked for {tail:g} s "
                            "(train with --avg-tail to match)")
    times, readings = observe_scenario(sc, ms.windows[-1][1])
    ends = np.array([w[1] for w in ms.windows])
    observed = np.vstack([tail_average(times, readings, t, tail) for t in ends])
    observed = observed - _background_vector(sc, times, readings, float(ends[0]))
    by_end = {float(w[1]): k for k, w in enumerate(ms.windows)}

    def rate_for(k):
        t0 = ms.datasets[k].meta.get("emission_start", ms.windows[k][0])
        return src.profile.mean_rate(t0, ms.windows[k][1])

    def solver(t):
        k = by_end[t]
        start = ms.datasets[k].meta.get("emission_start")
        return simulate_sensor_series(setup, xy[0], ms.windows[k], avg_tail=tail, emission_start=start) * rate_for(k)

    def surrogate(t):
        k = by_end[t]
        return mlp_forward(ms.models[k], xy)[0] * rate_for(k)

    t = time.perf_counter()
    plumes = fit_window_plumes(ms, setup)
    plume_build = time.perf_counter() - t

    def plume(t):
        k = by_end[t]
        return plume_unit_response(xy, sc.layout, plumes[k])[0] * rate_for(k)

    floor = cfg["floor"]
    if floor is None:
        floor = 2.0 * sc.sensor_noise_sd if sc.sensor_noise_sd > 0 else 0.01 * float(np.max(np.abs(observed)))
    timing_path = Path(manifest["_root"]) / "timing.json"
    train_s = sum(json.loads(timing_path.read_text())["train_seconds"].values()) if timing_path.exists() else 0.0
    models = {"plume": ModelEntry(plume, plume_build), "solver": ModelEntry(solver),
              "mlp": ModelEntry(surrogate, train_s)}
    report = benchmark_models(ends, observed, models, float(floor), meta={"scenario": sc.name, "tail": tail})
    csv_path, json_path = report.write(out, include_timing=False)
    write_manifest(out, "benchmark", cfg, [csv_path, json_path])
    write_json(out / "timing.json", {"wall_seconds": report.wall_seconds, "cold_seconds": report.cold_seconds})
    for name, m in report.mape.items():
        print(f"{name:8s} MAPE {m.percent:7.2f}%  wall {report.wall_seconds[name]:.3f} s")
    return EXIT_OK


COMMANDS = {
    "scenario": cmd_scenario,
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "invert": cmd_invert,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=d, help="worker threads (default $PLUMETRACE_THREADS or 1)")
    p.add_argument("--out-dir", dest="out_dir", default=d, help="output directory (default .)")
    p.add_argument("--config", default=d, help="TOML file with option values")


def _window_opts(p) -> None:
    p.add_argument("--windows", help="window length, e.g. 4min")
    p.add_argument("--stride", help="window stride, e.g. 1min")
    p.add_argument("--avg-tail", dest="avg_tail", help="averaging span per window ('window' or e.g. 20s)")
    p.add_argument("--lead-in", dest="lead_in", help="emission lead before each window ('auto' or e.g. 160s)")


def _data_opts(p) -> None:
    _window_opts(p)
    p.add_argument("--n-sources", dest="n_sources", type=int, help="simulations per window")
    p.add_argument("--sampling", choices=["uniform", "grid"])
    p.add_argument("--holdout", action="append", default=[], help="x,y excluded from sampling (repeatable)")
    p.add_argument("--holdout-radius", dest="holdout_radius", type=float)
    p.add_argument("--duration", help="stream length (default: scenario duration)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plumetrace", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"plumetrace {__version__}")
    _add_globals(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario", help="write the obstructed case-study scenario")
    _add_globals(p, suppress=True)
    p.add_argument("--event", type=int, choices=[1, 2, 3])
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--duration")
    p.add_argument("--diffusivity", type=float)
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.add_argument("--background", type=float)
    p.add_argument("--mean-speed", dest="mean_speed", type=float)

    p = sub.add_parser("simulate", help="run the coupled solver and write sensor observations")
    _add_globals(p, suppress=True)
    p.add_argument("scenario")
    p.add_argument("--dt-obs", dest="dt_obs", help="observation interval (multiple of dt)")
    p.add_argument("--dump-every", dest="dump_every", type=int, help="write flow/gas fields every N observation rows")

    p = sub.add_parser("gen-data", help="generate per-window surrogate training sets")
    _add_globals(p, suppress=True)
    p.add_argument("scenario")
    _data_opts(p)

    p = sub.add_parser("train", help="train one surrogate per window")
    _add_globals(p, suppress=True)
    p.add_argument("scenario", nargs="?")
    p.add_argument("--data", help="gen-data output directory (skips generation)")
    _data_opts(p)
    p.add_argument("--hidden", help="hidden layer sizes, e.g. 100,100,100,100")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    p.add_argument("--optimizer", choices=["sgd", "momentum"])
    p.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    p.add_argument("--early-stop-patience", dest="early_stop_patience", type=int)

    p = sub.add_parser("invert", help="particle-filter inversion of an observation file")
    _add_globals(p, suppress=True)
    p.add_argument("observations")
    p.add_argument("--scenario", required=True)
    p.add_argument("--model", choices=["mlp", "plume", "solver"])
    p.add_argument("--models", help="train output directory")
    p.add_argument("--particles", type=int)
    p.add_argument("--iters", type=int, help="total iterations, split evenly over windows")
    p.add_argument("--iters-per-step", dest="iters_per_step", type=int)
    p.add_argument("--rate-lo", dest="rate_lo", type=float)
    p.add_argument("--rate-hi", dest="rate_hi", type=float)
    p.add_argument("--rate-prior", dest="rate_prior", choices=["loguniform", "uniform"])
    p.add_argument("--walk-sd-xy", dest="walk_sd_xy", type=float)
    p.add_argument("--walk-sd-rate", dest="walk_sd_rate", type=float)
    p.add_argument("--sigma", type=float, help="sensor noise sd for the likelihood")
    p.add_argument("--sigma-rel-floor", dest="sigma_rel_floor", type=float)
    p.add_argument("--resample", choices=["adaptive", "every"])
    p.add_argument("--dump-particles", dest="dump_particles", action="store_const", const=True)
    _window_opts(p)

    p = sub.add_parser("evaluate", help="score an inversion against the true source")
    _add_globals(p, suppress=True)
    p.add_argument("trace", help="invert output directory or snapshots.ndjson")
    p.add_argument("--truth", help="scenario holding the true source")
    p.add_argument("--require-truth", dest="require_truth", action="store_const", const=True)

    p = sub.add_parser("benchmark", help="minute-by-minute prediction benchmark of plume, solver and MLP")
    _add_globals(p, suppress=True)
    p.add_argument("scenario")
    p.add_argument("--models", help="train output directory")
    p.add_argument("--tail", help="averaging tail (default: the span the models were trained on)")
    p.add_argument("--floor", type=float, help="MAPE floor (default 2x noise sd, or 1%% of peak if noiseless)")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = effective_config(args)
        for key in ("scenario", "observations", "trace"):
            if hasattr(args, key):
                cfg[key] = getattr(args, key)
        return COMMANDS[args.command](cfg)
    except InferenceError as exc:
        _log(f"error: inference failed: {exc}")
        return EXIT_INFERENCE
    except NumericalError as exc:
        _log(f"error: numerical failure ({type(exc).__name__}): {exc}")
        return EXIT_NUMERICAL
    except (InputError, FileNotFoundError, IsADirectoryError) as exc:
        _log(f"error: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
