"""MLP emulator of the coupled flow/gas solver.

One network per time window maps a source location ``(x, y)`` to the
unit-emission, tail-averaged reading of every sensor. The network is
fully connected with SeLU hidden layers and a linear output, Xavier
initialized and trained by mini-batch (momentum) SGD on mean squared error
in normalized space. Inputs are scaled to [-1, 1] per axis and targets are
z-scored per sensor.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DivergedTraining,
    InvalidConfig,
    ModelFileError,
    NonFiniteLoss,
    OperatorWindowMismatch,
    SamplingExhausted,
)
from .transport import SolverSetup, simulate_sensor_batch

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

MODEL_FORMAT = "plumetrace-mlp"
MODEL_VERSION = 1


def selu(x):
    x = np.asarray(x, dtype=float)
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_grad(x):
    x = np.asarray(x, dtype=float)
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    in_min: np.ndarray
    in_max: np.ndarray
    out_mean: np.ndarray
    out_sd: np.ndarray
    constant: np.ndarray  # True where a target column had zero spread

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray) -> "NormStats":
        in_min = inputs.min(axis=0)
        in_max = inputs.max(axis=0)
        if np.any(in_max <= in_min):
            raise InvalidConfig("training inputs must span a non-zero range on both axes")
        # Zero range, not just zero sd: the sd of equal floats can round
        # above 0, and a tiny spread can underflow to 0.
        sd = targets.std(axis=0)
        constant = (np.ptp(targets, axis=0) == 0) | ~(sd > 0)
        mean = np.where(constant, targets[0], targets.mean(axis=0))
        sd = np.where(constant, 1.0, sd)
        return cls(in_min, in_max, mean, sd, constant)

    def norm_in(self, x):
        return 2.0 * (np.asarray(x, dtype=float) - self.in_min) / (self.in_max - self.in_min) - 1.0

    def denorm_in(self, z):
        return (np.asarray(z, dtype=float) + 1.0) * 0.5 * (self.in_max - self.in_min) + self.in_min

    def norm_out(self, y):
        return (np.asarray(y, dtype=float) - self.out_mean) / self.out_sd

    def denorm_out(self, z):
        return np.asarray(z, dtype=float) * self.out_sd + self.out_mean

    def to_dict(self) -> dict:
        return {
            "in_min": self.in_min.tolist(), "in_max": self.in_max.tolist(),
            "out_mean": self.out_mean.tolist(), "out_sd": self.out_sd.tolist(),
            "constant": self.constant.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["in_min"], dtype=float), np.array(d["in_max"], dtype=float),
                   np.array(d["out_mean"], dtype=float), np.array(d["out_sd"], dtype=float),
                   np.array(d["constant"], dtype=bool))


@dataclass(frozen=True)
class TrainingSet:
    inputs: np.ndarray   # (R, 2) meters
    targets: np.ndarray  # (R, n_segments * m) unit-emission readings
    window: tuple[float, float]
    n_sensors: int
    n_segments: int = 1
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[1] != 2:
            raise InvalidConfig("training inputs must be (R, 2)")
        if len(self.inputs) < 2:
            raise InvalidConfig("training set needs at least 2 rows")
        if self.targets.shape != (len(self.inputs), self.n_segments * self.n_sensors):
            raise InvalidConfig("training targets have the wrong shape")
        if not (np.isfinite(self.inputs).all() and np.isfinite(self.targets).all()):
            raise InvalidConfig("training data must be finite")

    @property
    def stats(self) -> NormStats:
        return NormStats.fit(self.inputs, self.targets)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.targets, dtype="<f8").tobytes())
        h.update(repr((tuple(map(float, self.window)), self.n_sensors, self.n_segments)).encode())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        cols = [f"sensor_{i}" for i in range(self.n_sensors)]
        if self.n_segments > 1:
            cols = [f"seg{s}_sensor_{i}" for s in range(self.n_segments) for i in range(self.n_sensors)]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(["src_x", "src_y"] + cols) + "\n")
            for xy, row in zip(self.inputs, self.targets):
                fh.write(",".join(repr(float(v)) for v in (*xy, *row)) + "\n")

    def sidecar(self) -> dict:
        return {"window": [float(self.window[0]), float(self.window[1])], "n_rows": int(len(self.inputs)),
                "n_sensors": self.n_sensors, "n_segments": self.n_segments, "sha256": self.digest(),
                **self.meta}

    @classmethod
    def from_csv(cls, path, sidecar: dict) -> "TrainingSet":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        m = int(sidecar["n_sensors"])
        nseg = int(sidecar.get("n_segments", 1))
        if data.shape[1] != 2 + m * nseg:
            raise InvalidConfig(f"{path}: expected {2 + m * nseg} columns, got {data.shape[1]}")
        meta = {k: v for k, v in sidecar.items() if k not in ("window", "n_rows", "n_sensors", "n_segments", "sha256")}
        return cls(data[:, :2].copy(), data[:, 2:].copy(), tuple(sidecar["window"]), m, nseg, meta)


def _derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed) % 2**63, *keys]).generate_state(1, dtype=np.uint64)[0])


def _valid_sources(domain, pts: np.ndarray, holdout, holdout_radius: float) -> np.ndarray:
    ok = domain.is_fluid(pts[:, 0], pts[:, 1])
    for hx, hy in holdout:
        ok &= np.hypot(pts[:, 0] - hx, pts[:, 1] - hy) > holdout_radius
    return ok


def sample_source_locations(domain, n_sources: int, seed: int, sampling: str = "uniform", holdout=(),
                            holdout_radius: float = 5.0, region=None) -> np.ndarray:
    """Candidate source locations inside the fluid part of ``region``.

    ``region`` is ``(x0, y0, x1, y1)``, defaulting to the whole domain.
    Grid sampling uses a cell-centered lattice, refined until enough valid
    nodes exist and thinned evenly to exactly ``n_sources``.
    """
    if n_sources < 2:
        raise InvalidConfig("n_sources must be >= 2")
    x0, y0, x1, y1 = region if region is not None else (0.0, 0.0, domain.width, domain.height)
    holdout = [tuple(h) for h in holdout]
    if sampling == "grid":
        side = math.isqrt(n_sources - 1) + 1
        for _ in range(64):
            gx = x0 + (np.arange(side) + 0.5) * (x1 - x0) / side
            gy = y0 + (np.arange(side) + 0.5) * (y1 - y0) / side
            X, Y = np.meshgrid(gx, gy)
            pts = np.column_stack([X.ravel(), Y.ravel()])
            pts = pts[_valid_sources(domain, pts, holdout, holdout_radius)]
            if len(pts) >= n_sources:
                pick = np.round(np.linspace(0, len(pts) - 1, n_sources)).astype(int)
                return pts[pick]
            side += 1
        raise SamplingExhausted("grid sampling could not place enough sources outside obstacles")
    if sampling != "uniform":
        raise InvalidConfig(f"unknown sampling {sampling!r}; use 'grid' or 'uniform'")
    rng = np.random.default_rng(seed)
    found: list[np.ndarray] = []
    count = drawn = 0
    while count < n_sources:
        batch = rng.uniform([x0, y0], [x1, y1], size=(max(64, 2 * n_sources), 2))
        drawn += len(batch)
        good = batch[_valid_sources(domain, batch, holdout, holdout_radius)]
        found.append(good)
        count += len(good)
        if drawn >= 100 * max(n_sources, 64) and count < 0.01 * drawn:
            raise SamplingExhausted(f"only {count} of {drawn} draws landed in the fluid region")
    return np.vstack(found)[:n_sources]


def generate_training_set(setup: SolverSetup, n_sources: int, window: tuple[float, float], seed: int, *,
                          sampling: str = "uniform", holdout=(), holdout_radius: float = 5.0,
                          avg_tail: float = 20.0, n_segments: int = 1, threads: int = 1,
                          region=None, spinup: Optional[float] = None, lead_in: float = 0.0,
                          release_start: Optional[float] = None) -> TrainingSet:
    """Simulate unit-emission readings at sampled source locations.

    Emission starts ``lead_in`` seconds before the window (never before
    ``release_start``) so gas already in transit at ``t0`` is represented.
    """
    pts = sample_source_locations(setup.domain, n_sources, seed, sampling, holdout, holdout_radius, region)
    t_emit = float(window[0]) - lead_in
    if release_start is not None:
        t_emit = max(t_emit, float(release_start))
    out = simulate_sensor_batch(setup, pts, window, avg_tail=avg_tail, n_segments=n_segments,
                                threads=threads, spinup=spinup, emission_start=t_emit)
    targets = out.reshape(len(pts), -1)
    meta = {"sampling": sampling, "seed": int(seed), "avg_tail": float(avg_tail), "emission_start": t_emit}
    return TrainingSet(pts, targets, (float(window[0]), float(window[1])), len(setup.layout), n_segments, meta)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpModel:
    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]  # W_l has shape (in, out)
    biases: tuple[np.ndarray, ...]
    stats: NormStats
    window: tuple[float, float] = (0.0, 0.0)
    window_id: int = 0
    n_segments: int = 1
    log: tuple = field(default=(), compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ModelFileError("layer count does not match layer_sizes")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[l], sizes[l + 1]) or b.shape != (sizes[l + 1],):
                raise ModelFileError(f"layer {l} has shapes {W.shape}/{b.shape}, expected "
                                     f"({sizes[l]}, {sizes[l + 1]})/({sizes[l + 1]},)")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ModelFileError(f"layer {l} has non-finite parameters")
        if sizes[0] != 2:
            raise ModelFileError("input layer must have 2 units")
        if self.stats.out_mean.shape != (sizes[-1],):
            raise ModelFileError("normalization stats do not match the output layer")

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out


def _forward(params: Sequence[np.ndarray], X: np.ndarray, keep: bool = False):
    """Normalized-space forward pass; optionally keep pre-activations."""
    n_layers = len(params) // 2
    h = X
    cache = [X]
    for l in range(n_layers):
        z = h @ params[2 * l] + params[2 * l + 1]
        if l < n_layers - 1:
            if keep:
                cache.append(z)
            h = selu(z)
            if keep:
                cache.append(h)
        else:
            h = z
    return (h, cache) if keep else h


def loss_and_grads(params: Sequence[np.ndarray], X: np.ndarray, Y: np.ndarray):
    """MSE ``mean_i ||f(x_i) - y_i||^2`` and its gradient (backprop)."""
    out, cache = _forward(params, X, keep=True)
    n = X.shape[0]
    diff = out - Y
    loss = float(np.sum(diff * diff) / n)
    n_layers = len(params) // 2
    grads: list[Optional[np.ndarray]] = [None] * len(params)
    delta = 2.0 * diff / n
    for l in range(n_layers - 1, -1, -1):
        h_in = cache[2 * l] if l > 0 else cache[0]
        grads[2 * l] = h_in.T @ delta
        grads[2 * l + 1] = delta.sum(axis=0)
        if l > 0:
            z_prev = cache[2 * l - 1]
            delta = (delta @ params[2 * l].T) * selu_grad(z_prev)
    return loss, grads


def mlp_forward(model: MlpModel, xy) -> np.ndarray:
    """Denormalized, non-negative unit-emission readings for ``xy``.

    Accepts a single ``(2,)`` location or an ``(N, 2)`` batch.
    """
    xy = np.asarray(xy, dtype=float)
    single = xy.ndim == 1
    X = model.stats.norm_in(np.atleast_2d(xy))
    out = model.stats.denorm_out(_forward(model.params(), X))
    np.maximum(out, 0.0, out=out)
    return out[0] if single else out


def xavier_init(sizes: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20000
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "momentum"  # or "sgd"
    momentum: float = 0.9
    seed: int = 0
    validation_fraction: float = 0.1
    early_stop_patience: int = 2000
    freeze_hidden: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if not 0 < self.validation_fraction < 0.5:
            raise InvalidConfig("validation_fraction must lie in (0, 0.5)")
        if self.optimizer not in ("sgd", "momentum"):
            raise InvalidConfig("optimizer must be 'sgd' or 'momentum'")
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise InvalidConfig("batch_size and learning_rate must be positive")


def _split(n_rows: int, fraction: float, seed: int):
    rng = np.random.default_rng(_derive_seed(seed, 0xDA7A))
    perm = rng.permutation(n_rows)
    n_val = max(1, int(round(fraction * n_rows)))
    if n_rows - n_val < 1:
        raise InvalidConfig("not enough rows for a training/validation split")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_mlp(dataset: TrainingSet, hidden: Sequence[int], config: TrainConfig = TrainConfig(), *,
              window_id: int = 0, init: Optional[MlpModel] = None) -> MlpModel:
    """Fit an MLP to ``dataset`` and return the best-validation snapshot.

    Shuffling is drawn from a generator seeded by ``(seed, epoch)``, so a
    given ``(dataset, hidden, config)`` always yields the same model.

    Raises:
        NonFiniteLoss: a mini-batch loss became NaN or infinite.
        DivergedTraining: validation loss stayed above 10x its initial
            value for 50 consecutive epochs.
    """
    stats = dataset.stats
    X = stats.norm_in(dataset.inputs)
    Y = stats.norm_out(dataset.targets)
    sizes = (2, *map(int, hidden), Y.shape[1])
    if init is not None:
        params = [p.copy() for p in init.params()]
    else:
        params = xavier_init(sizes, np.random.default_rng(_derive_seed(config.seed, 0x1417)))
    # Constant sensors are exact at zero normalized output; pin their column.
    const = np.asarray(stats.constant, dtype=bool)
    params[-2][:, const] = 0.0
    params[-1][const] = 0.0
    tr, va = _split(len(X), config.validation_fraction, config.seed)
    Xt, Yt, Xv, Yv = X[tr], Y[tr], X[va], Y[va]
    n_layers = len(params) // 2
    trainable = list(range(len(params)))
    if config.freeze_hidden:
        trainable = [2 * (n_layers - 1), 2 * (n_layers - 1) + 1]
    velocity = [np.zeros_like(p) for p in params]
    mu = config.momentum if config.optimizer == "momentum" else 0.0
    lr = config.learning_rate

    def val_loss():
        d = _forward(params, Xv) - Yv
        return float(np.sum(d * d) / len(Xv))

    initial_val = val_loss()
    best_val = initial_val
    best = [p.copy() for p in params]
    best_epoch = 0
    log = []
    bad_streak = 0
    bs = min(config.batch_size, len(Xt))
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng(_derive_seed(config.seed, epoch)).permutation(len(Xt))
            total = 0.0
            for b, start in enumerate(range(0, len(Xt), bs)):
                idx = order[start:start + bs]
                loss, grads = loss_and_grads(params, Xt[idx], Yt[idx])
                if not math.isfinite(loss):
                    raise NonFiniteLoss(epoch, b)
                total += loss * len(idx)
                grads[-2][:, const] = 0.0
                grads[-1][const] = 0.0
                for k in trainable:
                    if mu:
                        velocity[k] *= mu
                        velocity[k] -= lr * grads[k]
                        params[k] += velocity[k]
                    else:
                        params[k] -= lr * grads[k]
            vl = val_loss()
            if not math.isfinite(vl):
                raise NonFiniteLoss(epoch, -1)
            log.append((epoch, total / len(Xt), vl))
            if vl < best_val:
                best_val = vl
                best = [p.copy() for p in params]
                best_epoch = epoch
            bad_streak = bad_streak + 1 if vl > 10 * initial_val else 0
            if bad_streak >= 50:
                raise DivergedTraining(f"validation loss above 10x initial for 50 epochs (epoch {epoch})")
            if epoch - best_epoch >= config.early_stop_patience:
                break
    return MlpModel(
        layer_sizes=sizes, weights=tuple(best[0::2]), biases=tuple(best[1::2]), stats=stats,
        window=tuple(map(float, dataset.window)), window_id=window_id, n_segments=dataset.n_segments,
        log=tuple(log),
    )


def training_mse(model: MlpModel, dataset: TrainingSet) -> float:
    X = model.stats.norm_in(dataset.inputs)
    d = _forward(model.params(), X) - model.stats.norm_out(dataset.targets)
    return float(np.sum(d * d) / len(X))


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def model_to_dict(model: MlpModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "activation": "selu",
        "layer_sizes": list(model.layer_sizes),
        "weights": [W.tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "norm": model.stats.to_dict(),
        "window": [float(model.window[0]), float(model.window[1])],
        "window_id": int(model.window_id),
        "n_segments": int(model.n_segments),
    }


def model_from_dict(d: dict) -> MlpModel:
    if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
        raise ModelFileError(f"unsupported model format {d.get('format')!r} v{d.get('version')!r}")
    if d.get("activation", "selu") != "selu":
        raise ModelFileError("only SeLU hidden activations are supported")
    try:
        return MlpModel(
            layer_sizes=tuple(d["layer_sizes"]),
            weights=tuple(np.array(W, dtype=float).reshape(len(W), -1) for W in d["weights"]),
            biases=tuple(np.array(b, dtype=float) for b in d["biases"]),
            stats=NormStats.from_dict(d["norm"]),
            window=tuple(d["window"]),
            window_id=int(d["window_id"]),
            n_segments=int(d.get("n_segments", 1)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ModelFileError(f"malformed model file: {exc}") from None


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), separators=(",", ":")), encoding="utf-8")


def load_model(path) -> MlpModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"cannot read model {path}: {exc}") from None
    return model_from_dict(d)


# ---------------------------------------------------------------------------
# Sliding windows
# ---------------------------------------------------------------------------


def window_bounds(duration: float, window_len: float, stride: float, start: float = 0.0) -> list[tuple[float, float]]:
    """Windows ``[start + k*stride, start + k*stride + window_len]`` inside the stream."""
    if window_len > duration:
        raise InvalidConfig(f"stream duration {duration} s is shorter than the window {window_len} s")
    if not (window_len > 0 and stride > 0):
        raise InvalidConfig("window length and stride must be positive")
    n = int(math.floor((duration - window_len) / stride + 1e-9)) + 1
    return [(start + k * stride, start + k * stride + window_len) for k in range(n)]


@dataclass
class WindowModelSet:
    windows: list[tuple[float, float]]
    datasets: list[TrainingSet]
    models: list[MlpModel]
    timings: dict = field(default_factory=dict)

    def index_at(self, t: float) -> int:
        """Most recent window that has completed by time ``t``."""
        done = [k for k, (_, t1) in enumerate(self.windows) if t1 <= t + 1e-9]
        if not done:
            raise OperatorWindowMismatch(f"no window has completed by t={t}")
        return max(done, key=lambda k: (self.windows[k][1], k))

    def lookup(self, t: float) -> MlpModel:
        return self.models[self.index_at(t)]


def train_window_models(setup: SolverSetup, duration: float, window_len: float, stride: float, n_sources: int,
                        hidden: Sequence[int], train_config: TrainConfig, seed: int, *, sampling: str = "uniform",
                        holdout=(), avg_tail: Optional[float] = None, n_segments: int = 1, threads: int = 1,
                        region=None, start: float = 0.0, lead_in: float = 0.0, progress=None) -> WindowModelSet:
    """Generate data and train one surrogate per sliding window.

    Targets are averaged over ``avg_tail`` seconds (default: the whole
    window); emission leads each window by ``lead_in`` but never precedes
    the stream ``start``.
    """
    tail = window_len if avg_tail is None else avg_tail
    windows = window_bounds(duration, window_len, stride, start)
    datasets, models = [], []
    t_data = t_train = 0.0
    for k, win in enumerate(windows):
        t = time.perf_counter()
        ds = generate_training_set(setup, n_sources, win, _derive_seed(seed, k), sampling=sampling,
                                   holdout=holdout, avg_tail=tail, n_segments=n_segments,
                                   threads=threads, region=region, lead_in=lead_in, release_start=start)
        t_data += time.perf_counter() - t
        t = time.perf_counter()
        model = train_mlp(ds, hidden, train_config, window_id=k)
        t_train += time.perf_counter() - t
        datasets.append(ds)
        models.append(model)
        if progress is not None:
            progress(k, win)
    return WindowModelSet(windows, datasets, models, {"data_s": t_data, "train_s": t_train})
