import json

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plumetrace.domain import Domain, Rect
from plumetrace.errors import (
    InvalidConfig,
    ModelFileError,
    NonFiniteLoss,
    OperatorWindowMismatch,
    SamplingExhausted,
)
from plumetrace.surrogate import (
    SELU_ALPHA,
    SELU_LAMBDA,
    MlpModel,
    NormStats,
    TrainConfig,
    TrainingSet,
    WindowModelSet,
    generate_training_set,
    load_model,
    loss_and_grads,
    mlp_forward,
    sample_source_locations,
    save_model,
    selu,
    train_mlp,
    train_window_models,
    training_mse,
    window_bounds,
    xavier_init,
)
from plumetrace.transport import simulate_sensor_series


def toy_set(n=40, m=3, seed=0, fn=None):
    rng = np.random.default_rng(seed)
    X = rng.uniform([0.0, 0.0], [50.0, 20.0], size=(n, 2))
    if fn is None:
        fn = lambda X: np.c_[np.sin(X[:, 0] / 10), X[:, 1] / 20, (X[:, 0] * X[:, 1]) / 1000][:, :m]
    return TrainingSet(X, fn(X), (0.0, 60.0), m)


def test_selu_constants_and_values():
    assert SELU_LAMBDA == 1.0507009873554805 and SELU_ALPHA == 1.6732632423543772
    got = selu(np.array([0.0, 1.0, -1.0]))
    expected = [0.0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * (np.exp(-1.0) - 1.0)]
    assert got == pytest.approx(expected, rel=1e-15)
    assert got[1] == pytest.approx(1.0507, abs=1e-4) and got[2] == pytest.approx(-1.1113, abs=1e-4)


@given(arrays(np.float64, (6, 2), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (6, 3), elements=st.floats(-1e3, 1e3)))
def test_normalization_round_trip(X, Y):
    assume(np.ptp(X, axis=0).min() > 1e-6)
    stats = NormStats.fit(X, Y)
    scale_x = max(1.0, float(np.abs(X).max()))
    scale_y = max(1.0, float(np.abs(Y).max()))
    assert np.abs(stats.denorm_in(stats.norm_in(X)) - X).max() <= 1e-12 * scale_x
    assert np.abs(stats.denorm_out(stats.norm_out(Y)) - Y).max() <= 1e-12 * scale_y


def test_normalized_inputs_span_unit_interval():
    ds = toy_set()
    Z = ds.stats.norm_in(ds.inputs)
    assert Z.min(axis=0) == pytest.approx([-1, -1]) and Z.max(axis=0) == pytest.approx([1, 1])


def test_constant_sensor_is_flagged():
    ds = toy_set(fn=lambda X: np.c_[X[:, 0], np.full(len(X), 2.5)], m=2)
    assert ds.stats.constant.tolist() == [False, True]
    assert ds.stats.out_sd[1] == 1.0


def test_zero_network_returns_target_mean():
    ds = toy_set()
    sizes = (2, 4, 3)
    model = MlpModel(sizes, (np.zeros((2, 4)), np.zeros((4, 3))), (np.zeros(4), np.zeros(3)), ds.stats)
    mu = ds.targets.mean(axis=0)
    got = mlp_forward(model, np.array([[10.0, 5.0], [40.0, 1.0]]))
    assert np.allclose(got, np.maximum(mu, 0.0), rtol=1e-12)


def test_forward_is_pure_and_clamped():
    ds = toy_set(fn=lambda X: np.c_[X[:, 0] - 25.0], m=1)
    model = train_mlp(ds, [8], TrainConfig(epochs=50, seed=1))
    xy = np.array([[1.0, 1.0], [49.0, 10.0]])
    a, b = mlp_forward(model, xy), mlp_forward(model, xy)
    assert a.tobytes() == b.tobytes()
    assert np.all(a >= 0.0)
    assert mlp_forward(model, xy[0]).shape == (1,)


@pytest.mark.parametrize("seed", range(3))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = xavier_init((2, 3, 2), rng)
    params = [p + 0.1 * rng.standard_normal(p.shape) for p in params]
    X = rng.uniform(-1, 1, (7, 2))
    Y = rng.standard_normal((7, 2))
    _, grads = loss_and_grads(params, X, Y)
    h = 1e-5
    for _ in range(5):
        k = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[k].shape)
        plus = [p.copy() for p in params]
        minus = [p.copy() for p in params]
        plus[k][idx] += h
        minus[k][idx] -= h
        fd = (loss_and_grads(plus, X, Y)[0] - loss_and_grads(minus, X, Y)[0]) / (2 * h)
        assert abs(fd - grads[k][idx]) <= 1e-4 * max(abs(fd), abs(grads[k][idx]), 1e-8)


def test_constant_targets_are_learned_exactly():
    ds = toy_set(fn=lambda X: np.tile([0.3, 1.2, 5.0], (len(X), 1)))
    model = train_mlp(ds, [6, 6], TrainConfig(epochs=200, seed=0))
    assert training_mse(model, ds) < 1e-8
    assert np.allclose(mlp_forward(model, ds.inputs[:3]), [0.3, 1.2, 5.0])


def test_output_layer_descent_is_monotone():
    ds = toy_set(n=50)
    n_train = 50 - 5
    cfg = TrainConfig(epochs=10, batch_size=n_train, learning_rate=1e-3, optimizer="sgd", freeze_hidden=True,
                      early_stop_patience=100)
    model = train_mlp(ds, [5, 5], cfg)
    losses = [r[1] for r in model.log]
    assert len(losses) == 10
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic():
    ds = toy_set()
    cfg = TrainConfig(epochs=30, seed=7)
    a = train_mlp(ds, [10, 10], cfg)
    b = train_mlp(ds, [10, 10], cfg)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params(), b.params()))
    assert a.log == b.log


def test_non_finite_loss_reports_epoch_and_batch():
    ds = toy_set(fn=lambda X: np.c_[np.exp(X[:, 0] / 3.0)], m=1)
    cfg = TrainConfig(epochs=200, learning_rate=50.0, optimizer="sgd", seed=0)
    with pytest.raises(NonFiniteLoss) as exc:
        train_mlp(ds, [20, 20], cfg)
    assert exc.value.epoch >= 1
    assert "epoch" in str(exc.value)


def test_best_validation_snapshot_is_returned():
    ds = toy_set(n=60)
    model = train_mlp(ds, [16], TrainConfig(epochs=100, seed=3))
    best = min(r[2] for r in model.log)
    # Recompute the validation loss of the returned parameters.
    from plumetrace.surrogate import _forward, _split

    _, va = _split(60, 0.1, 3)
    Z = _forward(model.params(), ds.stats.norm_in(ds.inputs[va])) - ds.stats.norm_out(ds.targets[va])
    assert float(np.sum(Z * Z) / len(va)) == pytest.approx(best, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidConfig):
        TrainConfig(validation_fraction=0.5)
    with pytest.raises(InvalidConfig):
        TrainConfig(optimizer="adam")


class TestModelFiles:
    def test_round_trip(self, tmp_path):
        ds = toy_set()
        model = train_mlp(ds, [4, 4], TrainConfig(epochs=5), window_id=3)
        p = tmp_path / "m.json"
        save_model(model, p)
        again = load_model(p)
        assert again.layer_sizes == model.layer_sizes
        assert all(np.array_equal(a, b) for a, b in zip(again.params(), model.params()))
        assert again.window_id == 3
        assert mlp_forward(again, ds.inputs).tobytes() == mlp_forward(model, ds.inputs).tobytes()

    def test_shape_chain_validated(self, tmp_path):
        ds = toy_set()
        model = train_mlp(ds, [4], TrainConfig(epochs=2))
        p = tmp_path / "m.json"
        save_model(model, p)
        d = json.loads(p.read_text())
        d["weights"][0] = d["weights"][0][:1]
        p.write_text(json.dumps(d))
        with pytest.raises(ModelFileError):
            load_model(p)

    def test_not_a_model(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text('{"format": "other"}')
        with pytest.raises(ModelFileError):
            load_model(p)


class TestSampling:
    def test_grid_484(self):
        pts = sample_source_locations(Domain(200.0, 200.0, 20, 20), 484, 0, "grid")
        assert len(pts) == 484 and len(np.unique(pts[:, 0])) == 22

    def test_holdout_disk_excluded(self):
        pts = sample_source_locations(Domain(100.0, 100.0, 10, 10), 500, 1, holdout=[(50.0, 50.0)])
        assert np.hypot(pts[:, 0] - 50, pts[:, 1] - 50).min() > 5.0

    def test_avoids_obstacles_and_is_seeded(self):
        d = Domain(100.0, 100.0, 20, 20, (Rect(20.0, 20.0, 60.0, 60.0),))
        a = sample_source_locations(d, 200, 4)
        assert d.is_fluid(a[:, 0], a[:, 1]).all()
        assert np.array_equal(a, sample_source_locations(d, 200, 4))

    def test_exhausted(self):
        d = Domain(100.0, 100.0, 20, 20, (Rect(0.0, 0.0, 90.0, 60.0),))
        with pytest.raises(SamplingExhausted):
            sample_source_locations(d, 50, 0, region=(10.0, 10.0, 50.0, 50.0))


class TestDatasets:
    def test_rows_match_direct_simulation(self, tiny_setup):
        ds = generate_training_set(tiny_setup, 8, (0.0, 40.0), seed=5)
        assert ds.targets.shape == (8, 3)
        for i in (0, 3, 7):
            direct = simulate_sensor_series(tiny_setup, ds.inputs[i], (0.0, 40.0))
            assert np.array_equal(direct, ds.targets[i])

    def test_hash_is_stable(self, tiny_setup):
        a = generate_training_set(tiny_setup, 6, (0.0, 40.0), seed=2)
        b = generate_training_set(tiny_setup, 6, (0.0, 40.0), seed=2, threads=2)
        assert a.digest() == b.digest()

    def test_csv_round_trip(self, tiny_setup, tmp_path):
        ds = generate_training_set(tiny_setup, 6, (0.0, 40.0), seed=2)
        p = tmp_path / "d.csv"
        ds.to_csv(p)
        assert p.read_text().splitlines()[0] == "src_x,src_y,sensor_0,sensor_1,sensor_2"
        again = TrainingSet.from_csv(p, ds.sidecar())
        assert again.digest() == ds.digest()

    def test_lead_in_is_floored_at_release(self, tiny_setup):
        ds = generate_training_set(tiny_setup, 4, (20.0, 60.0), seed=1, lead_in=100.0, release_start=0.0)
        assert ds.meta["emission_start"] == 0.0


class TestWindows:
    def test_three_minute_windows(self):
        w = window_bounds(600.0, 180.0, 60.0)
        assert len(w) == 8 and w[0] == (0.0, 180.0) and w[-1] == (420.0, 600.0)

    def test_four_minute_windows(self):
        assert len(window_bounds(600.0, 240.0, 60.0)) == 7

    def test_too_short(self):
        with pytest.raises(InvalidConfig):
            window_bounds(100.0, 180.0, 60.0)

    def test_lookup_uses_latest_completed(self):
        ws = window_bounds(600.0, 180.0, 60.0)
        models = WindowModelSet(ws, [], list(range(len(ws))))
        assert models.lookup(185.0) == 0
        assert models.lookup(241.0) == 1
        with pytest.raises(OperatorWindowMismatch):
            models.lookup(100.0)

    def test_train_window_models(self, tiny_setup):
        ms = train_window_models(tiny_setup, 120.0, 60.0, 30.0, 6, [4], TrainConfig(epochs=3), seed=0)
        assert len(ms.models) == len(ms.datasets) == 3
        assert [m.window_id for m in ms.models] == [0, 1, 2]
        assert ms.datasets[1].window == (30.0, 90.0)
        assert ms.datasets[0].meta["avg_tail"] == 60.0
