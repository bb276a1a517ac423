import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plumetrace.domain import Domain, PointSensor, Rect, SensorLayout
from plumetrace.errors import (
    AllWeightsVanished,
    DegenerateRun,
    InvalidConfig,
    OperatorWindowMismatch,
    PriorUnsampleable,
)
from plumetrace.plume import PlumeParams, plume_unit_response
from plumetrace.sir import (
    BoundaryReflector,
    FilterTrace,
    GaussianPrior,
    LikelihoodSpec,
    LinearOperator,
    ObservationWindow,
    ParticleEnsemble,
    PriorSpec,
    ProcessNoise,
    RatePrior,
    UnitResponseOperator,
    init_particles,
    log_likelihood,
    log_likelihoods,
    normalize_log_weights,
    posterior_summary,
    predict,
    resample_systematic,
    run_filter,
    systematic_indices,
    update_weights,
)

OPEN = Domain(100.0, 100.0, 10, 10)


def kalman_toy(q, r, steps, seed=0):
    rng = np.random.default_rng(seed)
    theta, obs = 0.0, []
    for t in range(steps):
        theta += rng.normal(0.0, math.sqrt(q))
        obs.append(ObservationWindow(float(t), np.array([theta + rng.normal(0.0, math.sqrt(r))])))
    return obs


def kalman_means(obs, q, r, m=0.0, P=1.0):
    out = []
    for o in obs:
        P += q
        K = P / (P + r)
        m += K * (o.values[0] - m)
        P *= 1 - K
        out.append((m, P))
    return out


class TestPrior:
    def test_thousand_particles_equal_weights(self):
        ens = init_particles(PriorSpec(OPEN, RatePrior(0.1, 10.0)), 1000, 0)
        assert ens.n == 1000 and np.all(ens.weights == 1e-3)
        assert math.fsum(ens.weights) == 1.0

    def test_quadrant_counts(self):
        n = 100_000
        ens = init_particles(PriorSpec(OPEN, RatePrior(0.1, 10.0)), n, 1)
        x, y = ens.states[:, 0], ens.states[:, 1]
        sd = math.sqrt(n * 0.25 * 0.75)
        for q in [(x < 50) & (y < 50), (x >= 50) & (y < 50), (x < 50) & (y >= 50), (x >= 50) & (y >= 50)]:
            assert abs(q.sum() - n / 4) < 3 * sd

    def test_obstacles_rejected(self):
        d = Domain(100.0, 100.0, 10, 10, (Rect(20.0, 20.0, 60.0, 60.0),))
        ens = init_particles(PriorSpec(d, RatePrior(0.1, 1.0)), 5000, 2)
        assert d.is_fluid(ens.states[:, 0], ens.states[:, 1]).all()

    def test_rates_within_bounds(self):
        ens = init_particles(PriorSpec(OPEN, RatePrior(0.05, 5.0)), 5000, 3)
        assert ens.states[:, 2].min() >= 0.05 and ens.states[:, 2].max() <= 5.0
        # Log-uniform: half the mass below the geometric midpoint.
        assert abs(np.mean(ens.states[:, 2] < math.sqrt(0.05 * 5.0)) - 0.5) < 0.03

    def test_unsampleable(self):
        d = Domain(100.0, 100.0, 10, 10, (Rect(0.0, 0.0, 90.0, 90.0),))
        with pytest.raises(PriorUnsampleable):
            init_particles(PriorSpec(d, RatePrior(0.1, 1.0), region=(10.0, 10.0, 80.0, 80.0)), 100, 0)

    def test_invalid_rate_prior(self):
        with pytest.raises(InvalidConfig):
            RatePrior(0.0, 1.0)
        with pytest.raises(InvalidConfig):
            RatePrior(2.0, 1.0, "uniform")

    def test_needs_two_particles(self):
        with pytest.raises(InvalidConfig):
            init_particles(PriorSpec(OPEN, RatePrior(0.1, 1.0)), 1, 0)


class TestPredict:
    def test_zero_noise_only_counts(self):
        ens = init_particles(PriorSpec(OPEN, RatePrior(0.1, 1.0)), 50, 0)
        out = predict(ens, ProcessNoise(np.zeros((3, 3))), np.random.default_rng(0))
        assert out.states.tobytes() == ens.states.tobytes() and out.iteration == ens.iteration + 1

    def test_displacement_covariance(self):
        n = 100_000
        W = np.diag([4.0, 1.0, 0.0])
        ens = ParticleEnsemble(np.tile([50.0, 50.0, 1.0], (n, 1)), np.full(n, 1.0 / n))
        out = predict(ens, ProcessNoise(W), np.random.default_rng(5))
        C = np.cov((out.states - ens.states).T)
        assert C[0, 0] == pytest.approx(4.0, rel=0.05) and C[1, 1] == pytest.approx(1.0, rel=0.05)
        assert abs(C[0, 1]) < 0.05 and C[2, 2] == 0.0

    def test_wall_reflection_keeps_particles_inside(self):
        n = 10_000
        ens = ParticleEnsemble(np.tile([1.0, 50.0, 1.0], (n, 1)), np.full(n, 1.0 / n))
        out = predict(ens, ProcessNoise.diagonal(30.0, 0.1, 0.5), np.random.default_rng(0), BoundaryReflector(OPEN))
        x = out.states[:, 0]
        assert x.min() > 0 and x.max() < 100
        assert out.states[:, 2].min() >= 0

    def test_obstacle_never_entered(self):
        d = Domain(100.0, 100.0, 20, 20, (Rect(40.0, 40.0, 60.0, 60.0),))
        n = 5000
        ens = ParticleEnsemble(np.tile([38.0, 50.0, 1.0], (n, 1)), np.full(n, 1.0 / n))
        out = predict(ens, ProcessNoise.diagonal(5.0, 5.0, 0.0), np.random.default_rng(1), BoundaryReflector(d))
        assert d.is_fluid(out.states[:, 0], out.states[:, 1]).all()

    def test_noise_must_be_psd(self):
        with pytest.raises(InvalidConfig):
            ProcessNoise(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(InvalidConfig):
            ProcessNoise(np.array([[1.0, 0.5], [0.0, 1.0]]))


def identity_spec(sigma, background=0.0, m=3):
    op = UnitResponseOperator(lambda xy: np.ones((len(xy), m)), "ones")
    return LikelihoodSpec(sigma=sigma, background=background, operator=op)


class TestLikelihood:
    def test_zero_residual(self):
        sigma, m = 0.3, 4
        spec = identity_spec(sigma, m=m)
        got = log_likelihood([1.0, 2.0, 2.5], np.full(m, 2.5), spec)
        assert got == pytest.approx(-m * math.log(sigma * math.sqrt(2 * math.pi)), rel=1e-14)

    def test_gaussian_weight_ratio(self):
        sigma = 0.5
        spec = LikelihoodSpec(sigma, operator=LinearOperator([[1.0]]))
        ll = log_likelihoods(np.array([[0.0], [sigma]]), np.array([0.0]), spec)
        assert math.exp(ll[0] - ll[1]) == pytest.approx(math.exp(0.5), rel=1e-12)
        assert math.exp(0.5) == pytest.approx(1.6487, abs=1e-4)

    def test_background_only(self):
        beta = np.array([1.9, 2.0, 2.1])
        spec = identity_spec(0.2, background=beta)
        zero = log_likelihood([5.0, 5.0, 0.0], beta, spec)
        assert zero == pytest.approx(-3 * math.log(0.2 * math.sqrt(2 * math.pi)), rel=1e-14)

    def test_missing_operator(self):
        with pytest.raises(OperatorWindowMismatch):
            log_likelihoods(np.zeros((2, 3)), np.zeros(3), LikelihoodSpec(1.0))

    def test_sensor_count_mismatch(self):
        with pytest.raises(OperatorWindowMismatch):
            log_likelihoods(np.ones((2, 3)), np.zeros(5), identity_spec(1.0))

    def test_sigma_positive(self):
        with pytest.raises(InvalidConfig):
            LikelihoodSpec(0.0)

    def test_history_scaling_contracts_segments(self):
        resp = lambda xy: np.tile([1.0, 2.0, 10.0, 20.0], (len(xy), 1))  # 2 segments x 2 sensors
        op = UnitResponseOperator(resp, "h", scaling="history", n_sensors=2)
        got = op.predict(np.array([[0.0, 0.0, 3.0, 0.5]]))
        assert got.tolist() == [[3.0 + 5.0, 6.0 + 10.0]]


class TestWeights:
    def test_identical_particles_stay_uniform(self):
        n = 200
        ens = ParticleEnsemble(np.tile([10.0, 10.0, 1.0], (n, 1)), np.full(n, 1.0 / n))
        out, ess = update_weights(ens, np.array([0.7, 0.2, 1.1]), identity_spec(0.5))
        assert np.allclose(out.weights, 1.0 / n, rtol=1e-12) and ess == pytest.approx(n)

    def test_matching_particle_dominates(self):
        sigma = 0.1
        spec = LikelihoodSpec(sigma, operator=LinearOperator([[1.0]]))
        states = np.array([[0.0]] + [[10 * sigma + 0.01 * k] for k in range(99)])
        ens = ParticleEnsemble(states, np.full(100, 0.01))
        out, _ = update_weights(ens, np.array([0.0]), spec)
        assert out.weights[0] > 0.999

    @given(arrays(np.float64, st.integers(2, 50), elements=st.floats(-1e4, 1e4)))
    def test_weights_normalized(self, logw):
        w = normalize_log_weights(logw)
        assert abs(math.fsum(w) - 1.0) < 1e-12
        assert np.all(w >= 0)

    @given(st.lists(st.integers(-100_000, 0), min_size=2, max_size=40), st.integers(-2**20, 2**20))
    def test_shift_invariance_bit_identical(self, ticks, shift):
        # Log-weights on a 2^-10 grid with an integer shift add exactly.
        logw = np.array(ticks, dtype=float) / 1024.0
        assert normalize_log_weights(logw + shift).tobytes() == normalize_log_weights(logw).tobytes()

    @given(arrays(np.float64, st.integers(2, 60), elements=st.floats(0.0, 1.0)))
    def test_ess_bounds(self, raw):
        if raw.sum() == 0:
            raw = raw + 1.0
        ens = ParticleEnsemble(np.zeros((len(raw), 1)), raw / raw.sum())
        assert 1.0 - 1e-9 <= ens.ess() <= len(raw) * (1 + 1e-9)
        res = resample_systematic(ens, 0)
        assert res.ess() == pytest.approx(len(raw), rel=1e-12)

    def test_vanished(self):
        with pytest.raises(AllWeightsVanished):
            normalize_log_weights(np.full(4, -np.inf))
        with pytest.raises(AllWeightsVanished):
            normalize_log_weights(np.array([np.nan, 0.0]))


class TestResampling:
    def test_all_weight_on_one(self):
        w = np.zeros(10)
        w[6] = 1.0
        ens = ParticleEnsemble(np.arange(10.0)[:, None], w)
        out = resample_systematic(ens, 3)
        assert np.all(out.states[:, 0] == 6.0) and np.all(out.ancestry == 6)
        assert np.all(out.weights == 0.1)

    @pytest.mark.parametrize("u", [1e-9, 0.25, 0.5, 0.999999])
    def test_uniform_weights_copy_each_once(self, u):
        n = 17
        assert systematic_indices(np.full(n, 1.0 / n), u).tolist() == list(range(n))

    def test_expected_copies(self):
        w = np.array([0.05, 0.15, 0.3, 0.5])
        n, runs = len(w), 10_000
        rng = np.random.default_rng(11)
        counts = np.zeros(n)
        for _ in range(runs):
            counts += np.bincount(systematic_indices(w, rng.uniform()), minlength=n)
        mean = counts / runs
        # Systematic counts are floor(Nw) or ceil(Nw): variance at most 1/4.
        assert np.all(np.abs(mean - n * w) < 3 * 0.5 / math.sqrt(runs))


class TestSummary:
    def test_all_at_reference(self):
        ens = ParticleEnsemble(np.tile([3.0, 4.0, 1.0], (5, 1)), np.full(5, 0.2))
        assert posterior_summary(ens, (3.0, 4.0))["mean_distance"] == 0.0

    def test_two_particles(self):
        ens = ParticleEnsemble(np.array([[3.0, 0.0, 1.0], [0.0, 5.0, 1.0]]), np.array([0.5, 0.5]))
        assert posterior_summary(ens, (0.0, 0.0))["mean_distance"] == pytest.approx(4.0)

    def test_ellipse_axes(self):
        rng = np.random.default_rng(0)
        n = 200_000
        pts = np.c_[rng.normal(0, 3.0, n), rng.normal(0, 1.0, n), np.ones(n)]
        s = posterior_summary(ParticleEnsemble(pts, np.full(n, 1.0 / n)))
        assert s["ellipse95"]["semi_major"] == pytest.approx(3.0 * math.sqrt(5.991464547107979), rel=0.01)
        assert s["ellipse95"]["semi_minor"] == pytest.approx(math.sqrt(5.991464547107979), rel=0.01)
        assert min(s["ellipse95"]["angle_deg"], 180 - s["ellipse95"]["angle_deg"]) < 1.0


class TestRunFilter:
    def test_matches_kalman(self):
        q, r = 0.25, 1.0
        obs = kalman_toy(q, r, 20)
        trace = run_filter(obs, lambda o: LinearOperator([[1.0]]), GaussianPrior(np.zeros(1), np.eye(1)),
                           ProcessNoise([[q]]), LikelihoodSpec(math.sqrt(r)), 1, 10_000, 1)
        for snap, (m, P) in zip(trace.snapshots, kalman_means(obs, q, r)):
            assert abs(snap.ensemble.mean()[0] - m) < 0.05 * math.sqrt(P)

    def test_noiseless_static_source(self):
        domain = Domain(200.0, 200.0, 50, 50)
        layout = SensorLayout(tuple(PointSensor(x, float(y)) for x in (110.0, 190.0)
                                    for y in np.linspace(15.0, 185.0, 10)))
        params = PlumeParams(0.5, 0.9, 0.4, 0.85, 2.5, 270.0)
        truth = (60.0, 90.0, 1.3)
        op = UnitResponseOperator(lambda xy: plume_unit_response(xy, layout, params), "plume")
        d = plume_unit_response([truth[:2]], layout, params)[0] * truth[2]
        obs = [ObservationWindow(60.0 * (k + 4), d, (60.0 * k, 60.0 * (k + 4))) for k in range(7)]
        prior = PriorSpec(domain, RatePrior(0.05, 5.0))
        trace = run_filter(obs, lambda o: op, prior, ProcessNoise.default_for(prior),
                           LikelihoodSpec(0.05 * d.max()), 100, 1000, 0, reflect=BoundaryReflector(domain))
        mean = trace.snapshots[-1].ensemble.mean()
        assert math.hypot(mean[0] - truth[0], mean[1] - truth[1]) < 2 * domain.dx
        assert len(trace.records) == 700

    def test_flat_likelihood_is_a_random_walk(self):
        prior = PriorSpec(OPEN, RatePrior(0.5, 1.5, "uniform"))
        iters = 100
        op = UnitResponseOperator(lambda xy: np.zeros((len(xy), 2)), "flat")
        obs = [ObservationWindow(1.0, np.zeros(2))]
        trace = run_filter(obs, lambda o: op, prior, ProcessNoise.diagonal(1.0, 1.0, 0.01),
                           LikelihoodSpec(1e12), iters, 2000, 4, reflect=BoundaryReflector(OPEN))
        start = init_particles(prior, 2000, np.random.default_rng(np.random.SeedSequence(4).spawn(3)[0])).mean()
        end = trace.snapshots[-1].ensemble.mean()
        assert math.hypot(*(end[:2] - start[:2])) < 2 * math.sqrt(1.0 * iters)
        assert trace.snapshots[-1].ess == pytest.approx(2000, rel=1e-9)

    def test_degenerate_run(self):
        obs = [ObservationWindow(float(t), np.array([0.0])) for t in range(3)]
        with pytest.raises(DegenerateRun):
            run_filter(obs, lambda o: LinearOperator([[1.0]]), GaussianPrior(np.zeros(1), np.eye(1)),
                       ProcessNoise([[1.0]]), LikelihoodSpec(1e-6), 10, 500, 0)

    def test_missing_operator(self):
        obs = [ObservationWindow(1.0, np.array([0.0]))]
        with pytest.raises(OperatorWindowMismatch):
            run_filter(obs, lambda o: None, GaussianPrior(np.zeros(1), np.eye(1)), ProcessNoise([[1.0]]),
                       LikelihoodSpec(1.0), 2, 10, 0)

    def test_trace_is_deterministic_and_round_trips(self, tmp_path):
        obs = kalman_toy(0.25, 1.0, 5)
        run = lambda: run_filter(obs, lambda o: LinearOperator([[1.0]], "id"),
                                 GaussianPrior(np.zeros(1), np.eye(1)), ProcessNoise([[0.25]]),
                                 LikelihoodSpec(1.0), 3, 300, 9, meta={"case": "toy"})
        a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
        run().write_ndjson(a, dump_particles=True)
        run().write_ndjson(b, dump_particles=True)
        assert a.read_bytes() == b.read_bytes()
        back = FilterTrace.read_ndjson(a)
        assert back.meta["case"] == "toy" and len(back.records) == 15 and len(back.snapshots) == 5
        first = back.records[0]
        assert set(first) >= {"iter", "t", "ess", "mean"}

    def test_every_step_resampling_keeps_full_ess_records(self):
        obs = kalman_toy(0.25, 1.0, 4)
        trace = run_filter(obs, lambda o: LinearOperator([[1.0]]), GaussianPrior(np.zeros(1), np.eye(1)),
                           ProcessNoise([[0.25]]), LikelihoodSpec(1.0), 2, 200, 0, resample="every")
        assert len(trace.snapshots) == 4
        with pytest.raises(InvalidConfig):
            run_filter(obs, lambda o: LinearOperator([[1.0]]), GaussianPrior(np.zeros(1), np.eye(1)),
                       ProcessNoise([[0.25]]), LikelihoodSpec(1.0), 2, 200, 0, resample="sometimes")
