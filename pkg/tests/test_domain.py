import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plumetrace.domain import (
    BeamSensor,
    CaseStudyConfig,
    ConstantBackground,
    Domain,
    EmissionProfile,
    PointSensor,
    Rect,
    RollingQuantileBackground,
    Scenario,
    SensorLayout,
    Source,
    WindSample,
    WindSeries,
    background_at,
    build_case_study_scenario,
    dump_scenario,
    load_observation_csv,
    load_scenario,
    load_wind_csv,
    loads_scenario,
    save_scenario,
    wind_at,
    wind_components,
    wind_speed_direction,
    write_observation_csv,
)
from plumetrace.errors import (
    EmptySeries,
    EmptyWindow,
    InvalidConfig,
    MalformedRow,
    NonMonotonicTime,
)


def write(tmp_path, text, name="wind.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestWindCsv:
    def test_westerly_blows_toward_positive_x(self, tmp_path):
        s = load_wind_csv(write(tmp_path, "t,speed,direction_from\n0,2.0,270\n"))
        assert s.samples[0].u == pytest.approx(2.0, rel=1e-12)
        assert abs(s.samples[0].v) < 1e-12

    def test_calm_row(self, tmp_path):
        s = load_wind_csv(write(tmp_path, "t,speed,direction_from\n0,0.0,123\n"))
        assert s.samples[0].u == 0.0 and s.samples[0].v == 0.0

    def test_time_going_backwards(self, tmp_path):
        with pytest.raises(NonMonotonicTime):
            load_wind_csv(write(tmp_path, "t,speed,direction_from\n5,1,0\n3,1,0\n"))

    def test_malformed_row_reports_line(self, tmp_path):
        with pytest.raises(MalformedRow) as exc:
            load_wind_csv(write(tmp_path, "t,speed,direction_from\n0,1,0\n1,abc,0\n"))
        assert exc.value.line == 3

    def test_wrong_header(self, tmp_path):
        with pytest.raises(MalformedRow):
            load_wind_csv(write(tmp_path, "time,speed,dir\n0,1,0\n"))

    def test_empty(self, tmp_path):
        with pytest.raises(EmptySeries):
            load_wind_csv(write(tmp_path, ""))
        with pytest.raises(EmptySeries):
            load_wind_csv(write(tmp_path, "t,speed,direction_from\n"))


class TestWindInterpolation:
    def test_midpoint(self):
        s = WindSeries((WindSample.from_uv(0.0, 0.0, 0.0), WindSample.from_uv(10.0, 10.0, 0.0)))
        assert wind_at(s, 5.0).u == pytest.approx(5.0)

    def test_clamped_before_start(self):
        s = WindSeries((WindSample.from_uv(0.0, 3.0, 1.0), WindSample.from_uv(10.0, 10.0, 0.0)))
        w = wind_at(s, -1.0)
        assert (w.u, w.v) == pytest.approx((3.0, 1.0))

    def test_componentwise(self):
        s = WindSeries((WindSample.from_uv(0.0, 1.0, 0.0), WindSample.from_uv(10.0, 0.0, 1.0)))
        w = wind_at(s, 5.0)
        assert (w.u, w.v) == pytest.approx((0.5, 0.5))
        assert w.speed == pytest.approx(math.sqrt(0.5))


@pytest.mark.parametrize("deg", np.arange(0.0, 360.0, 1.0))
def test_wind_convention_round_trip(deg):
    u, v = wind_components(3.7, deg)
    speed, direction = wind_speed_direction(u, v)
    u2, v2 = wind_components(speed, direction)
    assert math.hypot(u2 - u, v2 - v) <= 1e-9 * 3.7
    assert math.hypot(u, v) == pytest.approx(3.7, rel=1e-9)


class TestDomain:
    def test_grid_minimum(self):
        with pytest.raises(InvalidConfig):
            Domain(10.0, 10.0, 3, 10)

    def test_wall_blocking_all_paths_rejected(self):
        with pytest.raises(InvalidConfig):
            Domain(10.0, 10.0, 10, 10, (Rect(4.0, 0.0, 6.0, 10.0),))

    def test_obstacle_mask(self):
        d = Domain(10.0, 10.0, 10, 10, (Rect(2.0, 2.0, 4.0, 4.0),))
        assert d.obstacle_mask.sum() == 4
        assert not d.is_fluid(3.0, 3.0) and d.is_fluid(7.0, 7.0)

    def test_beam_endpoints_must_differ(self):
        with pytest.raises(InvalidConfig):
            BeamSensor(1.0, 1.0, 1.0, 1.0, 4)

    def test_sensor_inside_obstacle_rejected(self):
        d = Domain(10.0, 10.0, 10, 10, (Rect(2.0, 2.0, 4.0, 4.0),))
        with pytest.raises(InvalidConfig):
            SensorLayout((PointSensor(3.0, 3.0),)).validate(d)


class TestBackground:
    def test_constant(self):
        got = background_at(ConstantBackground((1.9,) * 7), [], [], 0.0)
        assert got.tolist() == [1.9] * 7

    def test_median(self):
        m = RollingQuantileBackground(window_s=10.0, quantile=0.5)
        got = background_at(m, [0.0, 1.0, 2.0], np.array([[1.0], [2.0], [3.0]]), 2.0)
        assert got.tolist() == [2.0]

    def test_nearest_rank_low_quantile(self):
        vals = np.arange(1.0, 101.0)
        m = RollingQuantileBackground(window_s=1000.0, quantile=0.1)
        expected = sorted(vals)[math.ceil(0.1 * len(vals)) - 1]
        assert background_at(m, np.arange(100.0), vals[:, None], 99.0)[0] == expected == 10.0

    def test_empty_window(self):
        m = RollingQuantileBackground(window_s=5.0)
        with pytest.raises(EmptyWindow):
            background_at(m, [0.0, 1.0], np.ones((2, 1)), 100.0)


class TestEmissionProfile:
    def test_interpolates_and_holds(self):
        p = EmissionProfile(((0.0, 1.0), (10.0, 3.0)))
        assert p.rate_at(5.0) == pytest.approx(2.0)
        assert p.rate_at(50.0) == 3.0

    def test_mean_rate_exact_for_piecewise_linear(self):
        p = EmissionProfile(((0.0, 0.0), (10.0, 10.0), (20.0, 0.0)))
        assert p.mean_rate(0.0, 20.0) == pytest.approx(5.0)

    def test_rejects_negative(self):
        with pytest.raises(InvalidConfig):
            EmissionProfile(((0.0, -1.0),))


class TestCaseStudy:
    def test_deterministic_serialization(self):
        a = dump_scenario(build_case_study_scenario(CaseStudyConfig(), seed=7))
        b = dump_scenario(build_case_study_scenario(CaseStudyConfig(), seed=7))
        assert a == b

    @pytest.mark.parametrize("event", [1, 2, 3])
    def test_twenty_sensors_ten_minutes(self, event):
        sc = build_case_study_scenario(CaseStudyConfig(event=event), seed=0)
        assert len(sc.layout) == 20
        assert sc.duration == 600.0
        assert len(sc.sources) == 1
        assert 3 <= len(sc.domain.obstacles) <= 5

    def test_unknown_event(self):
        with pytest.raises(InvalidConfig):
            build_case_study_scenario(CaseStudyConfig(event=9), seed=0)

    def test_events_share_the_site(self):
        a = build_case_study_scenario(CaseStudyConfig(event=1), seed=3)
        b = build_case_study_scenario(CaseStudyConfig(event=2), seed=3)
        assert a.wind == b.wind and a.layout == b.layout and a.domain == b.domain


class TestScenarioFile:
    def test_round_trip_is_byte_identical(self, tmp_path):
        sc = build_case_study_scenario(CaseStudyConfig(event=2), seed=5)
        p = tmp_path / "s.toml"
        save_scenario(sc, p)
        again = load_scenario(p)
        assert dump_scenario(again) == p.read_text(encoding="utf-8")
        assert again == sc

    def test_unknown_key_rejected(self):
        text = dump_scenario(build_case_study_scenario(CaseStudyConfig(), seed=0))
        with pytest.raises(InvalidConfig):
            loads_scenario(text.replace("[domain]\n", "[domain]\ncolour = 1\n", 1))

    def test_duration_multiple_of_step(self):
        sc = build_case_study_scenario(CaseStudyConfig(), seed=0)
        with pytest.raises(InvalidConfig):
            Scenario(sc.domain, sc.wind, sc.layout, sc.background, sc.sources, 0.0, 0.7, 600.0, 0)


class TestObservationCsv:
    def test_round_trip(self, tmp_path):
        t = np.arange(1.0, 4.0)
        r = np.random.default_rng(0).random((3, 4))
        p = tmp_path / "o.csv"
        write_observation_csv(p, t, r)
        t2, r2 = load_observation_csv(p, 4)
        assert np.array_equal(t, t2) and np.array_equal(r, r2)

    def test_sensor_count_mismatch(self, tmp_path):
        p = tmp_path / "o.csv"
        write_observation_csv(p, [1.0], np.ones((1, 3)))
        with pytest.raises(MalformedRow):
            load_observation_csv(p, 4)

    def test_non_finite(self, tmp_path):
        p = write(tmp_path, "t,sensor_0\n1,nan\n", "o.csv")
        with pytest.raises(MalformedRow):
            load_observation_csv(p)


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=6))
def test_constant_profile_mean_is_itself(rates):
    for r in rates:
        assert EmissionProfile.constant(r).mean_rate(3.0, 17.0) == pytest.approx(r)


def test_source_outside_fluid_rejected():
    sc = build_case_study_scenario(CaseStudyConfig(), seed=0)
    r = sc.domain.obstacles[0]
    inside = Source(0.5 * (r.x0 + r.x1), 0.5 * (r.y0 + r.y1), EmissionProfile.constant(1.0))
    with pytest.raises(InvalidConfig):
        Scenario(sc.domain, sc.wind, sc.layout, sc.background, (inside,), 0.0, 0.5, 600.0, 0)
