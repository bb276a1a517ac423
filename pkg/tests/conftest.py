import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from plumetrace.domain import Domain, PointSensor, SensorLayout, WindSample, WindSeries
from plumetrace.flow import FlowConfig
from plumetrace.transport import SolverSetup, TransportConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def meandering_wind(duration=300.0, speed=2.0, amplitude=8.0, period=200.0, every=10.0):
    ts = np.arange(0.0, duration + every, every)
    return WindSeries(tuple(
        WindSample(float(t), speed, float(270.0 + amplitude * np.sin(2 * np.pi * t / period))) for t in ts
    ))


@pytest.fixture(scope="session")
def smooth_setup():
    """Open 100 m square, 32x32 cells, gently meandering westerly wind."""
    domain = Domain(100.0, 100.0, 32, 32)
    layout = SensorLayout(tuple(PointSensor(90.0, float(y)) for y in np.linspace(20.0, 80.0, 8)))
    return SolverSetup(domain, meandering_wind(), layout, FlowConfig(dt=0.5),
                       TransportConfig(diffusivity=2.0, dt=0.5))


@pytest.fixture
def tiny_setup():
    """Very coarse scene for fast solver round-trips."""
    domain = Domain(40.0, 40.0, 10, 10)
    layout = SensorLayout((PointSensor(34.0, 14.0), PointSensor(34.0, 26.0), PointSensor(6.0, 20.0)))
    wind = WindSeries((WindSample(0.0, 2.0, 270.0), WindSample(400.0, 2.0, 270.0)))
    return SolverSetup(domain, wind, layout, FlowConfig(dt=1.0), TransportConfig(diffusivity=1.0, dt=1.0))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Records one PASS/FAIL line per acceptance criterion for the summary."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
