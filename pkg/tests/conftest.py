import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tfpacc.synth import WorldParams, bundle_from_world, generate_world

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def world():
    return generate_world(WorldParams(seed=3))


@pytest.fixture(scope="session")
def bundle(world):
    return bundle_from_world(world)


@pytest.fixture(scope="session")
def noiseless_world():
    return generate_world(WorldParams(noise=0.0, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and (rep.when == "call" or outcome != "passed"):
                lines[props["criterion"]] = (outcome, props.get("detail", ""))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    tag = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for key in sorted(lines, key=lambda k: int(k.split()[0][1:])):
        outcome, detail = lines[key]
        terminalreporter.write_line(f"{tag[outcome]}  {key}" + (f"  [{detail}]" if detail else ""))
