import logging

import numpy as np
import pytest

from hmhom.microstructure import Domain, generate_rsa, radius_for_fraction, unit_volume_ball_radius

logging.getLogger("hmhom").setLevel(logging.ERROR)


def ball_microstructure(n, phi=0.3, seed=1, kappa=100.0):
    """Equal spheres at volume fraction ``phi`` in the unit-volume ball."""
    dom = Domain("ball", unit_volume_ball_radius())
    return generate_rsa(dom, n, radius_for_fraction(dom, n, phi), seed=seed, kappa=kappa)


def periodic_microstructure(n, phi=0.2, seed=1, kappa=100.0, min_gap=0.02):
    dom = Domain("periodic-cube")
    return generate_rsa(dom, n, radius_for_fraction(dom, n, phi), seed=seed, kappa=kappa,
                        min_gap=min_gap)


@pytest.fixture(scope="session")
def ms200():
    return ball_microstructure(200)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


from hypothesis import HealthCheck, settings  # noqa: E402

# reproducible property runs: examples are derived from the test source, not a clock
settings.register_profile("fixed", derandomize=True, deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fixed")


# --- acceptance report: one line per criterion, printed after the run

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(number, ok, detail)`` records a verdict and returns ``ok``."""

    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
