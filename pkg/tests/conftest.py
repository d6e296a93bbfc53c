import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vecfield.chem import Molecule

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def methane() -> Molecule:
    d = 1.09 / np.sqrt(3.0)
    pos = [[0, 0, 0], [d, d, d], [d, -d, -d], [-d, d, -d], [-d, -d, d]]
    return Molecule(["C", "H", "H", "H", "H"], pos)


@pytest.fixture
def water() -> Molecule:
    ang = np.radians(104.5)
    return Molecule(["O", "H", "H"], [[0, 0, 0], [0.96, 0, 0], [0.96 * np.cos(ang), 0.96 * np.sin(ang), 0]])


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        name, passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}")
