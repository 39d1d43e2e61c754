import pytest

from gaitplan.certify import certify_library
from gaitplan.primitives import MeshSpec, fit_library, synth_library


@pytest.fixture(scope="session")
def lib3():
    return synth_library([0, -45, 45], degrees=True)


@pytest.fixture(scope="session")
def cert3(lib3):
    return certify_library(lib3)


@pytest.fixture(scope="session")
def cert3_avg(lib3):
    return certify_library(lib3, mode="average", n0=2)


@pytest.fixture(scope="session")
def approx3(lib3, cert3):
    return fit_library(lib3, MeshSpec.for_library(lib3), cert=cert3)


@pytest.fixture(scope="session")
def lib1():
    return synth_library([0])


@pytest.fixture(scope="session")
def cert1(lib1):
    return certify_library(lib1)


@pytest.fixture(scope="session")
def envs100():
    """100 seeded 50 x 50 environments (30 obstacles, 40 % occupancy) with
    their extracted corridors, drawn from the same streams as ``batch``."""
    from gaitplan.cli import ENV_STREAM, named_seed
    from gaitplan.errors import NoPath
    from gaitplan.workspace import extract_corridor, random_environment

    out = []
    for s in range(100):
        ws = random_environment(named_seed(0, ENV_STREAM, 30, s), 30, 0.40)
        try:
            cor = extract_corridor(ws, s)
        except NoPath:
            cor = None
        out.append((s, ws, cor))
    return out


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
