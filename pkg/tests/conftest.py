import os

import pytest
from hypothesis import HealthCheck, settings

from searchlab.config import DESK_TRACKS, desk_arch, default_hp
from searchlab.data import load_track

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def smiles_track():
    return load_track(DESK_TRACKS["smiles_like"], seed=0, n_synthetic=400)


@pytest.fixture(scope="session")
def protein_track():
    return load_track(DESK_TRACKS["protein_like"], seed=0, n_synthetic=400)


@pytest.fixture(scope="session")
def tiny_base(smiles_track):
    arch = desk_arch(smiles_track.track)
    return arch, default_hp(smiles_track.track)


# -- acceptance summary: one PASS/FAIL line per criterion --------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, text = marker.args
    prev = _CRITERIA.get(n, (text, "PASS"))[1]
    status = "PASS" if rep.passed and prev == "PASS" else "FAIL"
    _CRITERIA[n] = (text, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        text, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")
