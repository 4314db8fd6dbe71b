import numpy as np
import pytest

from plasmaseg.data_io import SyntheticSceneSpec, generate_synthetic_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_records():
    """Eight 64x64 synthetic scenes with three cells each."""
    return [
        generate_synthetic_scene(
            SyntheticSceneSpec(image_side=64, n_cells=3, nucleus_radius=(4.0, 6.0), rng_seed=s),
            sample_id=f"s{s}",
        )
        for s in range(8)
    ]


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report(request):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""
    details = {}
    yield details
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    line = f"criterion {details.get('id', '?')}: {'PASS' if ok else 'FAIL'}  {details.get('summary', '')}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
