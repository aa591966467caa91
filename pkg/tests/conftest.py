import numpy as np
import pytest

from vtseg.synthetic import SyntheticSpec, generate_synthetic_clip


@pytest.fixture(scope="session")
def short_clip():
    return generate_synthetic_clip(SyntheticSpec(seed=5, T=24))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(n, ok, detail):
        lines.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
