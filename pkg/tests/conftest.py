import numpy as np
import pytest

from syncstego import covmodel, devpipe, lattice

MODEL_SEED = 20240611


def pytest_configure(config):
    config._acceptance = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = getattr(config, "_acceptance", [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n, name, ok, detail in sorted(rows, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}  ({detail})")


class Recorder:
    def __init__(self, config):
        self.rows = config._acceptance

    def __call__(self, n, name, ok, detail=""):
        self.rows.append((n, name, bool(ok), detail))
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}  ({detail})")
        assert ok, f"criterion {n} failed: {detail}"


@pytest.fixture
def criterion(request):
    return Recorder(request.config)


@pytest.fixture(scope="session")
def tables():
    return lattice.load_neighbor_tables()


@pytest.fixture(scope="session")
def estimated_corr():
    return covmodel.estimate_correlation(200, size=64, seed=MODEL_SEED)


@pytest.fixture(scope="session")
def estimated_model(estimated_corr):
    return covmodel.sparsify(estimated_corr, covmodel.DEFAULT_THRESHOLD)


@pytest.fixture(scope="session")
def cover64():
    return devpipe.make_cover(64, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
