import numpy as np
import pytest

from physiopref.oracle import LatticeOracle
from physiopref.policy import PolicyConfig, PolicyModel


@pytest.fixture(scope="session")
def oracle():
    # no cache file: tests must never touch the user's PHYSIOPREF_CACHE
    return LatticeOracle(cache_path="")


def tiny_policy(L=5, arch="ngram", seed=0, scale=0.5, **kw):
    cfg = PolicyConfig(L=L, arch=arch, k=kw.pop("k", 2), hidden=kw.pop("hidden", 6), embed=kw.pop("embed", 3),
                       d_model=kw.pop("d_model", 4), heads=kw.pop("heads", 2), init_scale=scale, seed=seed, **kw)
    return PolicyModel(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
