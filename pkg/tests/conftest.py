import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dmtnet.data import default_domains, gen_domain  # noqa: E402
from dmtnet.episodes import meta_train  # noqa: E402
from dmtnet.model import DMTNet  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def domains():
    src, poly, ring = default_domains()
    return {
        "train": gen_domain(src, 200, seed=0),
        "held": gen_domain(src, 80, seed=1),
        "target": gen_domain(poly, 80, seed=2),
        "ring": gen_domain(ring, 80, seed=3),
    }


@pytest.fixture(scope="session")
def trained(domains):
    """Default model after the 500-episode smoke run on the source domain (seed 0)."""
    model = DMTNet(seed=0)
    model, optim, tlog = meta_train(model, domains["train"], 500, seed=0, log_every=0)
    return model, optim, tlog


@pytest.fixture(scope="session")
def short_trained(domains):
    model = DMTNet(seed=0)
    model, _, _ = meta_train(model, domains["train"], 60, seed=0, log_every=0)
    return model


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if acceptance_report.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_report.RESULTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
