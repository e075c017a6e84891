import numpy as np
import pytest

from usflab.distributions import GaussianSpec
from usflab.flows import build_flow, perturb_parameters
from usflab.numcore import RngStream


def random_flow(dim, n_blocks, kind, seed, scale=0.3, base=None, hidden_width=None, hidden_layers=2):
    """Identity-initialised flow pushed away from the identity by Gaussian noise."""
    s = RngStream(seed)
    m = build_flow(dim, n_blocks, kind, hidden_layers=hidden_layers, hidden_width=hidden_width,
                   base=base, stream=s)
    perturb_parameters(m, s, scale)
    return m


def half_base(dim, seed):
    return GaussianSpec(RngStream(seed).normal(dim), 0.5)


@pytest.fixture
def stream():
    return RngStream(1234)


def pytest_configure(config):
    np.set_printoptions(precision=12)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number, name, passed, detail):
    line = f"criterion {number:>2} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
