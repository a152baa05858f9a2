import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from charflow import FlowOptions, build_full_param, build_minimal_param, extend_param
from charflow.gallery import gallery

settings.register_profile("charflow", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("charflow")

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for the terminal summary, then assert."""

    def record(label: str, ok: bool, detail: str):
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def _order(line):
    num, sub = re.match(r"criterion (\d+)(\w*)", line).groups()
    return int(num), sub


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=_order):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ex1():
    return gallery("ex1")


@pytest.fixture(scope="session")
def ex1_full(ex1):
    return build_full_param(ex1.phi, ex1.domain, 64)


@pytest.fixture(scope="session")
def appendix_extension():
    """appendixA2 minimal family, extended to depth 2 and then resumed to depth 5."""
    g = gallery("appendixA2")
    opts = FlowOptions(h=2.0 ** -10, eps0=1e-3, eps_levels=2)
    p = build_minimal_param(g.phi, g.domain, 2048, opts, include_terminal=True)
    q2 = extend_param(p, 2)
    q5 = extend_param(q2, 5, start=3)
    return p, q2, q5


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
