import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trajsim.geo import Trajectory  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def random_walk(rng: np.random.Generator, n: int, step: float = 50.0, tid: str = "t") -> Trajectory:
    steps = rng.normal(0, step, size=(n, 2))
    return Trajectory(tid, np.cumsum(steps, axis=0) + 1000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def walk(rng):
    return lambda n, **kw: random_walk(rng, n, **kw)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        tr.write_line(f"[ACCEPTANCE {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
    passed = sum(ok for ok, _ in ACCEPTANCE.values())
    tr.write_line(f"{passed}/{len(ACCEPTANCE)} acceptance criteria passed")
