import numpy as np
import pytest

from cfcal.trajectory_data import Trajectory


def make_traj(x, dt=1.0, vid="A", y=None, t0=0.0, **kw):
    x = np.asarray(x, float)
    n = len(x)
    return Trajectory(vid, t0 + dt * np.arange(n), x, kw.pop("v", np.zeros(n)), kw.pop("a", np.zeros(n)),
                      y=y, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str):
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
