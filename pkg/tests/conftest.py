import numpy as np
import pytest

from octsplat.core import Camera
from octsplat.scenes import random_camera, random_scene  # noqa: F401  (shared with the test modules)


def front_camera(size=32, focal=None):
    return Camera.look_at([0, 0, -3.0], [0, 0, 0], focal=focal or 1.3 * size, width=size, height=size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report
# test_acceptance.py records one line per criterion; the lines are printed after the run.

ACCEPTANCE_NAMES = {
    1: "contribution pass equals leave-one-out",
    2: "rasterizer gradients vs finite differences",
    3: "score-function gradient vs enumeration",
    4: "difference reward lowers estimator variance",
    5: "octree laws",
    6: "assignment equals brute force",
    7: "reward pathway gain at low budget",
    8: "PSNR non-decreasing in budget",
    9: "reordered tokens train better",
    10: "reruns are byte-identical",
}
_acceptance: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report():
    def record(criterion: int, passed: bool, detail: str) -> bool:
        _acceptance[criterion] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for k, name in ACCEPTANCE_NAMES.items():
        if k in _acceptance:
            ok, detail = _acceptance[k]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {name}: {detail}")
        else:
            terminalreporter.write_line(f"[----] {k:2d}. {name}: not run or errored before reporting")
