import numpy as np
import pytest
import torch

from hbgs.geometry import DTYPE, CameraPose, Intrinsics, axis_angle_to_quat


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intr8():
    return Intrinsics(fx=10.0, fy=10.0, cx=3.5, cy=3.5, width=8, height=8)


def random_pose(rng, max_angle=np.pi) -> CameraPose:
    q = axis_angle_to_quat(rng.normal(size=3), float(rng.uniform(0, max_angle)))
    return CameraPose(q, torch.from_numpy(rng.normal(size=3)).to(DTYPE))


ACCEPTANCE = []  # (criterion, passed, line) filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
