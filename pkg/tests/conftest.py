"""Shared fixtures and the acceptance-criteria summary hook."""

import numpy as np
import pytest

from cbctnet import ConeBeamGeometry, VolumeGrid, equiangular_angles


def pytest_configure(config):
    config._criterion_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def criterion(pytestconfig):
    """Records one PASS/FAIL line per acceptance criterion.

    The line is printed immediately (visible with -s) and repeated in the
    terminal summary so a plain ``pytest -v`` run always shows the verdicts.
    """

    def log(num: int, passed: bool, detail: str) -> None:
        line = f"CRITERION {num}: {'PASS' if passed else 'FAIL'} - {detail}"
        pytestconfig._criterion_lines.append((num, line))
        print(line)

    return log


@pytest.fixture
def small_geom():
    # matches the CLI "small" adjoint preset: fast enough for every test
    return ConeBeamGeometry(60.0, 120.0, 6, 8, 2.5, equiangular_angles(4))


@pytest.fixture
def small_grid():
    return VolumeGrid(8, 8, 8, 2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
