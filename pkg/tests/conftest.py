from __future__ import annotations

import numpy as np
import pytest

from genpunet.autodiff.tensor import Tape, Tensor

_criteria: list[tuple[str, str, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria.append((marker.args[0], "PASS" if report.passed else "FAIL", report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, duration in _criteria:
        terminalreporter.write_line(f"{verdict}  {name}  ({duration:.1f}s)")


# -- shared numeric helpers --------------------------------------------------------------

def numeric_grad(f, x: np.ndarray, step: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f(array)`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(x.shape)


def tape_grad(f, x: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(f(Tensor))`` recorded on a tape."""
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        out = f(t)
        tape.backward(out.sum() if out.size != 1 else out)
    return t.grad


def rel_error(auto, fd, floor: float = 1e-6) -> float:
    auto = np.asarray(auto, dtype=np.float64).ravel()
    fd = np.asarray(fd, dtype=np.float64).ravel()
    return float(np.max(np.abs(auto - fd) / np.maximum(np.abs(fd), floor)))


def check_grad(f, x: np.ndarray, step: float = 1e-5) -> float:
    """Relative error between the tape gradient and central differences of ``f``."""
    auto = tape_grad(f, x)

    def scalar(arr):
        return float(np.sum(f(Tensor(arr, dtype=np.float64)).data))

    return rel_error(auto, numeric_grad(scalar, x, step))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
