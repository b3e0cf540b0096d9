import numpy as np
import pytest

from cloudseg.core import LabelGrid, PixelGrid
from cloudseg.harness import synth_dataset

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Call as ``acceptance(number, title, ok, detail)``; the line is printed
    immediately and repeated in the terminal summary.
    """
    def record(number, title, ok, detail=""):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        print(line)
        request.config.stash[_ACCEPTANCE].append(line)
        return ok

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def separated_images():
    """Eight 60x80 images whose class means are 5 sigma apart on every channel."""
    return synth_dataset(11, 8, shape=(60, 80), separation=5.0).images


@pytest.fixture(scope="session")
def small_images():
    """Four 16x20 images with moderate overlap, for quick fits."""
    return synth_dataset(3, 4, shape=(16, 20), separation=2.0, smoothness=2.5).images


def make_grid(values, channels=("T", "H")):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[..., None]
    return PixelGrid(values, tuple(channels[: values.shape[2]]))


def make_labels(values):
    return LabelGrid(np.asarray(values, dtype=np.int8))
