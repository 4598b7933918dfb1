import numpy as np
import pytest

from varreg.grid import GridDesc, ScalarField, VectorField


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ramp(dims, axis=0):
    """Image equal to its index coordinate along ``axis``."""
    return ScalarField(np.indices(dims, dtype=np.float64)[axis])


def constant_field(dims, vec):
    vals = np.stack([np.full(dims, float(c)) for c in vec])
    return VectorField(vals, GridDesc(dims))


def smooth_image(rng, dims, sigma=1.5):
    from scipy.ndimage import gaussian_filter

    img = gaussian_filter(rng.random(dims), sigma)
    return (img - img.min()) / (img.max() - img.min())


ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append((name, ok, detail))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
