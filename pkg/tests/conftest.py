import numpy as np
import pytest

from memseg.config import ModelConfig


def central_difference(f, arr: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return out


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(num_classes=4, channels=(4, 6, 8, 8), embed_dim=8, ppm_dim=4, dtype="float64")


def pytest_terminal_summary(terminalreporter):
    from report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
