import numpy as np
import pytest

from fedser.model import ArchConfig


def central_difference(loss, arrays: dict, step: float = 1e-5) -> dict:
    """Numerical gradient of ``loss(arrays)`` w.r.t. every entry of every array."""
    out = {}
    for name, a in arrays.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + step
            up = loss(arrays)
            a[idx] = orig - step
            down = loss(arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2 * step)
        out[name] = g
    return out


def max_rel_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor) over all arrays."""
    worst = 0.0
    for name in numeric:
        a, n = analytic[name], numeric[name]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max()))
    return worst


@pytest.fixture
def mini_arch():
    """Two-block float64 miniature used for gradient checks."""
    return ArchConfig(
        channels=(4, 8), groups=2, temporal_kernel=3, spectral_kernel=5,
        attention_kernel=3, dropout=0.1, dtype="float64",
    )


@pytest.fixture
def tiny_arch():
    """Small float64 four-block config for fast training tests."""
    return ArchConfig(channels=(4, 4, 8, 8), groups=2, dtype="float64", dropout=0.0)


# criterion number -> (title, passed); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
