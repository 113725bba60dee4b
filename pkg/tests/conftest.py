import numpy as np
import pytest

from srkmax.spatial import Grid1D, Grid2DTM, build_maxwell_1d, build_maxwell_2d_tm, build_spectral_hamiltonian


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def op1d():
    return build_maxwell_1d(Grid1D(16, L=1.0, eps=2.0, mu=0.5))


@pytest.fixture
def op2d():
    return build_maxwell_2d_tm(Grid2DTM(5, 4, 0.2, 0.25, eps=1.5, mu=2.0))[0]


@pytest.fixture
def opspec():
    return build_spectral_hamiltonian(6, L=1.0, eps=1.0, mu=2.0)


@pytest.fixture(params=["1d", "2d", "spectral"])
def any_op(request, op1d, op2d, opspec):
    return {"1d": op1d, "2d": op2d, "spectral": opspec}[request.param]


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion and assert it."""

    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
