import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfg1d import Coupling, DensitySlice, GridSpec, HamiltonianModel, TerminalCost

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def cosine_density(n_x, amp):
    x = np.arange(n_x) / n_x
    return DensitySlice.normalized(1.0 + amp * np.cos(2 * np.pi * x))


@pytest.fixture
def quad():
    """H = p^2/2 - m."""
    return HamiltonianModel.separated_power(2.0, Coupling())


@pytest.fixture
def congestion():
    return HamiltonianModel.congestion(1.0, 0.1, Coupling())


@pytest.fixture
def linear_cost():
    return TerminalCost()


@pytest.fixture
def grid32():
    return GridSpec(32, 32, 1.0)


BUILTIN_MODELS = {
    "quad": HamiltonianModel.separated_power(2.0, Coupling()),
    "power1.5_log": HamiltonianModel.separated_power(1.5, Coupling("log")),
    "power3_sq": HamiltonianModel.separated_power(3.0, Coupling("power", 1.0, 0.0, 2.0)),
    "congestion": HamiltonianModel.congestion(1.0, 0.1, Coupling()),
    "congestion_half": HamiltonianModel.congestion(0.5, 0.0, Coupling()),
}


# acceptance criteria append (number, passed, detail); printed after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}")
