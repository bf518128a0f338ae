import itertools

import numpy as np
import pytest

from choicectl.model import LinearSystem, Scenario, TargetTensor

DI_A = np.array([[0.0, 1.0], [0.0, 0.0]])
DI_B = np.array([[0.0], [1.0]])
DI_C = np.array([[0.0], [-1.0]])


def rendezvous(e0=5.0, h=10.0, targets=None, **kw) -> Scenario:
    """Relative motion of two double integrators: e'' = u - v."""
    if targets is None:
        targets = [[h, 0.0], [0.0, -h]]
    H = np.zeros((2, 2, 2))
    H[..., 0] = targets
    system = LinearSystem(DI_A, (DI_B, DI_C))
    return Scenario(system, 0.0, 1.0, np.array([e0, 0.0]), TargetTensor(H), **kw)


def scalar_two_agent(H, x0=0.0, T=1.0, a=0.0, b=(1.0, 1.0), **kw) -> Scenario:
    system = LinearSystem(np.array([[a]]), tuple(np.array([[bi]]) for bi in b))
    return Scenario(system, 0.0, T, np.array([x0]), TargetTensor.scalar(H), **kw)


def random_system(rng, n, L, unstable=False):
    A = rng.normal(scale=0.6, size=(n, n))
    if unstable:
        A += 0.8 * np.eye(n)
    else:
        A -= 0.8 * np.eye(n)
    inputs = tuple(rng.normal(size=(n, int(rng.integers(1, n + 1)))) for _ in range(L))
    return LinearSystem(A, inputs)


def random_compatible(rng, n, dims, scale=3.0):
    """Sum of per-agent contributions: compatible by construction."""
    parts = [rng.normal(scale=scale, size=(d, n)) for d in dims]
    H = np.zeros(tuple(dims) + (n,))
    for tup in itertools.product(*(range(d) for d in dims)):
        H[tup] = sum(parts[l][c] for l, c in enumerate(tup))
    return TargetTensor(H)


def random_scenario(rng, compatible=True, max_n=4, max_L=3, max_N=3, unstable=None, **kw):
    n = int(rng.integers(1, max_n + 1))
    L = int(rng.integers(1, max_L + 1))
    dims = tuple(int(d) for d in rng.integers(1, max_N + 1, size=L))
    if unstable is None:
        unstable = bool(rng.integers(0, 2))
    system = random_system(rng, n, L, unstable)
    if compatible:
        H = random_compatible(rng, n, dims)
    else:
        H = TargetTensor(rng.normal(scale=3.0, size=dims + (n,)))
    T = float(rng.uniform(0.6, 1.5))
    return Scenario(system, 0.0, T, rng.normal(size=n), H, **kw)


def scenario_suite(seed=2024, count=100, **kw):
    rng = np.random.default_rng(seed)
    return [random_scenario(rng, **kw) for _ in range(count)]


@pytest.fixture
def rendezvous_scenario():
    return rendezvous(switch_time=0.6)


# one line per acceptance criterion, filled in by test_acceptance and printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
