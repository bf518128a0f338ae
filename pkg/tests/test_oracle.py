import numpy as np
import pytest

from choicectl.errors import CompatibilityError, ConsistencyError
from choicectl.model import LinearSystem, Scenario, TargetTensor, independent_constraint_count
from choicectl.openloop import agent_gramians, synthesize
from choicectl.oracle import (
    arbitration_report,
    constraint_system,
    discretized_control_oracle,
    kkt_solve,
    penalized_solve,
    stationarity_check,
    tangent_basis,
)

from conftest import DI_A, DI_B, random_scenario, rendezvous, scalar_two_agent, scenario_suite

HALF = [[10.0, 0.0], [0.0, 0.0]]


def test_zero_problem():
    sc = rendezvous(e0=0.0, targets=[[0.0, 0.0], [0.0, 0.0]])
    sol = kkt_solve(sc)
    assert np.all(sol.z == 0.0) and sol.objective == 0.0


def test_two_choice_scalar_reference():
    sol = kkt_solve(scalar_two_agent([[1, 0], [0, -1]]))
    assert sol.objective == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(sol.z, [0.5, -0.5, 0.5, -0.5], atol=1e-12)


def test_kkt_agrees_with_synthesis_and_meets_residual_contract():
    for sc in scenario_suite(seed=31, count=40):
        sol = kkt_solve(sc)
        law = synthesize(sc)
        ref = law.stacked()
        assert np.linalg.norm(sol.z - ref) <= 1e-8 * np.linalg.norm(ref)
        assert sol.objective == pytest.approx(law.average_cost(), rel=1e-10)
        E, h = constraint_system(sc)
        scale = np.linalg.norm(E, np.inf) * np.max(np.abs(sol.z)) + np.max(np.abs(h))
        assert sol.constraint_residual <= 1e-9 * scale
        assert sol.stationarity_residual <= 1e-8 * max(1.0, np.max(np.abs(sol.multipliers)))


def test_kkt_minimum_against_feasible_perturbations():
    rng = np.random.default_rng(17)
    sc = random_scenario(rng, max_L=3)
    while sc.system.L < 2:
        sc = random_scenario(rng, max_L=3)
    sol = kkt_solve(sc)
    grams = agent_gramians(sc)
    basis = tangent_basis(sc, grams)
    law = synthesize(sc)
    for _ in range(100):
        d = basis @ rng.standard_normal(basis.shape[1])
        d *= rng.uniform(0, 1) / np.linalg.norm(d)
        z = sol.z + d
        params, k = [], 0
        for N, W in zip(sc.targets.dims, grams):
            params.append(z[k:k + N * W.shape[0]].reshape(N, -1))
            k += N * W.shape[0]
        cost = sum(np.einsum("in,nm,im->", p, W, p) / p.shape[0] for p, W in zip(params, grams))
        assert cost >= sol.objective - 1e-12 * max(1.0, sol.objective)
    assert law.average_cost() == pytest.approx(sol.objective, rel=1e-10)


@pytest.mark.parametrize("which", ["tuples", "generators"])
def test_constraint_rank(which):
    for sc in scenario_suite(seed=4, count=15):
        E, _ = constraint_system(sc, which=which)
        rank = np.linalg.matrix_rank(E, tol=1e-10 * np.linalg.norm(E, 2))
        assert rank == independent_constraint_count(sc.targets.dims) * sc.system.n


def test_kkt_errors():
    with pytest.raises(CompatibilityError):
        kkt_solve(rendezvous(targets=[[5, 0], [0, 0]]))
    sc = rendezvous()
    grams = agent_gramians(sc)
    with pytest.raises(ConsistencyError):
        kkt_solve(sc, grams=[grams[0], np.zeros((2, 2))])


def test_penalized_small_and_large_weights():
    sc = rendezvous(targets=HALF)
    tiny = penalized_solve(sc, 1e-9)
    assert max(np.max(np.abs(p)) for p in tiny.params) < 1e-6
    comp = rendezvous()
    big = penalized_solve(comp, 1e6)
    np.testing.assert_allclose(big.terminal_states, comp.targets.entries, atol=1e-3)
    half = penalized_solve(sc, 1e6)
    np.testing.assert_allclose(half.terminal_states[..., 0], [[7.5, 2.5], [2.5, -2.5]], atol=1e-2)


def test_penalized_sweep_is_monotone():
    for sc in (rendezvous(targets=HALF), scalar_two_agent([[1, 0], [0, -1]])):
        prev_err, prev_energy = np.inf, -np.inf
        for f in 10.0 ** np.arange(-1, 7):
            sol = penalized_solve(sc, f)
            err = sol.terminal_error / f  # the stored term carries the weight
            assert err <= prev_err * (1 + 1e-9)
            assert sol.control_energy >= prev_energy * (1 - 1e-9)
            prev_err, prev_energy = err, sol.control_energy


def test_penalized_converges_to_kkt_at_rate_one_over_f():
    sc = rendezvous()
    ref = kkt_solve(sc).z
    gaps = []
    for f in (1e2, 1e3, 1e4, 1e5):
        z = np.concatenate([p.ravel() for p in penalized_solve(sc, f).params])
        gaps.append(np.linalg.norm(z - ref))
    for a, b in zip(gaps, gaps[1:]):
        assert 8.0 < a / b < 12.0


def test_stationarity_check():
    sc = rendezvous()
    law = synthesize(sc)
    assert stationarity_check(law, sc) < 1e-7
    direction = tangent_basis(sc, law.gramians)[:, 0]
    moved = law.stacked() + 1e-2 * direction / np.linalg.norm(direction)
    shifted = type(law)(law.system, law.t0, law.T, [moved[:4].reshape(2, 2), moved[4:].reshape(2, 2)],
                        law.gramians)
    assert stationarity_check(shifted, sc) > 1e-4
    single = Scenario(LinearSystem(DI_A, (DI_B,)), 0.0, 1.0, [1.0, 0.0], TargetTensor(np.array([[3.0, 0.0]])))
    assert stationarity_check(synthesize(single), single) < 1e-7


def test_discretized_oracle_within_one_percent():
    # twenty constant pieces resolve the optimal controls when the horizon is short
    # relative to the system's time constants and every agent is well controllable
    suite = [sc for sc in scenario_suite(seed=12, count=30, max_n=3)
             if np.linalg.norm(sc.system.A, 2) * (sc.T - sc.t0) <= 1.5
             and max(np.linalg.cond(W) for W in agent_gramians(sc)) < 1e4]
    assert len(suite) >= 10
    for sc in [rendezvous(), scalar_two_agent([[1, 0], [0, -1]])] + suite:
        exact = synthesize(sc).average_cost()
        coarse = discretized_control_oracle(sc, segments=20)
        assert exact * (1 - 1e-9) <= coarse <= exact * 1.01


def test_discretized_oracle_converges_on_fast_dynamics():
    sc = scenario_suite(seed=12, count=5, max_n=3)[1]
    exact = synthesize(sc).average_cost()
    gaps = [discretized_control_oracle(sc, segments=s) / exact - 1 for s in (20, 40, 80)]
    assert gaps[0] > 0.01
    assert gaps[0] > gaps[1] > gaps[2] > 0 and gaps[2] < 2e-3


def test_arbitration_report():
    rows, text = arbitration_report(rendezvous(e0=10.0, h=5.0), f=1e3)
    assert set(rows) == {"product", "as_printed"}
    assert rows["product"]["objective"] < rows["as_printed"]["objective"]
    assert rows["product"]["param_deviation"] < 1e-9
    assert "lower-cost mode: product" in text
    # for a normal system matrix the two readings coincide
    A = np.array([[-0.2, 1.0], [-1.0, -0.2]])
    sc = rendezvous(targets=HALF).replace(system=LinearSystem(A, (DI_B, -DI_B)))
    rows, _ = arbitration_report(sc, f=10.0)
    assert rows["product"]["objective"] == pytest.approx(rows["as_printed"]["objective"], rel=1e-10)
