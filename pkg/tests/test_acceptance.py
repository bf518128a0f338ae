"""Acceptance criteria 1-11, each checked at its stated tolerance.

Every criterion records one ``criterion N: PASS|FAIL`` line (printed in the
pytest terminal summary, or directly when this file is run as a script) and
then asserts all of its clauses.
"""

import itertools
import time

import numpy as np
import pytest

from choicectl.approach import ApproachLaw, predict_terminal_large_f
from choicectl.cli import DEMOS, noisy_comparison
from choicectl.feedback import FeedbackLaw
from choicectl.model import LinearSystem, TargetTensor, compatibility_residual, is_compatible
from choicectl.numerics import gramian, mat_exp
from choicectl.openloop import regulatory_cost, single_choice_cost, synthesize, two_agent_scalar_law
from choicectl.oracle import kkt_solve
from choicectl.sim import run_ensemble, simulate, terminal_refined_grid

from conftest import ACCEPTANCE_LINES, random_system, rendezvous, scalar_two_agent, scenario_suite
from test_model import quadruple_violation

SWEEP = tuple(10.0 ** k for k in range(-1, 7))
SUITE_SEED = 2024


def record(number, clauses):
    """``clauses`` maps a description to ``(ok, detail)``."""
    ok = all(c[0] for c in clauses.values())
    parts = [f"{name} {'ok' if c[0] else 'FAILED'} ({c[1]})" for name, c in clauses.items()]
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}; " + "; ".join(parts)
    ACCEPTANCE_LINES[number] = line
    print(line)
    failed = [name for name, c in clauses.items() if not c[0]]
    assert not failed, line


def _suite():
    return scenario_suite(seed=SUITE_SEED, count=100)


def test_criterion_01_compatibility_verdicts():
    mats = {"[[5,0],[0,-5]]": [[5, 0], [0, -5]], "[[10,0],[0,-10]]": [[10, 0], [0, -10]],
            "[[5,0],[0,0]]": [[5, 0], [0, 0]]}
    tensors = {k: TargetTensor.scalar(v) for k, v in mats.items()}
    best = np.inf
    for _ in range(5):
        start = time.perf_counter()
        residuals = [compatibility_residual(H) for H in tensors.values()]
        verdicts = [is_compatible(H) for H in tensors.values()]
        best = min(best, time.perf_counter() - start)
    record(1, {
        "residuals 0/0/5": (residuals == [0.0, 0.0, 5.0], f"got {residuals}"),
        "verdicts": (verdicts == [True, True, False], f"got {verdicts}"),
        "runtime < 10 ms": (best < 0.01, f"{best * 1e3:.3f} ms"),
    })


def test_criterion_02_rendezvous_reproduction():
    start = time.perf_counter()
    sc = rendezvous()
    law = synthesize(sc)
    rep = run_ensemble(sc, law.controller, steps=2000)
    elapsed = time.perf_counter() - start
    worst_e = max(abs(tr.terminal_state[0] - sc.targets[k][0]) for k, tr in rep.trajectories.items())
    worst_v = max(abs(tr.terminal_state[1]) for tr in rep.trajectories.values())
    ts = np.linspace(0.0, 1.0, 1001)
    dev = max(abs(law.control_value(0, 0, t)[0] - (15 - 30 * t)) for t in ts)
    record(2, {
        "|e(T)-h_ij| < 1e-6": (worst_e < 1e-6, f"{worst_e:.2e}"),
        "|e'(T)| < 1e-6": (worst_v < 1e-6, f"{worst_v:.2e}"),
        "u(t) = 15 - 30t within 1e-9": (dev < 1e-9, f"{dev:.2e}"),
        "runtime < 1 s": (elapsed < 1.0, f"{elapsed:.3f} s"),
    })


def test_criterion_03_wide_start_rendezvous():
    sc = rendezvous(e0=10.0, h=5.0)
    rep = run_ensemble(sc, synthesize(sc).controller, steps=2000)
    e = [rep.trajectories[k].terminal_state[0] for k in sc.targets.tuples()]
    dev = float(np.max(np.abs(np.array(e) - [5, 0, 0, -5])))
    record(3, {"terminal e {5,0,0,-5} within 1e-6": (dev < 1e-6, f"max deviation {dev:.2e}")})


def test_criterion_04_closed_forms():
    reg_general = synthesize(scalar_two_agent(np.zeros((2, 2)), x0=1.0)).average_cost()
    reg_closed = regulatory_cost(0.0, [1.0, 1.0], 1.0, 1.0)
    law = synthesize(scalar_two_agent([[1, 0], [0, -1]]))
    controls, cost = two_agent_scalar_law([[1, 0], [0, -1]], 0.0, 1.0)
    general = [law.params[0][0, 0], law.params[0][1, 0], law.params[1][0, 0], law.params[1][1, 0]]
    single_general = synthesize(scalar_two_agent([[3.0]], x0=1.0, T=2.0, b=(1.0, 2.0))).average_cost()
    single_closed = single_choice_cost(3.0, 1.0, 1.0, 2.0, 2.0)
    d1 = abs(reg_general - reg_closed) + abs(reg_closed - 0.5)
    d2 = max(np.max(np.abs(np.array(general) - controls)), abs(law.average_cost() - cost), abs(cost - 0.5))
    d3 = abs(single_general - single_closed)
    record(4, {
        "regulatory cost 0.5": (d1 < 1e-10, f"{d1:.1e}"),
        "two-choice controls and cost 0.5": (d2 < 1e-10, f"{d2:.1e}"),
        "single-target cost": (d3 < 1e-10, f"{d3:.1e}"),
    })


def test_criterion_05_oracle_equivalence():
    start = time.perf_counter()
    worst_p = worst_o = 0.0
    stable = unstable = 0
    for sc in _suite():
        law = synthesize(sc)
        kkt = kkt_solve(sc)
        z = law.stacked()
        worst_p = max(worst_p, np.linalg.norm(z - kkt.z) / np.linalg.norm(kkt.z))
        worst_o = max(worst_o, abs(law.average_cost() - kkt.objective) / abs(kkt.objective))
        if np.max(np.linalg.eigvals(sc.system.A).real) < 0:
            stable += 1
        else:
            unstable += 1
    elapsed = time.perf_counter() - start
    record(5, {
        "params within 1e-8": (worst_p < 1e-8, f"worst {worst_p:.2e}"),
        "objectives within 1e-10": (worst_o < 1e-10, f"worst {worst_o:.2e}"),
        "stable and unstable A": (stable > 0 and unstable > 0, f"{stable} stable, {unstable} unstable"),
        "runtime < 30 s": (elapsed < 30.0, f"{elapsed:.2f} s"),
    })


def test_criterion_06_pivot_invariance():
    worst = 0.0
    for sc in _suite():
        ref = synthesize(sc, pivot=0).stacked()
        for p in range(1, sc.system.L):
            worst = max(worst, np.linalg.norm(synthesize(sc, pivot=p).stacked() - ref) / np.linalg.norm(ref))
    record(6, {"all pivots within 1e-9": (worst < 1e-9, f"worst {worst:.2e}")})


def _choice_and_sequential(H, x0):
    choice = synthesize(scalar_two_agent(H, x0=x0)).average_cost()
    sequential = np.mean([synthesize(scalar_two_agent([[h]], x0=x0)).average_cost() for h in np.ravel(H)])
    return choice, sequential


def test_criterion_07_sequential_cost_bound():
    rng = np.random.default_rng(77)
    violations, mismatched = 0, 0
    cases = []
    for k in range(100):
        x0 = float(rng.normal())
        if k % 10 == 0:
            c = float(rng.normal(scale=3))
            H = np.full((2, 2), c)  # the only compatible tensors meeting the equality condition
        else:
            a, b, c = rng.normal(scale=3, size=3)
            H = np.array([[a, b], [c, b + c - a]])
        cases.append((H, x0))
    for H, x0 in cases:
        choice, sequential = _choice_and_sequential(H, x0)
        tol = 1e-10 * max(1.0, choice)
        if sequential > choice + tol:
            violations += 1
        d = H - x0
        condition = abs(2 * d[0, 1] * d[1, 0] - d[0, 0] ** 2 - d[1, 1] ** 2) <= 1e-9 * max(1.0, np.max(d * d))
        equal = abs(choice - sequential) <= tol
        if condition != equal:
            mismatched += 1
    record(7, {
        "sequential <= choice-based": (violations == 0, f"{violations} violations in 100"),
        "equality exactly on the stated condition": (mismatched == 0, f"{mismatched} mismatches"),
    })


def _approach_errors(sc, f, steps=1000):
    law = ApproachLaw.from_scenario(sc, f=f)
    rep = run_ensemble(sc, law.controller, grid=terminal_refined_grid(sc.t0, sc.T, steps, stiffness=f))
    return rep, float(np.mean([np.sum(tr.terminal_error ** 2) for tr in rep.trajectories.values()]))


@pytest.mark.slow
def test_criterion_08_large_penalty_convergence():
    scenarios = {"rendezvous": rendezvous(), "scalar": scalar_two_agent([[1, 0], [0, -1]])}
    monotone, final = {}, {}
    for name, sc in scenarios.items():
        errs = [_approach_errors(sc, f)[1] for f in SWEEP]
        monotone[name] = all(b <= a * (1 + 1e-6) + 1e-12 for a, b in zip(errs, errs[1:]))
        bound = 1e-3 * (1 + np.linalg.norm(sc.targets.entries))
        final[name] = (errs[-1], bound)
    orders = {}
    for name, sc in scenarios.items():
        fb = FeedbackLaw.from_scenario(sc)
        B = sc.system.inputs[0]
        grid = np.linspace(sc.t0, sc.T - 0.05 * (sc.T - sc.t0), 20)
        gaps = []
        for f in SWEEP:
            law = ApproachLaw.from_scenario(sc, f=f)
            gaps.append(max(np.linalg.norm(law.approach_gains(t)[0] - B.T @ fb.gain_K(t))
                            / np.linalg.norm(B.T @ fb.gain_K(t)) for t in grid))
        orders[name] = np.log10(gaps[-2] / gaps[-1])
    worst_k = 0.0
    for f in SWEEP:
        law = ApproachLaw.from_scenario(scalar_two_agent([[1, 0], [0, -1]]), f=f)
        for t in np.linspace(0.0, 1.0, 11):
            want = f / (1 + 2 * f * (1.0 - t))
            worst_k = max(worst_k, abs(law.approach_gains(t)[0][0, 0] - want) / want)
    record(8, {
        "mean squared terminal error non-increasing in f": (all(monotone.values()), str(monotone)),
        "error < 1e-3(1+|H|) at f=1e6": (all(e < b for e, b in final.values()),
                                          ", ".join(f"{k} {e:.3g} vs {b:.3g}" for k, (e, b) in final.items())),
        "gain gap order ~1 over the last decade": (all(0.8 <= o <= 1.2 for o in orders.values()),
                                                   ", ".join(f"{k} {o:.2f}" for k, o in orders.items())),
        "scalar gain f/(1+2f(T-t)) within 1e-10": (worst_k < 1e-10, f"{worst_k:.1e}"),
    })


@pytest.mark.slow
def test_criterion_09_terminal_predictions():
    sc = rendezvous(targets=[[10.0, 0.0], [0.0, 0.0]])
    rep, _ = _approach_errors(sc, 1e6, steps=2000)
    e = {k: tr.terminal_state[0] for k, tr in rep.trajectories.items()}
    dev = max(abs(e[k] - predict_terminal_large_f(sc.targets, *k)[0]) for k in e)
    total = sum(tr.terminal_state for tr in rep.trajectories.values())
    target_sum = sc.targets.entries.sum(axis=(0, 1))
    rel = np.linalg.norm(total - target_sum) / np.linalg.norm(target_sum)
    shown = ", ".join(f"{v:.4f}" for v in e.values())
    record(9, {
        "per-pair e(T) within 1e-2 of {7.5,2.5,2.5,-2.5}": (dev < 1e-2, f"got {{{shown}}}, worst {dev:.3f}"),
        "sum relative error < 1e-3": (rel < 1e-3, f"{rel:.2e}"),
    })


@pytest.mark.slow
def test_criterion_10_hybrid_benefit():
    noisy = DEMOS["rendezvous_noisy"]()
    rows = noisy_comparison(noisy, seeds=range(50))
    table = np.array([r[1:] for r in rows])
    med = np.median(table, axis=0)
    again = noisy_comparison(noisy, seeds=range(3))
    identical = all(a == b for a, b in zip(again, rows[:3]))
    law = synthesize(noisy)
    a = run_ensemble(noisy, law.controller, noise=noisy.noise, steps=500)
    b = run_ensemble(noisy, law.controller, noise=noisy.noise, steps=500)
    identical &= all(np.array_equal(a.trajectories[k].states, b.trajectories[k].states) for k in a.trajectories)
    record(10, {
        "median terminal error hybrid < open loop": (med[2] < med[0], f"{med[2]:.4g} vs {med[0]:.4g}"),
        "median measured cost hybrid < open loop": (med[3] < med[1], f"{med[3]:.6g} vs {med[1]:.6g}"),
        "bit-identical reruns": (identical, "3 seeds rerun plus trajectory arrays"),
    })


def test_criterion_11_numerical_hygiene():
    rng = np.random.default_rng(111)
    worst_sym, worst_psd = 0.0, 0.0
    for _ in range(50):
        n = int(rng.integers(1, 5))
        system = random_system(rng, n, 1, unstable=bool(rng.integers(0, 2)))
        for method in ("quadrature", "augmented"):
            W = gramian(system.A, system.inputs[0], 0.0, float(rng.uniform(0.1, 2.0)), method=method).value
            worst_sym = max(worst_sym, np.max(np.abs(W - W.T)) / np.max(np.abs(W)))
            worst_psd = max(worst_psd, -np.min(np.linalg.eigvalsh(W)) / np.max(np.abs(W)))

    base = rendezvous()
    sc = base.replace(system=LinearSystem(np.array([[0.1, 1.0], [-2.0, -0.3]]), base.system.inputs))
    law = synthesize(sc)
    A = sc.system.A
    z = sc.x0 + sum(gramian(A, B, 0.0, 1.0).value @ law.params[l][c]
                    for l, (B, c) in enumerate(zip(sc.system.inputs, (0, 1))))
    exact = mat_exp(A, 1.0) @ z
    errs = [np.max(np.abs(simulate(sc, law.controller((0, 1)), (0, 1), steps=s).terminal_state - exact))
            for s in (10, 20, 40, 80)]
    orders = [np.log2(a / b) for a, b in zip(errs, errs[1:])]

    mismatches, checked = 0, 0
    for _ in range(200):
        L = int(rng.integers(1, 5))
        dims = tuple(int(d) for d in rng.integers(1, 4, size=L))
        while np.prod(dims) > 81:
            dims = dims[:-1]
        n = int(rng.integers(1, 3))
        if rng.integers(0, 2):
            parts = [rng.integers(-3, 4, size=(d, n)).astype(float) for d in dims]
            H = np.zeros(dims + (n,))
            for tup in itertools.product(*(range(d) for d in dims)):
                H[tup] = sum(parts[l][c] for l, c in enumerate(tup))
        else:
            H = rng.integers(-3, 4, size=dims + (n,)).astype(float)
        T = TargetTensor(H)
        if is_compatible(T) != (quadruple_violation(T) == 0.0):
            mismatches += 1
        checked += 1
    record(11, {
        "Gramian symmetric": (worst_sym < 1e-12, f"{worst_sym:.1e}"),
        "Gramian PSD": (worst_psd < 1e-12, f"{worst_psd:.1e}"),
        "RK4 order 4": (all(3.7 < o < 4.3 for o in orders), ", ".join(f"{o:.2f}" for o in orders)),
        "quadruple oracle agreement": (mismatches == 0, f"{mismatches} mismatches in {checked} tensors"),
    })


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
