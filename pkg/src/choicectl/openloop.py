"""Minimum-average-energy open-loop controls for compatible target tensors.

Every optimal control has the form ``u_l^i(t) = B_l^T e^{-A^T t} P_l^i`` with one
parameter vector per agent and choice. With ``W_l`` the backward Gramian over
``[t0, T]`` the terminal condition for choice tuple ``(i_1, ..., i_L)`` reads

    e^{-A T} H[i_1, ..., i_L] - e^{-A t0} x0 = sum_l W_l P_l^{i_l}

and the average cost is ``sum_l (1/N_l) sum_i (P_l^i)^T W_l P_l^i``.

Only the generator entries need to be enforced. Choosing a pivot agent, the
first-choice parameters of the other agents solve one block linear system
(``omega @ y = theta``); every other parameter then follows in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import CompatibilityError, ControllabilityError, DomainError, SingularityError
from .model import Scenario, TargetTensor, compatibility_residual, default_tolerance, generator_set
from .numerics import CONTROLLABILITY_TOL, SPDFactor, average_energy, gramian, mat_exp, solve_linear

REFINEMENT_PASSES = 2


@dataclass(frozen=True)
class SynthesisSystem:
    """Block system for the free first-choice parameters of the non-pivot agents."""

    omega: np.ndarray
    theta: np.ndarray
    pivot: int


class OpenLoopLaw:
    """A family of open-loop controls, one parameter vector per (agent, choice).

    ``params[l]`` has shape ``(N_l, n)``; ``gramians[l]`` is ``W_l`` over the
    law's horizon.
    """

    def __init__(self, system, t0, T, params, gramians, pivot=None):
        self.system = system
        self.t0 = float(t0)
        self.T = float(T)
        self.params = tuple(np.asarray(p, dtype=float) for p in params)
        self.gramians = tuple(np.asarray(W, dtype=float) for W in gramians)
        self.pivot = pivot
        for p in self.params:
            p.setflags(write=False)
        self._adjoint = {}

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(p.shape[0] for p in self.params)

    def stacked(self) -> np.ndarray:
        """All parameter vectors, agent-major then choice-major."""
        return np.concatenate([p.ravel() for p in self.params])

    def _adjoint_exp(self, t):
        E = self._adjoint.get(t)
        if E is None:
            E = mat_exp(-self.system.A.T, t)
            if len(self._adjoint) < 100_000:
                self._adjoint[t] = E
        return E

    def control_value(self, agent: int, choice: int, t: float) -> np.ndarray:
        t = float(t)
        span = self.T - self.t0
        if t < self.t0 - 1e-12 * span or t > self.T + 1e-12 * span:
            raise DomainError(f"t={t} outside horizon [{self.t0}, {self.T}]")
        B = self.system.inputs[agent]
        return B.T @ (self._adjoint_exp(t) @ self.params[agent][choice])

    def controls(self, choices: Sequence[int], t: float) -> list[np.ndarray]:
        return [self.control_value(l, c, t) for l, c in enumerate(choices)]

    def controller(self, choices: Sequence[int]) -> "OpenLoopController":
        return OpenLoopController(self, tuple(choices))

    def average_cost(self) -> float:
        return average_energy(self.params, self.gramians)

    def terminal_state(self, x0, choices: Sequence[int]) -> np.ndarray:
        """Noise-free terminal state from ``x0`` at ``t0`` under the given choices."""
        A = self.system.A
        z = mat_exp(-A, self.t0) @ np.asarray(x0, dtype=float)
        for l, c in enumerate(choices):
            z = z + self.gramians[l] @ self.params[l][c]
        return mat_exp(A, self.T) @ z


class OpenLoopController:
    """Adapter that plays one choice tuple of an open-loop family; ignores the state."""

    def __init__(self, law: OpenLoopLaw, choices):
        self.law = law
        self.choices = choices

    def controls(self, t, x):
        return self.law.controls(self.choices, t)


def agent_gramians(scenario: Scenario, tol=CONTROLLABILITY_TOL) -> list[np.ndarray]:
    """Backward Gramians of every agent over the scenario horizon.

    Raises :class:`ControllabilityError` when an agent cannot steer the plant
    on its own.
    """
    out = []
    for l, B in enumerate(scenario.system.inputs):
        W = gramian(scenario.system.A, B, scenario.t0, scenario.T)
        eig = np.linalg.eigvalsh(W.value)
        if not (eig[-1] > 0.0 and eig[0] > tol * eig[-1]):
            raise ControllabilityError(
                f"agent {l} cannot control the system alone over [{scenario.t0}, {scenario.T}] "
                f"(Gramian condition ~ {W.condition_estimate:.3g})",
                agent=l,
                condition=W.condition_estimate,
            )
        out.append(W.value)
    return out


def require_compatible(targets: TargetTensor, tol=None):
    residual = compatibility_residual(targets)
    if tol is None:
        tol = default_tolerance(targets)
    if residual > tol:
        raise CompatibilityError(
            f"target tensor is incompatible (residual {residual:.6g} > {tol:.3g}); "
            "no communication-free open-loop family realizes it",
            residual=residual,
        )
    return residual


def generator_rhs(scenario: Scenario) -> list[np.ndarray]:
    """Right-hand sides ``e^{-AT} H - e^{-A t0} x0`` of the generator constraints, per agent.

    Row ``c`` of entry ``l`` belongs to the tuple where only agent ``l``
    deviates from choice 0 (row 0 is the base tuple for every agent).
    """
    A = scenario.system.A
    g = generator_set(scenario.targets)
    eT = mat_exp(-A, scenario.T)
    start = mat_exp(-A, scenario.t0) @ scenario.x0
    return [g.entries(l) @ eT.T - start for l in range(scenario.system.L)]


def _assemble(R, pivot, grams, factors, shift=None) -> SynthesisSystem:
    L = len(R)
    n = R[0].shape[1]
    others = [l for l in range(L) if l != pivot]
    m = len(others)
    base = R[0][0]
    pivot_term = factors[pivot].solve(R[pivot].mean(axis=0))
    omega = np.zeros((m * n, m * n))
    theta = np.zeros(m * n)
    for r, l in enumerate(others):
        theta[r * n:(r + 1) * n] = factors[l].solve(base - R[l].mean(axis=0)) + pivot_term
        if shift is not None:
            theta[r * n:(r + 1) * n] += shift[l]
        for c, k in enumerate(others):
            block = factors[pivot].solve(grams[k])
            if r == c:
                block = block + np.eye(n)
            omega[r * n:(r + 1) * n, c * n:(c + 1) * n] = block
    return SynthesisSystem(omega, theta, pivot)


def synthesis_system(scenario: Scenario, pivot: int, grams, factors=None) -> SynthesisSystem:
    """Assemble the block system for the free parameters (pivot agent eliminated)."""
    if factors is None:
        factors = [SPDFactor(W) for W in grams]
    return _assemble(generator_rhs(scenario), pivot, grams, factors)


def _solve_generators(R, pivot, grams, factors, shift=None):
    # rows of omega @ y = theta say mean_i P_l^i - mean_i P_pivot^i = shift[l] (zero at the optimum)
    L = len(R)
    n = R[0].shape[1]
    sysm = _assemble(R, pivot, grams, factors, shift)
    others = [l for l in range(L) if l != pivot]
    first = {}
    if others:
        try:
            y = solve_linear(sysm.omega, sysm.theta)
        except SingularityError as exc:
            raise SingularityError(f"synthesis matrix is singular: {exc}", exc.condition) from exc
        first = {l: y[r * n:(r + 1) * n] for r, l in enumerate(others)}
    params = [None] * L
    coupling = sum((grams[k] @ first[k] for k in others), np.zeros(n))
    base = R[0][0]
    for l in others:
        params[l] = factors[l].solve((R[l] - base).T).T + first[l]
    params[pivot] = factors[pivot].solve((R[pivot] - coupling).T).T
    return params


def _generator_residual(R, params, grams):
    # accumulated in extended precision so the correction pass can gain accuracy
    ext = np.longdouble
    P = [np.asarray(p, dtype=ext) for p in params]
    W = [np.asarray(w, dtype=ext) for w in grams]
    firsts = [w @ p[0] for w, p in zip(W, P)]
    shared = sum(firsts)
    return [(np.asarray(R[l], dtype=ext) - (P[l] @ W[l].T + (shared - firsts[l]))).astype(float)
            for l in range(len(R))]


def _mean_residual(params, pivot):
    ext = np.longdouble
    means = [np.asarray(p, dtype=ext).mean(axis=0) for p in params]
    return {l: (means[pivot] - m).astype(float) for l, m in enumerate(means) if l != pivot}


def synthesize(scenario: Scenario, pivot: Optional[int] = None, tol=None) -> OpenLoopLaw:
    """Optimal target-achieving open-loop family for a compatible scenario.

    ``pivot`` selects the agent whose first-choice parameter is eliminated
    (default: the last agent); the optimum does not depend on it. Two
    refinement passes re-solve for the residuals of the generator
    constraints and of the equal-mean optimality condition, both accumulated
    in extended precision; this matters when a Gramian is badly conditioned.
    """
    system = scenario.system
    L = system.L
    if pivot is None:
        pivot = L - 1
    if not 0 <= pivot < L:
        raise DomainError(f"pivot {pivot} is not an agent index")
    require_compatible(scenario.targets, tol)
    grams = agent_gramians(scenario)
    factors = [SPDFactor(W) for W in grams]
    R = generator_rhs(scenario)
    params = _solve_generators(R, pivot, grams, factors)
    for _ in range(REFINEMENT_PASSES):
        delta = _solve_generators(_generator_residual(R, params, grams), pivot, grams, factors,
                                  _mean_residual(params, pivot))
        params = [P + dP for P, dP in zip(params, delta)]
    return OpenLoopLaw(system, scenario.t0, scenario.T, params, grams, pivot)


# ----------------------------------------------------------------- scalar closed forms

def regulatory_cost(a: float, b_list, x0: float, T: float) -> float:
    """Minimum average cost of returning a scalar plant to the origin (all targets zero).

    Horizon ``[0, T]``; continuous at ``a = 0``.
    """
    sb2 = float(np.sum(np.square(b_list)))
    if sb2 <= 0.0 or T <= 0.0:
        raise DomainError("need sum(b^2) > 0 and T > 0")
    aT = a * T
    if abs(aT) < 1e-8:
        # series of 2aT / (1 - e^{-2aT})
        factor = 1.0 + aT + aT * aT / 3.0
    else:
        factor = 2.0 * aT / -math.expm1(-2.0 * aT)
    return factor * x0 * x0 / (T * sb2)


def two_agent_scalar_law(H, x0: float, T: float):
    """Closed-form controls for two agents with two choices each (a = 0, b = 1, t0 = 0).

    Returns ``((u1_1, u1_2, u2_1, u2_2), cost)``; the controls are constants.
    Agreement with the general synthesis for compatible ``H`` is checked in
    the test suite.
    """
    if T <= 0.0:
        raise DomainError("T must be positive")
    H = np.asarray(H, dtype=float)
    h11, h12, h21, h22 = H[0, 0], H[0, 1], H[1, 0], H[1, 1]
    k = 1.0 / (4.0 * T)
    controls = (
        k * (2 * h11 + h12 - h21 - 2 * x0),
        k * (2 * h22 + h21 - h12 - 2 * x0),
        k * (2 * h11 - h12 + h21 - 2 * x0),
        k * (2 * h22 + h12 - h21 - 2 * x0),
    )
    cost = k * ((h11 - x0) ** 2 + (h22 - x0) ** 2 + 0.5 * (h21 - h12) ** 2)
    return controls, cost


def single_choice_cost(H_entries, x0: float, b1: float, b2: float, T: float) -> float:
    """Average cost of reaching each target separately with two cooperating agents (a = 0).

    A scalar ``H_entries`` gives the single-target cost; an array gives the
    average over its entries reached one after another.
    """
    denom = (b1 * b1 + b2 * b2) * T
    if denom <= 0.0:
        raise DomainError("need T > 0 and b1^2 + b2^2 > 0")
    d = np.asarray(H_entries, dtype=float) - x0
    return float(np.mean(d * d) / denom)

