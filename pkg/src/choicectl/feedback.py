"""State-feedback form of the target-achieving law for two agents, and the hybrid controller.

The feedback law re-solves the open-loop problem from the current time and
state and applies its first instant:

    u_i(t) = -B^T K(t) x + L_ui(t),   v_j(t) = -C^T K(t) x + L_vj(t)
    K(t)   = e^{-A^T t} (Wb(t) + Wc(t))^{-1} e^{-A t}

with ``Wb(t)``, ``Wc(t)`` the backward Gramians over the remaining horizon
``[t, T]``. The gains blow up as ``t -> T``, so evaluation closer than
``horizon_eps * (T - t0)`` to the end raises :class:`HorizonGuardError`.
:class:`HybridController` avoids the singularity by switching to a freshly
synthesized open-loop family at a switch time ``T' < T``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ConfigurationError, DomainError, HorizonGuardError
from .model import Scenario, TargetTensor, generator_set
from .numerics import gramian, mat_exp, solve_linear
from .openloop import require_compatible, synthesize

HORIZON_EPS = 1e-6
DEFAULT_SWITCH_FRACTION = 0.6


class FeedbackLaw:
    """Target-achieving feedback for a two-agent system with compatible targets."""

    def __init__(self, system, t0, T, targets: TargetTensor, horizon_eps=HORIZON_EPS,
                 gramian_method="augmented"):
        if system.L != 2:
            raise ConfigurationError(f"feedback synthesis is defined for two agents, got {system.L}")
        require_compatible(targets)
        self.system = system
        self.t0 = float(t0)
        self.T = float(T)
        self.targets = targets
        self.horizon_eps = horizon_eps
        self.gramian_method = gramian_method
        g = generator_set(targets)
        self._u_gen = g.entries(0)  # H[i, 0]
        self._v_gen = g.entries(1)  # H[0, j]
        self._base = g.base
        self._eT = mat_exp(-system.A, self.T)
        self._cache = {}

    @classmethod
    def from_scenario(cls, scenario: Scenario, **kw) -> "FeedbackLaw":
        return cls(scenario.system, scenario.t0, scenario.T, scenario.targets, **kw)

    @property
    def dims(self):
        return self.targets.dims

    def _guard(self, t):
        span = self.T - self.t0
        if t < self.t0 - 1e-12 * span or t > self.T:
            raise DomainError(f"t={t} outside horizon [{self.t0}, {self.T}]")
        if self.T - t < self.horizon_eps * span:
            raise HorizonGuardError(
                f"feedback gain requested at t={t}, within {self.horizon_eps:g} of the horizon end "
                "(use a hybrid controller)"
            )

    def remaining_gramians(self, t):
        B, C = self.system.inputs
        A = self.system.A
        WB = gramian(A, B, t, self.T, method=self.gramian_method).value
        WC = gramian(A, C, t, self.T, method=self.gramian_method).value
        return WB, WC

    def _evaluate(self, t):
        t = float(t)
        hit = self._cache.get(t)
        if hit is not None:
            return hit
        self._guard(t)
        A = self.system.A
        B, C = self.system.inputs
        n = self.system.n
        I = np.eye(n)
        WB, WC = self.remaining_gramians(t)
        eAt = mat_exp(-A, t)
        K = eAt.T @ solve_linear(WB + WC, eAt)
        eT = self._eT
        u_gen = self._u_gen @ eT.T
        v_gen = self._v_gen @ eT.T
        base = eT @ self._base
        # agent u: Wb^{-1} e^{-AT} H_i1 + (I + Wc^{-1} Wb)^{-1} (Wc^{-1} e^{-AT} mean_j(H_1j - H_11) - Wb^{-1} e^{-AT} mean_k H_k1)
        inner_u = solve_linear(WC, v_gen.mean(axis=0) - base) - solve_linear(WB, u_gen.mean(axis=0))
        shared_u = solve_linear(I + solve_linear(WC, WB), inner_u)
        par_u = solve_linear(WB, u_gen.T).T + shared_u[None, :]
        inner_v = solve_linear(WB, u_gen.mean(axis=0) - base) - solve_linear(WC, v_gen.mean(axis=0))
        shared_v = solve_linear(I + solve_linear(WB, WC), inner_v)
        par_v = solve_linear(WC, v_gen.T).T + shared_v[None, :]
        out = (K, par_u @ (B.T @ eAt.T).T, par_v @ (C.T @ eAt.T).T)
        if len(self._cache) < 100_000:
            self._cache[t] = out
        return out

    def gain_K(self, t) -> np.ndarray:
        return self._evaluate(t)[0]

    def offsets(self, i, j, t):
        _, Lu, Lv = self._evaluate(t)
        return Lu[i], Lv[j]

    def feedback_control(self, i, j, t, x):
        K, Lu, Lv = self._evaluate(t)
        B, C = self.system.inputs
        Kx = K @ np.asarray(x, dtype=float)
        return [-B.T @ Kx + Lu[i], -C.T @ Kx + Lv[j]]

    def controller(self, choices):
        return FeedbackController(self, tuple(choices))


class FeedbackController:
    """Pure feedback for one choice pair; fails near the horizon end by design."""

    def __init__(self, law: FeedbackLaw, choices):
        self.law = law
        self.choices = choices

    def controls(self, t, x):
        i, j = self.choices
        return self.law.feedback_control(i, j, t, x)


class HybridController:
    """Feedback until the switch time, then open loop synthesized from the measured state.

    One instance per simulation run: the switch is a one-way mode change
    triggered by :meth:`begin_step`.
    """

    def __init__(self, scenario: Scenario, choices, law: Optional[FeedbackLaw] = None,
                 switch_time: Optional[float] = None):
        if switch_time is None:
            switch_time = scenario.switch_time
        if switch_time is None:
            raise ConfigurationError("hybrid control needs a switch time")
        self.scenario = scenario
        self.choices = tuple(choices)
        self.switch_time = float(switch_time)
        self.law = law if law is not None else FeedbackLaw.from_scenario(scenario)
        self.mode = "feedback"
        self.switched_at = None
        self.tail = None

    def begin_step(self, t, x, step=0.0):
        if self.mode == "feedback" and t >= self.switch_time - 0.5 * step:
            tail_scenario = self.scenario.replace(t0=t, x0=np.array(x, dtype=float),
                                                  switch_time=None, noise=None)
            self.tail = synthesize(tail_scenario)
            self.mode = "open_loop"
            self.switched_at = t

    def controls(self, t, x):
        if self.mode == "feedback":
            i, j = self.choices
            return self.law.feedback_control(i, j, t, x)
        return self.tail.controls(self.choices, t)


def default_switch_time(scenario: Scenario) -> float:
    return scenario.t0 + DEFAULT_SWITCH_FRACTION * (scenario.T - scenario.t0)


def make_hybrid(scenario: Scenario, i: int, j: int, law: Optional[FeedbackLaw] = None) -> HybridController:
    """Hybrid controller for choice pair ``(i, j)`` using the scenario's switch time."""
    if scenario.switch_time is None:
        raise ConfigurationError("scenario has no switch_time; hybrid control needs one")
    return HybridController(scenario, (i, j), law)
