"""Target-approaching feedback for arbitrary (possibly incompatible) two-agent targets.

The law minimizes average control energy plus ``f`` times the mean squared
terminal error. At time ``t`` and state ``x`` it re-solves that problem over
``[t, T]`` and applies the first instant:

    u_i = -K_u(t) x + L_ui(t),   v_j = -K_v(t) x + L_vj(t)

The constant terminal core ``E`` has two readings: ``"product"`` uses
``e^{-AT} e^{-A^T T}`` (what the penalized minimization actually produces) and
``"as_printed"`` uses ``e^{-(A + A^T) T}``. They coincide for normal ``A``.
:func:`choicectl.oracle.arbitration_report` compares both against a direct
minimization.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DomainError, HorizonGuardError
from .model import Scenario, TargetTensor
from .numerics import gramian, mat_exp, solve_linear

CORE_MODES = ("product", "as_printed")
OFFSET_MODES = ("uniform", "as_printed")
DEFAULT_PENALTY = 1e3
HORIZON_EPS = 1e-6


def terminal_core(A, T, mode="product") -> np.ndarray:
    if mode == "product":
        M = mat_exp(-A, T)
        return M @ M.T
    if mode == "as_printed":
        return mat_exp(-(A + A.T), T)
    raise ValueError(f"unknown core mode {mode!r}; expected one of {CORE_MODES}")


class ApproachLaw:
    """Penalized feedback law for two agents with inputs ``B`` and ``C``."""

    def __init__(self, system, t0, T, targets: TargetTensor, f, core_mode="product",
                 offset_mode="uniform", gramian_method="augmented"):
        if system.L != 2:
            raise ConfigurationError(f"penalized feedback is defined for two agents, got {system.L}")
        if not f > 0.0:
            raise DomainError(f"penalty weight must be positive, got {f}")
        if offset_mode not in OFFSET_MODES:
            raise ValueError(f"unknown offset mode {offset_mode!r}")
        self.system = system
        self.t0 = float(t0)
        self.T = float(T)
        self.targets = targets
        self.f = float(f)
        self.core_mode = core_mode
        self.offset_mode = offset_mode
        self.gramian_method = gramian_method
        A = system.A
        self.core = terminal_core(A, self.T, core_mode)
        self._eT = mat_exp(-A, self.T)
        H = targets.entries
        self._row_sums = H.sum(axis=1)  # (N_u, n): sum over agent-v choices
        self._col_sums = H.sum(axis=0)  # (N_v, n)
        self._total = H.sum(axis=(0, 1))
        self._cache = {}

    @classmethod
    def from_scenario(cls, scenario: Scenario, f=None, **kw) -> "ApproachLaw":
        if f is None:
            f = scenario.penalty_weight if scenario.penalty_weight is not None else DEFAULT_PENALTY
        return cls(scenario.system, scenario.t0, scenario.T, scenario.targets, f, **kw)

    @property
    def dims(self):
        return self.targets.dims

    def remaining_gramians(self, t):
        t = float(t)
        n = self.system.n
        if t >= self.T:
            return np.zeros((n, n)), np.zeros((n, n))
        B, C = self.system.inputs
        A = self.system.A
        WB = gramian(A, B, t, self.T, method=self.gramian_method).value
        WC = gramian(A, C, t, self.T, method=self.gramian_method).value
        return WB, WC

    def _check_time(self, t):
        span = self.T - self.t0
        if t < self.t0 - 1e-12 * span or t > self.T + 1e-12 * span:
            raise DomainError(f"t={t} outside horizon [{self.t0}, {self.T}]")

    def _evaluate(self, t):
        t = float(t)
        hit = self._cache.get(t)
        if hit is not None:
            return hit
        self._check_time(t)
        A = self.system.A
        B, C = self.system.inputs
        f = self.f
        N_u, N_v = self.dims
        N = N_u * N_v
        n = self.system.n
        WB, WC = self.remaining_gramians(t)
        E = self.core
        eAt = mat_exp(-A, t)
        S = E + f * (WB + WC)
        GB = f * WB + E
        GC = f * WC + E
        I = np.eye(n)
        core_u = I - f * WC @ solve_linear(S, I)
        core_v = I - f * WB @ solve_linear(S, I)
        # feedback: p = -f GB^{-1} [core_u e^{-At} x + target terms]
        state_u = f * solve_linear(GB, core_u @ eAt)
        state_v = f * solve_linear(GC, core_v @ eAt)
        tgt_v = self._eT
        tgt_u = eAt if self.offset_mode == "as_printed" else self._eT
        common_u = (f / N) * WC @ solve_linear(S, tgt_u @ self._total)
        common_v = (f / N) * WB @ solve_linear(S, tgt_v @ self._total)
        brack_u = common_u[None, :] - (self._row_sums @ tgt_u.T) / N_v
        brack_v = common_v[None, :] - (self._col_sums @ tgt_v.T) / N_u
        off_u = -f * solve_linear(GB, brack_u.T).T  # (N_u, n) parameter offsets
        off_v = -f * solve_linear(GC, brack_v.T).T
        adj = eAt.T
        out = {
            "Ku": B.T @ adj @ state_u,
            "Kv": C.T @ adj @ state_v,
            "Lu": off_u @ (B.T @ adj).T,
            "Lv": off_v @ (C.T @ adj).T,
            "state_u": state_u,
            "state_v": state_v,
            "off_u": off_u,
            "off_v": off_v,
        }
        if len(self._cache) < 100_000:
            self._cache[t] = out
        return out

    def approach_gains(self, t):
        """``(K_u(t), K_v(t))``; finite on the whole closed horizon."""
        ev = self._evaluate(t)
        return ev["Ku"], ev["Kv"]

    def approach_offsets(self, i, j, t):
        ev = self._evaluate(t)
        return ev["Lu"][i], ev["Lv"][j]

    def parameters(self, t, x):
        """Parameter vectors ``(P, Q)`` of the re-solved problem from ``(t, x)``.

        The controls at time ``s >= t`` of that open-loop solution are
        ``B^T e^{-A^T s} P[i]`` and ``C^T e^{-A^T s} Q[j]``.
        """
        ev = self._evaluate(t)
        x = np.asarray(x, dtype=float)
        P = -(ev["state_u"] @ x)[None, :] + ev["off_u"]
        Q = -(ev["state_v"] @ x)[None, :] + ev["off_v"]
        return P, Q

    def control(self, i, j, t, x):
        ev = self._evaluate(t)
        x = np.asarray(x, dtype=float)
        return [-ev["Ku"] @ x + ev["Lu"][i], -ev["Kv"] @ x + ev["Lv"][j]]

    def limit_gains(self, t, horizon_eps=HORIZON_EPS):
        """Large-``f`` limit ``(K, L_u, L_v)``; ``L_u`` has one row per agent-u choice."""
        t = float(t)
        self._check_time(t)
        if self.T - t < horizon_eps * (self.T - self.t0):
            raise HorizonGuardError(f"limit gains requested within {horizon_eps:g} of the horizon end")
        A = self.system.A
        B, C = self.system.inputs
        N_u, N_v = self.dims
        N = N_u * N_v
        WB, WC = self.remaining_gramians(t)
        eAt = mat_exp(-A, t)
        Wsum = WB + WC
        K = eAt.T @ solve_linear(Wsum, eAt)
        tot = self._eT @ self._total
        br_u = (WC @ solve_linear(Wsum, tot))[None, :] / N - (self._row_sums @ self._eT.T) / N_v
        br_v = (WB @ solve_linear(Wsum, tot))[None, :] / N - (self._col_sums @ self._eT.T) / N_u
        Lu = -(B.T @ eAt.T @ solve_linear(WB, br_u.T)).T
        Lv = -(C.T @ eAt.T @ solve_linear(WC, br_v.T)).T
        return K, Lu, Lv

    def controller(self, choices):
        return ApproachController(self, tuple(choices))


class ApproachController:
    def __init__(self, law: ApproachLaw, choices):
        self.law = law
        self.choices = choices

    def controls(self, t, x):
        i, j = self.choices
        return self.law.control(i, j, t, x)


def predict_terminal_sum(scenario: Scenario, f, core_mode="product") -> np.ndarray:
    """Closed-form sum of the terminal states over all choice pairs under the penalized law."""
    A = scenario.system.A
    B, C = scenario.system.inputs
    H = scenario.targets
    N = H.entries.shape[0] * H.entries.shape[1]
    W = gramian(A, B, scenario.t0, scenario.T).value + gramian(A, C, scenario.t0, scenario.T).value
    E = terminal_core(A, scenario.T, core_mode)
    y = mat_exp(-A, scenario.t0) @ scenario.x0
    total = H.entries.sum(axis=(0, 1))
    rhs = N * y + f * W @ (mat_exp(A.T, scenario.T) @ total)
    return mat_exp(-A.T, scenario.T) @ solve_linear(E + f * W, rhs)


def predict_terminal_large_f(H: TargetTensor, i: int, j: int) -> np.ndarray:
    """Large-penalty terminal state for choice pair ``(i, j)``: row mean + column mean - grand mean."""
    E = H.entries
    return E[:, j].mean(axis=0) + E[i, :].mean(axis=0) - E.mean(axis=(0, 1))
