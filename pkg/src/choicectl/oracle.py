"""Independent brute-force checks for the synthesized control laws.

The oracles work directly on the finite-dimensional parametric family
``u_l^i(t) = B_l^T e^{-A^T t} P_l^i`` without any of the eliminations used by
the synthesis modules:

* :func:`kkt_solve` enforces the terminal constraint of *every* choice tuple,
  drops the redundant rows by SVD and solves the symmetric KKT system.
* :func:`penalized_solve` minimizes control energy plus the weighted terminal
  error as one positive definite quadratic.
* :func:`discretized_control_oracle` replaces the parametric family by
  piecewise-constant controls as a coarse sanity check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import CompatibilityError, ConsistencyError, SingularityError
from .model import Scenario, independent_constraint_count
from .numerics import average_energy, mat_exp
from .openloop import OpenLoopLaw, agent_gramians


@dataclass(frozen=True)
class KktSolution:
    z: np.ndarray
    multipliers: np.ndarray
    constraint_residual: float
    stationarity_residual: float
    objective: float
    params: tuple[np.ndarray, ...]
    rank: int


@dataclass(frozen=True)
class PenalizedSolution:
    params: tuple[np.ndarray, ...]
    objective: float
    control_energy: float
    terminal_error: float
    terminal_states: np.ndarray


def _offsets(dims, n):
    out = [0]
    for d in dims:
        out.append(out[-1] + d * n)
    return out


def constraint_system(scenario: Scenario, grams=None, which="tuples"):
    """Terminal constraints ``E z = h`` on the stacked parameters.

    ``which="tuples"`` emits one block row per choice tuple (redundant);
    ``which="generators"`` keeps only tuples with at most one non-zero index.
    """
    if grams is None:
        grams = agent_gramians(scenario)
    A = scenario.system.A
    n = scenario.system.n
    H = scenario.targets
    dims = H.dims
    off = _offsets(dims, n)
    eT = mat_exp(-A, scenario.T)
    start = mat_exp(-A, scenario.t0) @ scenario.x0
    rows, rhs = [], []
    for tup in H.tuples():
        if which == "generators" and sum(1 for c in tup if c) > 1:
            continue
        block = np.zeros((n, off[-1]))
        for l, c in enumerate(tup):
            block[:, off[l] + c * n: off[l] + (c + 1) * n] = grams[l]
        rows.append(block)
        rhs.append(eT @ H[tup] - start)
    return np.vstack(rows), np.concatenate(rhs)


def cost_matrix(dims, grams, dtype=float) -> np.ndarray:
    """Block-diagonal ``D`` with the average cost equal to ``z^T D z``."""
    m = sum(d * W.shape[0] for d, W in zip(dims, grams))
    D = np.zeros((m, m), dtype=dtype)
    k = 0
    for d, W in zip(dims, grams):
        block = np.asarray(W, dtype=dtype) / d
        for _ in range(d):
            D[k:k + W.shape[0], k:k + W.shape[0]] = block
            k += W.shape[0]
    return D


def _equality_qp(D, E, h, expected_rank=None, rtol=None):
    """Minimize ``z^T D z`` subject to ``E z = h`` with redundant rows allowed.

    The rank and the consistency of ``h`` come from an SVD of ``E``; the KKT
    system then keeps an independent subset of the original rows (chosen by
    pivoted QR), so no constraint is rounded by a change of basis. ``D`` may
    be given in extended precision; the refinement residuals use it as is.
    Returns ``(z, multipliers for every row of E, rank)``.
    """
    U, s, _ = np.linalg.svd(E, full_matrices=False)
    if rtol is None:
        # redundant rows sit at rounding level; a barely controllable agent can
        # still put genuine singular values near 1e-11
        rtol = 100 * np.finfo(float).eps * max(E.shape)
    rank = int(np.sum(s > rtol * s[0])) if s.size else 0
    if expected_rank is not None and rank != expected_rank:
        raise ConsistencyError(f"constraint matrix has rank {rank}, expected {expected_rank}")
    Ur = U[:, :rank]
    outside = h - Ur @ (Ur.T @ h)
    scale = max(1.0, float(np.max(np.abs(h))))
    # rounding in E tilts its left null space by about eps * s_max / s_rank
    spread = s[0] / s[rank - 1] if rank else 1.0
    if np.max(np.abs(outside), initial=0.0) > max(1e-9, 1e3 * np.finfo(float).eps * spread) * scale:
        raise CompatibilityError(
            "terminal constraints are inconsistent (targets not realizable)",
            residual=float(np.max(np.abs(outside))),
        )
    _, _, piv = scipy.linalg.qr(E.T, mode="economic", pivoting=True)
    keep = np.sort(piv[:rank])
    Er, hr = E[keep], h[keep]
    m = E.shape[1]
    ext = np.longdouble
    Ke = np.zeros((m + rank, m + rank), dtype=ext)
    Ke[:m, :m] = 2 * np.asarray(D, dtype=ext)
    Ke[:m, m:] = Er.T
    Ke[m:, :m] = Er
    rhs_e = np.concatenate([np.zeros(m), hr]).astype(ext)
    K = Ke.astype(float)
    try:
        lu = scipy.linalg.lu_factor(K)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SingularityError(f"KKT matrix is singular: {exc}") from exc
    if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
        raise SingularityError("KKT matrix is singular")
    sol = scipy.linalg.lu_solve(lu, rhs_e.astype(float))
    for _ in range(3):
        # residual in extended precision: refinement then recovers full working accuracy
        resid = (rhs_e - Ke @ sol.astype(ext)).astype(float)
        sol = sol + scipy.linalg.lu_solve(lu, resid)
    z = sol[:m]
    lam = np.zeros(E.shape[0])
    lam[keep] = sol[m:]
    return z, lam, rank


def kkt_solve(scenario: Scenario, constraints="tuples", grams=None) -> KktSolution:
    """Minimum of the average control cost subject to all terminal constraints."""
    if grams is None:
        grams = agent_gramians(scenario)
    n = scenario.system.n
    dims = scenario.targets.dims
    E, h = constraint_system(scenario, grams, constraints)
    D = cost_matrix(dims, grams, dtype=np.longdouble)
    expected = independent_constraint_count(dims) * n
    z, lam, rank = _equality_qp(D, E, h, expected)
    D = D.astype(float)
    off = _offsets(dims, n)
    params = tuple(z[off[l]:off[l + 1]].reshape(d, n) for l, d in enumerate(dims))
    return KktSolution(
        z=z,
        multipliers=lam,
        constraint_residual=float(np.max(np.abs(E @ z - h))),
        stationarity_residual=float(np.max(np.abs(2.0 * D @ z + E.T @ lam))),
        objective=average_energy(params, grams),
        params=params,
        rank=rank,
    )


def penalized_objective(scenario: Scenario, f: float, params, grams=None):
    """Control energy, weighted terminal error, and terminal states for given parameters.

    Returns ``(total, energy, error_term, terminal_states)``.
    """
    if grams is None:
        grams = agent_gramians(scenario)
    A = scenario.system.A
    H = scenario.targets
    M = mat_exp(A, scenario.T)
    y = mat_exp(-A, scenario.t0) @ scenario.x0
    energy = average_energy(params, grams)
    X = np.empty(H.entries.shape)
    for tup in H.tuples():
        z = y.copy()
        for l, c in enumerate(tup):
            z = z + grams[l] @ params[l][c]
        X[tup] = M @ z
    err = f * float(np.mean(np.sum((X - H.entries) ** 2, axis=-1)))
    return energy + err, energy, err, X


def penalized_solve(scenario: Scenario, f: float, grams=None) -> PenalizedSolution:
    """Minimize control energy plus ``f`` times the mean squared terminal error.

    The objective is a strictly convex quadratic in the stacked parameters
    and is solved as one symmetric positive definite system. Works for any
    number of agents.
    """
    if not f > 0.0:
        raise ValueError("penalty weight must be positive")
    if grams is None:
        grams = agent_gramians(scenario)
    A = scenario.system.A
    n = scenario.system.n
    H = scenario.targets
    dims = H.dims
    N = math.prod(dims)
    off = _offsets(dims, n)
    M = mat_exp(A, scenario.T)
    y = mat_exp(-A, scenario.t0) @ scenario.x0
    S = np.zeros((N * n, off[-1]))
    c = np.zeros(N * n)
    for r, tup in enumerate(H.tuples()):
        for l, ch in enumerate(tup):
            S[r * n:(r + 1) * n, off[l] + ch * n: off[l] + (ch + 1) * n] = M @ grams[l]
        c[r * n:(r + 1) * n] = M @ y - H[tup]
    D = cost_matrix(dims, grams)
    Q = D + (f / N) * (S.T @ S)
    g = (f / N) * (S.T @ c)
    z = scipy.linalg.solve(Q, -g, assume_a="pos")
    params = tuple(z[off[l]:off[l + 1]].reshape(d, n) for l, d in enumerate(dims))
    total, energy, err, X = penalized_objective(scenario, f, params, grams)
    return PenalizedSolution(params, total, energy, err, X)


def stationarity_check(law: OpenLoopLaw, scenario: Scenario, directions: int = 16, seed: int = 0) -> float:
    """Largest central-difference directional derivative of the average cost along
    random directions tangent to the terminal constraints."""
    grams = law.gramians
    E, _ = constraint_system(scenario, grams, "tuples")
    D = cost_matrix(law.dims, grams)
    basis = scipy.linalg.null_space(E, rcond=1e-10)
    if basis.shape[1] == 0:
        return 0.0
    z = law.stacked()
    rng = np.random.default_rng(seed)
    step = 1e-3 * max(1.0, float(np.linalg.norm(z)))
    worst = 0.0
    for _ in range(directions):
        d = basis @ rng.standard_normal(basis.shape[1])
        d /= np.linalg.norm(d)
        zp, zm = z + step * d, z - step * d
        deriv = (zp @ D @ zp - zm @ D @ zm) / (2.0 * step)
        worst = max(worst, abs(float(deriv)))
    return worst


def tangent_basis(scenario: Scenario, grams) -> np.ndarray:
    E, _ = constraint_system(scenario, grams, "tuples")
    return scipy.linalg.null_space(E, rcond=1e-10)


def _segment_maps(A, B, edges):
    # int_{a}^{b} e^{-A s} ds B for each segment, via one block exponential per width
    n, m = B.shape
    out = []
    cache = {}
    for a, b in zip(edges[:-1], edges[1:]):
        width = b - a
        key = round(width, 15)
        if key not in cache:
            blk = np.zeros((n + m, n + m))
            blk[:n, :n] = -A
            blk[:n, n:] = B
            cache[key] = scipy.linalg.expm(blk * width)[:n, n:]
        out.append(mat_exp(-A, a) @ cache[key])
    return out


def discretized_control_oracle(scenario: Scenario, segments: int = 20) -> float:
    """Optimal average cost when every control is piecewise constant on ``segments`` equal pieces.

    Always at least the parametric optimum; converges to it as the grid is refined.
    """
    A = scenario.system.A
    n = scenario.system.n
    H = scenario.targets
    dims = H.dims
    edges = np.linspace(scenario.t0, scenario.T, segments + 1)
    width = edges[1] - edges[0]
    maps = [np.hstack(_segment_maps(A, B, edges)) for B in scenario.system.inputs]
    sizes = [mp.shape[1] for mp in maps]
    off = [0]
    for d, s in zip(dims, sizes):
        off.append(off[-1] + d * s)
    eT = mat_exp(-A, scenario.T)
    start = mat_exp(-A, scenario.t0) @ scenario.x0
    rows, rhs = [], []
    for tup in H.tuples():
        block = np.zeros((n, off[-1]))
        for l, c in enumerate(tup):
            block[:, off[l] + c * sizes[l]: off[l] + (c + 1) * sizes[l]] = maps[l]
        rows.append(block)
        rhs.append(eT @ H[tup] - start)
    E, h = np.vstack(rows), np.concatenate(rhs)
    diag = np.concatenate([np.full(d * s, width / d) for d, s in zip(dims, sizes)])
    z, _, _ = _equality_qp(np.diag(diag), E, h)
    return float(z @ (diag * z))


def arbitration_report(scenario: Scenario, f: Optional[float] = None):
    """Compare the two terminal-core readings of the penalized feedback law against the oracle.

    Each mode's law is evaluated at ``t0`` from ``x0``, giving one parameter
    vector per choice; its penalized cost is compared with the oracle minimum.
    Returns ``(rows, text)`` where ``rows`` maps mode name to a dict of numbers.
    """
    from .approach import CORE_MODES, ApproachLaw

    if f is None:
        f = scenario.penalty_weight
    grams = agent_gramians(scenario)
    best = penalized_solve(scenario, f, grams)
    rows = {}
    for mode in CORE_MODES:
        law = ApproachLaw.from_scenario(scenario, f=f, core_mode=mode)
        P, Q = law.parameters(scenario.t0, scenario.x0)
        total, energy, err, _ = penalized_objective(scenario, f, (P, Q), grams)
        dev = max(
            float(np.max(np.abs(P - best.params[0]))),
            float(np.max(np.abs(Q - best.params[1]))),
        )
        scale = max(1.0, max(float(np.max(np.abs(p))) for p in best.params))
        rows[mode] = {
            "objective": total,
            "energy": energy,
            "terminal_error": err,
            "param_deviation": dev / scale,
        }
    canonical = min(rows, key=lambda k: rows[k]["objective"])
    lines = [
        f"penalty f = {f:.17g}",
        f"oracle objective = {best.objective:.17g}",
        f"{'mode':<12} {'objective':>24} {'excess':>12} {'param dev':>12}",
    ]
    for mode, r in rows.items():
        excess = r["objective"] - best.objective
        lines.append(f"{mode:<12} {r['objective']:>24.17g} {excess:>12.3e} {r['param_deviation']:>12.3e}")
    lines.append(f"lower-cost mode: {canonical}")
    return rows, "\n".join(lines)
