"""Dense small-matrix primitives: matrix exponential, Gramians, linear solves.

All routines take and return plain ``numpy`` arrays and keep no state, so they
can be called concurrently on shared inputs.

The controllability Gramian used throughout is the *backward* form

    W(t_s, t_e) = int_{t_s}^{t_e} e^{-A s} B B^T e^{-A^T s} ds,

which is what appears when terminal constraints are written in the
``e^{-A T} x(T)`` coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import DimensionError, DomainError, NumericError, SingularityError

GRAMIAN_RTOL = 1e-12
QUADRATURE_PANEL_ORDER = 16
QUADRATURE_MIN_NODES = 32
QUADRATURE_MAX_NODES = 512
CONTROLLABILITY_TOL = 1e-10
SINGULAR_CONDITION = 1e12
SOLVE_RTOL = 1e-10


@dataclass(frozen=True)
class Gramian:
    """A Gramian value together with its interval and a 2-norm condition estimate."""

    value: np.ndarray
    interval: tuple[float, float]
    condition_estimate: float

    @property
    def n(self) -> int:
        return self.value.shape[0]


def as_matrix(M, name="matrix") -> np.ndarray:
    """Coerce ``M`` to a finite 2-D float array."""
    arr = np.array(M, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} has non-finite entries")
    return arr


def _square(M, name="matrix") -> np.ndarray:
    arr = as_matrix(M, name)
    if arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {arr.shape}")
    return arr


def mat_exp(M, t=1.0) -> np.ndarray:
    """Return ``e^{M t}``.

    Scaling-and-squaring with a degree-13 Pade approximant (scipy's
    Al-Mohy/Higham implementation).
    """
    M = _square(M)
    with np.errstate(over="ignore", invalid="ignore"):
        out = scipy.linalg.expm(M * float(t))
    if not np.all(np.isfinite(out)):
        raise NumericError(f"matrix exponential overflowed at t={t}")
    return out


def _condition(W: np.ndarray) -> float:
    eig = np.linalg.eigvalsh(0.5 * (W + W.T))
    if eig[-1] <= 0.0:
        return float("inf")
    if eig[0] <= 0.0:
        return float("inf")
    return float(eig[-1] / eig[0])


@lru_cache(maxsize=None)
def _gauss_legendre(order: int):
    return np.polynomial.legendre.leggauss(order)


def _composite_gl(A, BBt, t_start, t_end, panels):
    x, w = _gauss_legendre(QUADRATURE_PANEL_ORDER)
    edges = np.linspace(t_start, t_end, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    E = scipy.linalg.expm(-A[None, :, :] * nodes[:, None, None])
    integrand = E @ BBt @ np.swapaxes(E, 1, 2)
    return np.tensordot(weights, integrand, axes=1)


def _gramian_quadrature(A, B, t_start, t_end):
    BBt = B @ B.T
    panels = QUADRATURE_MIN_NODES // QUADRATURE_PANEL_ORDER
    prev = _composite_gl(A, BBt, t_start, t_end, panels)
    while panels * QUADRATURE_PANEL_ORDER < QUADRATURE_MAX_NODES:
        panels *= 2
        cur = _composite_gl(A, BBt, t_start, t_end, panels)
        scale = np.linalg.norm(cur)
        if not np.isfinite(scale):
            raise NumericError("Gramian quadrature produced non-finite values")
        if np.linalg.norm(cur - prev) <= GRAMIAN_RTOL * scale:
            return cur
        prev = cur
    raise NumericError(
        f"Gramian quadrature did not reach {GRAMIAN_RTOL:g} relative accuracy "
        f"with {QUADRATURE_MAX_NODES} nodes"
    )


def _gramian_augmented(A, B, t_start, t_end):
    # Van Loan block exponential: the (1,2) block times e^{-A^T tau} is the
    # Gramian of the shifted interval [0, tau].
    n = A.shape[0]
    tau = t_end - t_start
    blk = np.zeros((2 * n, 2 * n))
    blk[:n, :n] = -A
    blk[:n, n:] = B @ B.T
    blk[n:, n:] = A.T
    F = scipy.linalg.expm(blk * tau)
    G = F[:n, n:] @ scipy.linalg.expm(-A.T * tau)
    if t_start != 0.0:
        S = scipy.linalg.expm(-A * t_start)
        G = S @ G @ S.T
    return G


def gramian(A, B, t_start, t_end, method="quadrature") -> Gramian:
    """Backward controllability Gramian of ``(A, B)`` over ``[t_start, t_end]``.

    ``method="quadrature"`` uses composite 16-point Gauss-Legendre panels,
    starting from 32 nodes and doubling until two successive values agree to
    1e-12 relative Frobenius norm (512 nodes at most). ``method="augmented"``
    evaluates the same integral with one block matrix exponential; it is used
    on hot paths that need many remaining-horizon Gramians.
    """
    A = _square(A, "A")
    B = as_matrix(B, "B")
    if B.shape[0] != A.shape[0]:
        raise DimensionError(f"B has {B.shape[0]} rows, A is {A.shape[0]}x{A.shape[0]}")
    t_start = float(t_start)
    t_end = float(t_end)
    if not t_start < t_end:
        raise DomainError(f"degenerate Gramian interval [{t_start}, {t_end}]")
    if method == "quadrature":
        W = _gramian_quadrature(A, B, t_start, t_end)
    elif method == "augmented":
        W = _gramian_augmented(A, B, t_start, t_end)
    else:
        raise ValueError(f"unknown Gramian method {method!r}")
    W = 0.5 * (W + W.T)
    if not np.all(np.isfinite(W)):
        raise NumericError("Gramian has non-finite entries")
    return Gramian(W, (t_start, t_end), _condition(W))


def check_controllable(A, B, t_start, t_end, tol=CONTROLLABILITY_TOL):
    """Return ``(controllable, condition_estimate)`` for the pair ``(A, B)``.

    The pair is declared controllable when the smallest Gramian eigenvalue
    exceeds ``tol`` times the largest.
    """
    W = gramian(A, B, t_start, t_end)
    eig = np.linalg.eigvalsh(W.value)
    ok = bool(eig[-1] > 0.0 and eig[0] > tol * eig[-1])
    return ok, W.condition_estimate


def solve_linear(M, rhs) -> np.ndarray:
    """Solve ``M X = rhs`` by LU with one step of iterative refinement.

    Raises :class:`SingularityError` when ``M`` is singular to working
    tolerance or the normwise backward-error contract
    ``|MX - rhs|_inf <= 1e-10 (|M|_inf |X|_inf + |rhs|_inf)`` cannot be met.
    """
    M = _square(M)
    b = np.array(rhs, dtype=float)
    vector = b.ndim == 1
    if vector:
        b = b[:, None]
    if b.shape[0] != M.shape[0]:
        raise DimensionError(f"rhs has {b.shape[0]} rows, matrix is {M.shape[0]}x{M.shape[0]}")
    cond = float(np.linalg.cond(M)) if M.size else 1.0
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
        raise SingularityError(f"matrix is singular to working precision (cond ~ {cond:.3g})", cond)
    lu = scipy.linalg.lu_factor(M, check_finite=False)
    X = scipy.linalg.lu_solve(lu, b, check_finite=False)
    mnorm = np.linalg.norm(M, np.inf) if M.size else 0.0

    def bound(X):
        return SOLVE_RTOL * (mnorm * np.max(np.abs(X), initial=0.0) + np.max(np.abs(b), initial=0.0))

    r = M @ X - b
    if np.max(np.abs(r), initial=0.0) > 1e-6 * bound(X):
        X = X - scipy.linalg.lu_solve(lu, r, check_finite=False)
        r = M @ X - b
        if np.max(np.abs(r), initial=0.0) > bound(X):
            raise SingularityError(
                f"residual {np.max(np.abs(r)):.3g} exceeds tolerance (cond ~ {cond:.3g})", cond
            )
    return X[:, 0] if vector else X


class SPDFactor:
    """Cholesky factorization of a symmetric positive definite matrix, for repeated solves."""

    def __init__(self, M):
        M = _square(M)
        self.matrix = M
        try:
            self._cho = scipy.linalg.cho_factor(M, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularityError(f"matrix is not positive definite: {exc}", _condition(M)) from exc

    def solve(self, rhs) -> np.ndarray:
        return scipy.linalg.cho_solve(self._cho, np.asarray(rhs, dtype=float), check_finite=False)


def average_energy(params, grams) -> float:
    """``sum_l (1/N_l) sum_i P_l^i . W_l P_l^i`` accumulated in extended precision.

    Dividing ``W_l`` by ``N_l`` before the product would round ``W_l``, and with
    a badly conditioned Gramian that rounding shows up at the 1e-10 level.
    """
    ext = np.longdouble
    total = ext(0.0)
    for P, W in zip(params, grams):
        Pe = np.asarray(P, dtype=ext)
        total += np.einsum("in,nm,im->", Pe, np.asarray(W, dtype=ext), Pe) / Pe.shape[0]
    return float(total)
