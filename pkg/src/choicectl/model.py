"""Problem description: plants, target tensors, scenarios, and target compatibility.

Agents and choices are indexed from 0 in the Python API. A target tensor for
``L`` agents with ``N_l`` choices each is stored as an array of shape
``(N_1, ..., N_L, n)``; entry ``H[i_1, ..., i_L]`` is the terminal state
required when agent ``l`` picks choice ``i_l``.

A tensor is *compatible* when every entry is determined additively by the
entries with at most one non-zero index (the generator set):

    H[i_1, ..., i_L] = sum_l H[0, .., i_l, .., 0] - (L - 1) H[0, ..., 0]

which is equivalent to all pairwise difference constraints
``H[.., i, .., j, ..] - H[.., i, .., j', ..] = H[.., i', .., j, ..] - H[.., i', .., j', ..]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import DimensionError, DomainError, NumericError
from .numerics import as_matrix

if TYPE_CHECKING:
    from .sim import NoiseConfig


@dataclass(frozen=True)
class LinearSystem:
    """``x' = A x + sum_l B_l u_l`` with one input matrix per agent."""

    A: np.ndarray
    inputs: tuple[np.ndarray, ...]

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        inputs = tuple(as_matrix(B, f"B[{k}]") for k, B in enumerate(self.inputs))
        if not inputs:
            raise DimensionError("a system needs at least one agent")
        for k, B in enumerate(inputs):
            if B.shape[0] != A.shape[0]:
                raise DimensionError(f"B[{k}] has {B.shape[0]} rows, expected {A.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "inputs", inputs)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def L(self) -> int:
        return len(self.inputs)

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(B.shape[1] for B in self.inputs)


@dataclass(frozen=True)
class TargetTensor:
    """Dense tensor of terminal targets, shape ``dims + (n,)``."""

    entries: np.ndarray

    def __post_init__(self):
        H = np.array(self.entries, dtype=float)
        if H.ndim < 2:
            raise DimensionError("target tensor needs at least one agent axis and a state axis")
        if any(d < 1 for d in H.shape):
            raise DimensionError(f"empty axis in target tensor of shape {H.shape}")
        if not np.all(np.isfinite(H)):
            raise NumericError("target tensor has non-finite entries")
        H.setflags(write=False)
        object.__setattr__(self, "entries", H)

    @classmethod
    def from_flat(cls, dims, flat) -> "TargetTensor":
        """Build from a row-major list of ``prod(dims)`` state vectors."""
        dims = tuple(int(d) for d in dims)
        flat = np.array(flat, dtype=float)
        if flat.ndim == 1:
            flat = flat[:, None]
        if flat.shape[0] != math.prod(dims):
            raise DimensionError(f"expected {math.prod(dims)} entries for dims {dims}, got {flat.shape[0]}")
        return cls(flat.reshape(dims + (flat.shape[1],)))

    @classmethod
    def scalar(cls, values) -> "TargetTensor":
        """Tensor of 1-dimensional targets from an array of scalars."""
        return cls(np.asarray(values, dtype=float)[..., None])

    @property
    def dims(self) -> tuple[int, ...]:
        return self.entries.shape[:-1]

    @property
    def n(self) -> int:
        return self.entries.shape[-1]

    @property
    def L(self) -> int:
        return len(self.dims)

    def flat(self) -> np.ndarray:
        return self.entries.reshape(-1, self.n)

    def __getitem__(self, idx) -> np.ndarray:
        return self.entries[tuple(idx)]

    def tuples(self):
        """All choice tuples in row-major order."""
        return itertools.product(*(range(d) for d in self.dims))


@dataclass(frozen=True)
class GeneratorSet:
    """The base entry ``H[0,...,0]`` and, per agent, the entries varying only that agent's choice."""

    base: np.ndarray
    rays: tuple[np.ndarray, ...]

    @property
    def size(self) -> int:
        return 1 + sum(r.shape[0] for r in self.rays)

    def entry(self, agent: int, choice: int) -> np.ndarray:
        """Generator for ``agent`` choosing ``choice`` while all others pick 0."""
        return self.base if choice == 0 else self.rays[agent][choice - 1]

    def entries(self, agent: int) -> np.ndarray:
        """All ``N_l`` generator vectors for ``agent``, base first."""
        return np.vstack([self.base[None, :], self.rays[agent]])


@dataclass(frozen=True)
class Scenario:
    """A complete synthesis problem: plant, horizon, initial state and targets."""

    system: LinearSystem
    t0: float
    T: float
    x0: np.ndarray
    targets: TargetTensor
    switch_time: Optional[float] = None
    penalty_weight: Optional[float] = None
    noise: Optional["NoiseConfig"] = field(default=None)

    def __post_init__(self):
        t0, T = float(self.t0), float(self.T)
        if not t0 < T:
            raise DomainError(f"need t0 < T, got t0={t0}, T={T}")
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        if x0.shape[0] != self.system.n:
            raise DimensionError(f"x0 has length {x0.shape[0]}, system has n={self.system.n}")
        if self.targets.n != self.system.n:
            raise DimensionError(f"targets have dimension {self.targets.n}, system has n={self.system.n}")
        if self.targets.L != self.system.L:
            raise DimensionError(f"targets index {self.targets.L} agents, system has {self.system.L}")
        if self.switch_time is not None and not t0 < float(self.switch_time) < T:
            raise DomainError(f"switch time {self.switch_time} not inside ({t0}, {T})")
        if self.penalty_weight is not None and not float(self.penalty_weight) > 0.0:
            raise DomainError(f"penalty weight must be positive, got {self.penalty_weight}")
        object.__setattr__(self, "t0", t0)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "x0", x0)

    def replace(self, **changes) -> "Scenario":
        return replace(self, **changes)


def generator_set(H: TargetTensor) -> GeneratorSet:
    """Extract the entries whose index tuple has at most one non-zero component."""
    E = H.entries
    L = H.L
    base = E[(0,) * L].copy()
    rays = []
    for l in range(L):
        idx = [0] * L
        idx[l] = slice(1, None)
        rays.append(E[tuple(idx)].reshape(-1, H.n).copy())
    return GeneratorSet(base, tuple(rays))


def reconstruct(g: GeneratorSet, dims) -> TargetTensor:
    """Rebuild the unique compatible tensor spanned by ``g``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != len(g.rays):
        raise DimensionError(f"dims {dims} do not match {len(g.rays)} generator rays")
    for l, (d, r) in enumerate(zip(dims, g.rays)):
        if r.shape[0] != d - 1:
            raise DimensionError(f"agent {l}: {r.shape[0]} rays for {d} choices")
    L = len(dims)
    n = g.base.shape[0]
    out = np.broadcast_to(-(L - 1) * g.base, dims + (n,)).copy()
    for l in range(L):
        shape = [1] * L + [n]
        shape[l] = dims[l]
        out += g.entries(l).reshape(shape)
    # keep generator entries bit-exact
    out[(0,) * L] = g.base
    for l in range(L):
        for c in range(1, dims[l]):
            idx = [0] * L
            idx[l] = c
            out[tuple(idx)] = g.rays[l][c - 1]
    return TargetTensor(out)


def compatibility_residual(H: TargetTensor) -> float:
    """Largest infinity-norm gap between ``H`` and the tensor rebuilt from its generators."""
    R = reconstruct(generator_set(H), H.dims)
    return float(np.max(np.abs(H.entries - R.entries)))


def default_tolerance(H: TargetTensor) -> float:
    return max(1e-9 * float(np.max(np.abs(H.entries))), 1e-12)


def is_compatible(H: TargetTensor, tol: Optional[float] = None) -> bool:
    if tol is None:
        tol = default_tolerance(H)
    return compatibility_residual(H) <= tol


def independent_constraint_count(dims) -> int:
    """Number of independent terminal constraints: ``1 + sum(N_l) - L``."""
    dims = tuple(dims)
    return 1 + sum(dims) - len(dims)
