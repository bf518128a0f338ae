"""Fixed-step RK4 simulation of the closed loop, with seeded piecewise-constant noise.

A controller is any object with ``controls(t, x) -> sequence of per-agent
input vectors``. If it also has ``begin_step(t, x, step)`` that hook runs at
the start of every integration step (and once at the final time); the hybrid
controller uses it to switch modes on the step grid.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import NumericError
from .model import Scenario

DEFAULT_STEPS = 2000
_MASK64 = (1 << 64) - 1
_SUBSEED_MULT = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class NoiseConfig:
    """Additive state disturbance held constant over intervals of length ``hold_interval``.

    ``mask`` (optional, length ``n``) scales each state channel; default is all ones.
    """

    sigma: float
    hold_interval: float
    seed: int
    mask: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be nonnegative")
        if not self.hold_interval > 0:
            raise ValueError("noise hold interval must be positive")
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        if self.mask is not None:
            object.__setattr__(self, "mask", tuple(float(v) for v in self.mask))

    def for_tuple(self, index: int) -> "NoiseConfig":
        """Independent stream for the choice tuple with row-major index ``index``."""
        return replace(self, seed=(self.seed ^ ((index * _SUBSEED_MULT) & _MASK64)))


def sample_noise(config: NoiseConfig, t: float, n: int, t0: float = 0.0) -> np.ndarray:
    """Noise value at time ``t``: i.i.d. N(0, sigma^2) per hold interval and component."""
    if config.sigma == 0.0:
        return np.zeros(n)
    k = int(math.floor((t - t0) / config.hold_interval + 1e-9))
    return _interval_noise(config, k, n)


def _interval_noise(config, k, n):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, max(k, 0)]))
    w = config.sigma * rng.standard_normal(n)
    if config.mask is not None:
        w = w * np.asarray(config.mask)
    return w


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: tuple[np.ndarray, ...]
    terminal_error: np.ndarray
    measured_cost_contribution: float
    choices: tuple[int, ...]
    noise_seed: Optional[int] = None

    @property
    def terminal_state(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class EnsembleReport:
    trajectories: dict
    average_cost: float
    max_terminal_error: float

    def terminal_errors(self) -> dict:
        return {k: tr.terminal_error for k, tr in self.trajectories.items()}

    def mean_terminal_error(self) -> float:
        return float(np.mean([np.linalg.norm(tr.terminal_error) for tr in self.trajectories.values()]))


def uniform_grid(t0, t1, steps=DEFAULT_STEPS) -> np.ndarray:
    if steps < 1:
        raise ValueError("need at least one step")
    grid = t0 + (t1 - t0) / steps * np.arange(steps + 1)
    grid[-1] = t1
    return grid


def terminal_refined_grid(t0, t1, steps=DEFAULT_STEPS, stiffness=1.0, ratio=0.5, substeps=4) -> np.ndarray:
    """Uniform grid whose last interval is subdivided geometrically toward ``t1``.

    Closed loops whose gain grows like ``1/(t1 - t)`` (up to a cap of order
    ``stiffness``) are unstable under uniform RK4 on the final step no matter
    how small the step. Here the last uniform interval is split at
    ``t1 - h * ratio**k`` until the remaining gap is below ``0.1 / stiffness``,
    each piece cut into ``substeps`` equal steps. The grid is fixed in advance,
    so results stay deterministic.
    """
    base = uniform_grid(t0, t1, steps)
    h = base[1] - base[0]
    floor = 0.1 / max(float(stiffness), 1.0 / h)
    gaps = [h]
    while gaps[-1] > floor:
        gaps.append(gaps[-1] * ratio)
    knots = [t1 - g for g in gaps] + [t1]
    fine = []
    for a, b in zip(knots[:-1], knots[1:]):
        fine.extend(a + (b - a) * np.arange(substeps) / substeps)
    return np.concatenate([base[:-1], fine[1:], [t1]])


def simulate(scenario: Scenario, controller, choices, noise: Optional[NoiseConfig] = None,
             steps: int = DEFAULT_STEPS, t_end: Optional[float] = None,
             grid: Optional[np.ndarray] = None) -> Trajectory:
    """Integrate ``x' = A x + sum_l B_l u_l + noise`` from ``x0`` with classical RK4.

    Controls are evaluated at the RK4 stage times; the noise is held over each
    step at its value at the step start. The time grid is ``steps`` uniform
    steps over ``[t0, t_end]`` (``t_end`` defaults to the terminal time) unless
    an explicit increasing ``grid`` starting at ``t0`` is given.
    """
    A = scenario.system.A
    Bs = scenario.system.inputs
    n = scenario.system.n
    t0 = scenario.t0
    if grid is None:
        times = uniform_grid(t0, scenario.T if t_end is None else float(t_end), steps)
    else:
        times = np.array(grid, dtype=float)
        if times.ndim != 1 or times.size < 2 or times[0] != t0 or np.any(np.diff(times) <= 0):
            raise ValueError("grid must be strictly increasing and start at t0")
    t1 = times[-1]
    begin = getattr(controller, "begin_step", None)
    noise_cache = {}

    def noise_at(t):
        if noise is None or noise.sigma == 0.0:
            return None
        k = int(math.floor((t - t0) / noise.hold_interval + 1e-9))
        w = noise_cache.get(k)
        if w is None:
            w = noise_cache[k] = _interval_noise(noise, k, n)
        return w

    def rhs(t, x, w):
        us = controller.controls(t, x)
        dx = A @ x
        for B, u in zip(Bs, us):
            dx = dx + B @ u
        if w is not None:
            dx = dx + w
        return dx, us

    count = times.size - 1
    states = np.empty((count + 1, n))
    ctrl = [np.empty((count + 1, B.shape[1])) for B in Bs]
    x = scenario.x0.astype(float).copy()
    # overflow is reported as NumericError below rather than as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(count):
            t = times[k]
            h = times[k + 1] - t
            if begin is not None:
                begin(t, x, h)
            w = noise_at(t)
            k1, us = rhs(t, x, w)
            states[k] = x
            for l, u in enumerate(us):
                ctrl[l][k] = u
            k2, _ = rhs(t + 0.5 * h, x + 0.5 * h * k1, w)
            k3, _ = rhs(t + 0.5 * h, x + 0.5 * h * k2, w)
            k4, _ = rhs(times[k + 1], x + h * k3, w)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"state became non-finite at step {k + 1} (t={times[k + 1]:.6g})")
    if begin is not None:
        begin(t1, x, times[-1] - times[-2])
    states[-1] = x
    for l, u in enumerate(controller.controls(t1, x)):
        ctrl[l][-1] = u
    power = sum(np.sum(c * c, axis=1) for c in ctrl)
    cost = float(np.sum(0.5 * (power[1:] + power[:-1]) * np.diff(times)))
    target = scenario.targets[tuple(choices)]
    return Trajectory(
        times=times,
        states=states,
        controls=tuple(ctrl),
        terminal_error=x - target,
        measured_cost_contribution=cost,
        choices=tuple(choices),
        noise_seed=None if noise is None else noise.seed,
    )


def thread_count() -> int:
    raw = os.environ.get("CHOICECTL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_ensemble(scenario: Scenario, controller_family: Callable, noise: Optional[NoiseConfig] = None,
                 steps: int = DEFAULT_STEPS, threads: Optional[int] = None,
                 grid: Optional[np.ndarray] = None) -> EnsembleReport:
    """Simulate every choice tuple.

    ``controller_family(choices)`` must return a fresh controller. Each tuple
    gets its own noise stream (see :meth:`NoiseConfig.for_tuple`), so results
    do not depend on execution order. ``average_cost`` is the mean over
    tuples of the summed per-agent control energy.
    """
    tuples = list(scenario.targets.tuples())

    def one(item):
        index, choices = item
        cfg = None if noise is None else noise.for_tuple(index)
        return simulate(scenario, controller_family(choices), choices, cfg, steps, grid=grid)

    workers = threads if threads is not None else thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, enumerate(tuples)))
    else:
        results = [one(item) for item in enumerate(tuples)]
    trajectories = {tr.choices: tr for tr in results}
    return EnsembleReport(
        trajectories=trajectories,
        average_cost=float(np.mean([tr.measured_cost_contribution for tr in results])),
        max_terminal_error=float(max(np.max(np.abs(tr.terminal_error)) for tr in results)),
    )
