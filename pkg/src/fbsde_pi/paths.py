"""Time grids, seeded Brownian increments and Euler-Maruyama integration.

Every Brownian path owns its own Philox stream keyed by ``(seed, path_index)``;
the step index is the position inside that stream. A path can therefore be
regenerated in isolation, and chunked or reordered generation gives
bit-identical batches.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeGrid",
    "BrownianBatch",
    "StatePathBatch",
    "TimeMeasure",
    "DivergenceError",
    "make_grid",
    "sample_brownian",
    "integrate_sde",
    "quadrature",
    "derive_seed",
]

_SEED_MASK = (1 << 64) - 1


class DivergenceError(FloatingPointError):
    """A simulated or optimized quantity became non-finite."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        """Grid nodes ``s_0 = t0, ..., s_N = T`` (last node pinned to ``T``)."""
        s = self.t0 + self.dt * np.arange(self.n_steps + 1)
        s[-1] = self.T
        return s


def make_grid(t0: float, T: float, n_steps: int) -> TimeGrid:
    if not T > t0:
        raise ValueError(f"horizon T={T} must exceed start time t0={t0}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps}")
    return TimeGrid(float(t0), float(T), int(n_steps))


def derive_seed(*keys: int) -> int:
    """Map a tuple of non-negative integers to a 64-bit seed.

    Used to carve disjoint streams (training step, evaluation, repeat, ...)
    out of one master seed.
    """
    ss = np.random.SeedSequence([int(k) & _SEED_MASK for k in keys])
    return int(ss.generate_state(1, np.uint64)[0])


def _path_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & _SEED_MASK, int(index)]))


@dataclass(frozen=True)
class BrownianBatch:
    """Increments ``dW[m, k, :]`` over ``[s_k, s_{k+1}]`` for ``M`` paths."""

    grid: TimeGrid
    increments: np.ndarray
    seed: int = 0
    start: int = 0

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @property
    def M(self) -> int:
        return self.increments.shape[0]

    def paths(self) -> np.ndarray:
        """Brownian paths ``W[m, k, :]`` with ``W[:, 0] = 0``."""
        W = np.zeros((self.M, self.grid.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        return W

    def subset(self, lo: int, hi: int) -> "BrownianBatch":
        return BrownianBatch(self.grid, self.increments[lo:hi], self.seed, self.start + lo)


def sample_brownian(grid: TimeGrid, d: int, M: int, seed: int, start: int = 0) -> BrownianBatch:
    """Draw i.i.d. ``N(0, dt I)`` increments for paths ``start .. start+M-1``."""
    if d < 1 or M < 1:
        raise ValueError(f"d and M must be positive, got d={d}, M={M}")
    scale = np.sqrt(grid.dt)
    inc = np.empty((M, grid.n_steps, d))
    for m in range(M):
        inc[m] = _path_stream(seed, start + m).standard_normal((grid.n_steps, d))
    inc *= scale
    inc.setflags(write=False)
    return BrownianBatch(grid, inc, int(seed), int(start))


@dataclass(frozen=True)
class StatePathBatch:
    grid: TimeGrid
    states: np.ndarray
    policy_tag: str = ""
    controls: np.ndarray | None = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.states.shape[0]

    def subset(self, lo: int, hi: int) -> "StatePathBatch":
        ctrl = None if self.controls is None else self.controls[lo:hi]
        return StatePathBatch(self.grid, self.states[lo:hi], self.policy_tag, ctrl)


def integrate_sde(problem, policy, x0, batch: BrownianBatch, keep_controls: bool = False) -> StatePathBatch:
    """Euler-Maruyama for ``dX = (b_bar + sigma b_hat(alpha)) ds + sigma dW``.

    Coefficients are evaluated at the left node of every step. When
    ``keep_controls`` is set the applied controls ``alpha(s_k, X_k)`` are
    returned alongside the states, shape ``(M, N, m)``.
    """
    if batch.d != problem.d:
        raise ValueError(f"batch noise dim {batch.d} != problem noise dim {problem.d}")
    grid = batch.grid
    dt = grid.dt
    s = grid.nodes
    M, N = batch.M, grid.n_steps
    X = np.empty((M, N + 1, problem.n))
    X[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (M, problem.n))
    controls = np.empty((M, N, problem.m)) if keep_controls else None
    for k in range(N):
        x = X[:, k]
        a = policy(s[k], x)
        if a.shape != (M, problem.m):
            raise ValueError(f"policy returned shape {a.shape}, expected {(M, problem.m)}")
        if keep_controls:
            controls[:, k] = a
        drift = problem.b_bar(s[k], x) + problem.diffuse(s[k], x, problem.b_hat(s[k], x, a))
        X[:, k + 1] = x + drift * dt + problem.diffuse(s[k], x, batch.increments[:, k])
        if not np.all(np.isfinite(X[:, k + 1])):
            bad = int(np.flatnonzero(~np.all(np.isfinite(X[:, k + 1]), axis=1))[0])
            raise DivergenceError(f"non-finite state on path {batch.start + bad} at step {k + 1}")
    return StatePathBatch(grid, X, getattr(policy, "tag", type(policy).__name__), controls)


class TimeMeasure(enum.Enum):
    DIRAC_AT_START = "dirac"
    LEBESGUE = "lebesgue"


def quadrature(values, measure: TimeMeasure, grid: TimeGrid) -> np.ndarray:
    """Integrate per-path node values against ``measure``.

    ``values`` has shape ``(..., n_steps + 1)``. The Lebesgue rule is the
    left-endpoint sum, so the terminal node never contributes.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != grid.n_steps + 1:
        raise ValueError(f"expected {grid.n_steps + 1} nodes, got {values.shape[-1]}")
    measure = TimeMeasure(measure)
    if measure is TimeMeasure.DIRAC_AT_START:
        return values[..., 0]
    return values[..., :-1].sum(axis=-1) * grid.dt
