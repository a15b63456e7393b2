"""Control problems, feedback policies and Monte-Carlo policy costs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .paths import TimeGrid, derive_seed, integrate_sde, sample_brownian

__all__ = [
    "ControlProblem",
    "LinearPolicy",
    "ImprovedPolicy",
    "ZeroPolicy",
    "clip_box",
    "lq_log_problem",
    "bsde_example_problem",
    "improved_policy",
    "mc_policy_cost",
]


def clip_box(a, a_max: float) -> np.ndarray:
    return np.clip(a, -a_max, a_max)


@dataclass(frozen=True)
class ControlProblem:
    """Controlled diffusion ``dX = (b_bar + sigma b_hat(a)) ds + sigma dW``.

    All callables are vectorised over a batch of states ``x`` with shape
    ``(M, n)`` at a common time ``t``. ``sigma`` is never materialised;
    ``diffuse(t, x, v)`` returns ``sigma(t, x) @ v`` and ``diffuse_t(t, x, p)``
    returns ``sigma(t, x).T @ p``.
    """

    n: int
    d: int
    m: int
    b_bar: Callable
    diffuse: Callable
    diffuse_t: Callable
    b_hat: Callable
    running_cost: Callable
    terminal_cost: Callable
    mu: Callable
    a_max: float
    name: str = "custom"

    def clip(self, a) -> np.ndarray:
        return clip_box(a, self.a_max)


def _scalar_sigma(sigma0: float):
    def diffuse(t, x, v):
        return sigma0 * v

    return diffuse


def lq_log_problem(sigma0: float, bhat0: float, a_max: float, n: int) -> ControlProblem:
    """``dX = sigma0 (bhat0 a ds + dW)``, cost ``int |a|^2 ds + log((1 + |X_T|^2) / 2)``."""
    if not sigma0 > 0:
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    if not a_max > 0:
        raise ValueError(f"a_max must be positive, got {a_max}")
    sigma0, bhat0 = float(sigma0), float(bhat0)

    def mu(t, x, z):
        # separable quadratic: the box argmin is the clipped unconstrained one
        return clip_box(-0.5 * bhat0 * np.asarray(z), a_max)

    return ControlProblem(
        n=n,
        d=n,
        m=n,
        b_bar=lambda t, x: np.zeros_like(x),
        diffuse=_scalar_sigma(sigma0),
        diffuse_t=_scalar_sigma(sigma0),
        b_hat=lambda t, x, a: bhat0 * a,
        running_cost=lambda t, x, a: np.einsum("ij,ij->i", a, a),
        terminal_cost=lambda x: np.log((1.0 + np.einsum("ij,ij->i", x, x)) / 2.0),
        mu=mu,
        a_max=float(a_max),
        name=f"lq_log(sigma0={sigma0:g}, bhat0={bhat0:g}, n={n})",
    )


def bsde_example_problem(n: int, b0: float = 0.0) -> ControlProblem:
    """Uncontrolled toy problems behind the two benchmark BSDEs.

    ``dX = -b0 X ds + dW`` with ``b_hat(a) = a``, running cost ``-1`` and
    terminal cost ``|x|^2 / n``. With ``b0 = 0`` and ``x0 = 0`` the forward
    process is the Brownian motion itself.
    """
    b0 = float(b0)
    identity = lambda t, x, v: v  # noqa: E731
    return ControlProblem(
        n=n,
        d=n,
        m=n,
        b_bar=lambda t, x: -b0 * x,
        diffuse=identity,
        diffuse_t=identity,
        b_hat=lambda t, x, a: a,
        running_cost=lambda t, x, a: -np.ones(x.shape[0]),
        terminal_cost=lambda x: np.einsum("ij,ij->i", x, x) / n,
        mu=lambda t, x, z: -0.5 * np.asarray(z),
        a_max=np.inf,
        name=f"bsde_example(n={n}, b0={b0:g})",
    )


class LinearPolicy:
    """``a = clip(gain * x)``; requires ``m == n``."""

    def __init__(self, gain: float, a_max: float = np.inf):
        self.gain = float(gain)
        self.a_max = float(a_max)
        self.tag = f"linear({self.gain:g})"

    def __call__(self, s, x):
        return clip_box(self.gain * x, self.a_max)


class ZeroPolicy:
    def __init__(self, m: int):
        self.m = m
        self.tag = "zero"

    def __call__(self, s, x):
        return np.zeros((x.shape[0], self.m))


class ImprovedPolicy:
    """``a = mu(s, x, z_fn(s, x))``."""

    def __init__(self, problem: ControlProblem, z_fn: Callable, tag: str = "improved"):
        self.problem = problem
        self.z_fn = z_fn
        self.tag = tag

    def __call__(self, s, x):
        return self.problem.mu(s, x, self.z_fn(s, x))


def improved_policy(problem: ControlProblem, z_fn: Callable, tag: str = "improved") -> ImprovedPolicy:
    return ImprovedPolicy(problem, z_fn, tag)


def mc_policy_cost(
    problem: ControlProblem,
    policy,
    t: float,
    x,
    grid: TimeGrid,
    M: int,
    seed: int,
    chunk: int = 512,
    return_stderr: bool = False,
    noise_cache: dict | None = None,
):
    """Monte-Carlo estimate of ``E[int_t^T f(s, X, alpha) ds + g(X_T)]``.

    Paths are simulated in chunks; the per-path streams make the result
    independent of ``chunk``. Passing the same ``noise_cache`` dict to
    repeated calls reuses the Brownian batches of the common stream.
    """
    if not np.isclose(grid.t0, t):
        raise ValueError(f"grid starts at {grid.t0}, cost requested at t={t}")
    s = grid.nodes
    totals = np.empty(M)
    for lo in range(0, M, chunk):
        hi = min(M, lo + chunk)
        key = (seed, lo, hi, grid, problem.d)
        if noise_cache is not None and key in noise_cache:
            batch = noise_cache[key]
        else:
            batch = sample_brownian(grid, problem.d, hi - lo, seed, start=lo)
            if noise_cache is not None:
                noise_cache[key] = batch
        paths = integrate_sde(problem, policy, x, batch, keep_controls=True)
        X = paths.states
        run = np.zeros(hi - lo)
        for k in range(grid.n_steps):
            run += problem.running_cost(s[k], X[:, k], paths.controls[:, k])
        totals[lo:hi] = run * grid.dt + problem.terminal_cost(X[:, -1])
    mean = float(totals.mean())
    if return_stderr:
        stderr = float(totals.std(ddof=1) / np.sqrt(M)) if M > 1 else float("nan")
        return mean, stderr
    return mean


def evaluation_seed(master: int) -> int:
    """Seed of the common evaluation stream used for cost reporting."""
    return derive_seed(master, 0xE7A1)
