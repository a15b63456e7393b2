"""Backward-measurability-loss criteria for BSDEs and their optimisation.

A BSDE instance carries per-path terminal values ``xi``, a generator sampled
on the grid, and the Brownian increments that drove the forward paths. For a
trial ``z`` the anticipating process

    Ytilde_j = xi + sum_{k >= j} f_k(z_k) dt - sum_{k >= j} <z_k, dW_k>

is built in one backward sweep, and the four criteria compare it with a
constant, its batch mean, or a trial value model.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .paths import (
    BrownianBatch,
    DivergenceError,
    StatePathBatch,
    TimeGrid,
    TimeMeasure,
    derive_seed,
)

__all__ = [
    "GeneratorSpec",
    "BsdeInstance",
    "TrialSolution",
    "CriterionSet",
    "OptConfig",
    "NesterovSGD",
    "build_onpolicy_instance",
    "build_offpolicy_instance",
    "tilde_y",
    "criterion_value",
    "criterion_grad",
    "sgd_solve",
    "write_history_csv",
]


@dataclass(frozen=True)
class GeneratorSpec:
    """Generator on the grid: ``f_k(z) = base_k + <coupling_k, z>``.

    ``coupling is None`` is the decoupled case.
    """

    base: np.ndarray
    coupling: np.ndarray | None = None

    @property
    def decoupled(self) -> bool:
        return self.coupling is None

    def evaluate(self, z) -> np.ndarray:
        if self.coupling is None:
            return self.base
        return self.base + np.einsum("mkd,mkd->mk", self.coupling, z)


@dataclass(frozen=True)
class BsdeInstance:
    grid: TimeGrid
    brownian: BrownianBatch
    paths: StatePathBatch
    xi: np.ndarray
    generator: GeneratorSpec

    def __post_init__(self):
        M, N = self.brownian.M, self.grid.n_steps
        if self.xi.shape != (M,):
            raise ValueError(f"xi has shape {self.xi.shape}, expected {(M,)}")
        if not np.all(np.isfinite(self.xi)):
            raise DivergenceError("non-finite terminal value")
        if self.generator.base.shape != (M, N):
            raise ValueError(f"generator base has shape {self.generator.base.shape}, expected {(M, N)}")
        if self.paths.states.shape[:2] != (M, N + 1):
            raise ValueError("forward paths do not match the Brownian batch")

    @property
    def M(self) -> int:
        return self.brownian.M

    @property
    def d(self) -> int:
        return self.brownian.d


def _generator_inputs(problem, policy, paths: StatePathBatch):
    s = paths.grid.nodes
    X = paths.states
    a = np.stack([policy(s[k], X[:, k]) for k in range(paths.grid.n_steps)], axis=1)
    return s, X, a


def build_onpolicy_instance(problem, policy, paths: StatePathBatch, batch: BrownianBatch) -> BsdeInstance:
    """Decoupled instance ``xi = g(X_T)``, ``f_k = f(s_k, X_k, alpha(s_k, X_k))``."""
    if paths.states.shape[0] != batch.M or paths.grid != batch.grid:
        raise ValueError("paths and Brownian batch have mismatched shapes")
    s, X, a = _generator_inputs(problem, policy, paths)
    base = np.stack([problem.running_cost(s[k], X[:, k], a[:, k]) for k in range(paths.grid.n_steps)], axis=1)
    xi = problem.terminal_cost(X[:, -1])
    return BsdeInstance(paths.grid, batch, paths, xi, GeneratorSpec(base))


def build_offpolicy_instance(problem, policy, behavior, paths: StatePathBatch, batch: BrownianBatch) -> BsdeInstance:
    """Instance for ``v^alpha`` along paths driven by ``behavior``.

    The generator picks up the linear term ``<b_hat(alpha) - b_hat(alpha_b), z>``.
    """
    if paths.states.shape[0] != batch.M or paths.grid != batch.grid:
        raise ValueError("paths and Brownian batch have mismatched shapes")
    s, X, a = _generator_inputs(problem, policy, paths)
    if paths.controls is not None:
        ab = paths.controls
    else:
        ab = np.stack([behavior(s[k], X[:, k]) for k in range(paths.grid.n_steps)], axis=1)
    N = paths.grid.n_steps
    base = np.stack([problem.running_cost(s[k], X[:, k], a[:, k]) for k in range(N)], axis=1)
    coupling = np.stack(
        [problem.b_hat(s[k], X[:, k], a[:, k]) - problem.b_hat(s[k], X[:, k], ab[:, k]) for k in range(N)], axis=1
    )
    xi = problem.terminal_cost(X[:, -1])
    return BsdeInstance(paths.grid, batch, paths, xi, GeneratorSpec(base, coupling))


class CriterionSet(enum.Enum):
    A = "a"
    B = "b"
    C = "c"
    D = "d"

    @classmethod
    def parse(cls, value) -> "CriterionSet":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown criterion set {value!r}; choose from a, b, c, d") from None

    @property
    def measure(self) -> TimeMeasure:
        return TimeMeasure.DIRAC_AT_START if self in (CriterionSet.A, CriterionSet.B) else TimeMeasure.LEBESGUE

    @property
    def uses_z(self) -> bool:
        return self is not CriterionSet.C

    @property
    def uses_v(self) -> bool:
        return self in (CriterionSet.C, CriterionSet.D)


@dataclass
class TrialSolution:
    """Optimisable triple ``(y0, v_model, z_model)``.

    The flat parameter vector is ``[y0, theta_v..., theta_z...]``.
    """

    y0: float
    v_model: object
    z_model: object

    @property
    def index_map(self) -> dict:
        nv, nz = self.v_model.n_params, self.z_model.n_params
        return {"y0": slice(0, 1), "v": slice(1, 1 + nv), "z": slice(1 + nv, 1 + nv + nz)}

    def get_params(self) -> np.ndarray:
        return np.concatenate([[self.y0], self.v_model.get_params(), self.z_model.get_params()])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        idx = self.index_map
        if flat.size != idx["z"].stop:
            raise ValueError(f"expected {idx['z'].stop} parameters, got {flat.size}")
        self.y0 = float(flat[0])
        self.v_model.set_params(flat[idx["v"]])
        self.z_model.set_params(flat[idx["z"]])

    def copy(self) -> "TrialSolution":
        return TrialSolution(self.y0, self.v_model.copy(), self.z_model.copy())


def _check_measure(cset: CriterionSet, measure) -> None:
    if measure is None:
        return
    if TimeMeasure(measure) is not cset.measure:
        raise ValueError(f"set {cset.value} requires the {cset.measure.value} measure, got {TimeMeasure(measure).value}")


def _rows(instance: BsdeInstance):
    """Left-node times and states flattened to ``(M * N, ...)`` rows."""
    N = instance.grid.n_steps
    s = np.tile(instance.grid.nodes[:N], instance.M)
    X = instance.paths.states[:, :N].reshape(instance.M * N, -1)
    return s, X


def _z_values(instance: BsdeInstance, trial: TrialSolution, cset: CriterionSet, rows=None):
    M, N, d = instance.M, instance.grid.n_steps, instance.d
    if not cset.uses_z:
        return np.zeros((M, N, d))
    s, X = rows if rows is not None else _rows(instance)
    z = np.asarray(trial.z_model.forward(s, X))
    if z.shape != (M * N, d):
        raise ValueError(f"z model produced shape {z.shape[1:]}, expected ({d},)")
    return z.reshape(M, N, d)


def _sweep(instance: BsdeInstance, z) -> np.ndarray:
    grid = instance.grid
    inc = instance.generator.evaluate(z) * grid.dt - np.einsum("mkd,mkd->mk", z, instance.brownian.increments)
    Y = np.empty((instance.M, grid.n_steps + 1))
    Y[:, -1] = instance.xi
    Y[:, :-1] = instance.xi[:, None] + np.cumsum(inc[:, ::-1], axis=1)[:, ::-1]
    if not np.all(np.isfinite(Y)):
        raise DivergenceError("non-finite value in the backward sweep")
    return Y


def tilde_y(instance: BsdeInstance, trial: TrialSolution, cset) -> np.ndarray:
    """Anticipating process ``Ytilde`` at every node, shape ``(M, N + 1)``."""
    cset = CriterionSet.parse(cset)
    return _sweep(instance, _z_values(instance, trial, cset))


def _evaluate(instance, trial, cset, measure, want_grad):
    cset = CriterionSet.parse(cset)
    _check_measure(cset, measure)
    M, N = instance.M, instance.grid.n_steps
    dt = instance.grid.dt
    if cset is CriterionSet.B and M < 2:
        raise ValueError("set b needs at least two paths to centre by the batch mean")
    rows = _rows(instance)
    z = _z_values(instance, trial, cset, rows)
    Y = _sweep(instance, z)

    grad = np.zeros(trial.index_map["z"].stop) if want_grad else None
    dY = None  # d loss / d Ytilde_j, shape (M, N)
    if cset is CriterionSet.A:
        r = Y[:, 0] - trial.y0
        terms = r * r
        if want_grad:
            grad[0] = -2.0 * r.mean()
            dY0 = 2.0 * r / M
    elif cset is CriterionSet.B:
        r = Y[:, 0] - Y[:, 0].mean()
        terms = r * r * (M / (M - 1.0))
        if want_grad:
            dY0 = 2.0 * r / (M - 1.0)
    else:
        v = np.asarray(trial.v_model.forward(*rows)).reshape(M, N)
        e = Y[:, :N] - v
        terms = (e * e).sum(axis=1) * dt
        if want_grad:
            dY = 2.0 * e * dt / M
            grad[trial.index_map["v"]] = trial.v_model.param_grad(rows[0], rows[1], -dY.reshape(-1))
    value = float(terms.mean())
    if not np.isfinite(value):
        raise DivergenceError("non-finite criterion value")
    if not want_grad:
        return value, terms, None

    if cset.uses_z:
        # Ytilde_j depends on the step-k increment for every j <= k
        if dY is None:
            G = np.broadcast_to(dY0[:, None], (M, N))
        else:
            G = np.cumsum(dY, axis=1)
        dinc_dz = -instance.brownian.increments
        if not instance.generator.decoupled:
            dinc_dz = dinc_dz + instance.generator.coupling * dt
        upstream = G[:, :, None] * dinc_dz
        grad[trial.index_map["z"]] = trial.z_model.param_grad(rows[0], rows[1], upstream.reshape(M * N, -1))
    return value, terms, grad


def criterion_value(instance: BsdeInstance, trial: TrialSolution, cset, measure=None, return_stderr: bool = False):
    """Monte-Carlo criterion over the batch.

    Set b centres by the batch mean and applies the ``M / (M - 1)`` correction.
    With ``return_stderr`` the per-path standard error is returned as well.
    """
    value, terms, _ = _evaluate(instance, trial, cset, measure, want_grad=False)
    if return_stderr:
        return value, float(terms.std(ddof=1) / np.sqrt(terms.size))
    return value


def criterion_grad(instance: BsdeInstance, trial: TrialSolution, cset, measure=None) -> np.ndarray:
    """Exact gradient of :func:`criterion_value` in the flat trial parameters."""
    return _evaluate(instance, trial, cset, measure, want_grad=True)[2]


def criterion_value_and_grad(instance, trial, cset, measure=None):
    value, _, grad = _evaluate(instance, trial, cset, measure, want_grad=True)
    return value, grad


@dataclass
class OptConfig:
    lr_y0: float = 0.1
    lr_v: float = 1e-5
    lr_z: float = 1e-3
    momentum: float = 0.0
    nesterov: bool = False
    clip: float | None = None
    decay: float = 1.0
    steps: int = 200
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_y0, self.lr_v, self.lr_z) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.momentum < 0:
            raise ValueError("momentum must be non-negative")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip threshold must be positive")

    def with_(self, **changes) -> "OptConfig":
        return replace(self, **changes)


@dataclass
class NesterovSGD:
    """SGD with per-group rates, optional (Nesterov) momentum, norm clipping and decay.

    Update order per step: clip the full gradient's Euclidean norm, update the
    momentum buffer, step each group, then multiply every rate by ``decay``.
    """

    groups: dict
    momentum: float = 0.0
    nesterov: bool = False
    clip: float | None = None
    decay: float = 1.0
    _buf: np.ndarray | None = field(default=None, repr=False)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = np.array(grad, dtype=float)
        if self.clip is not None:
            norm = float(np.linalg.norm(g))
            coef = self.clip / (norm + 1e-6)
            if coef < 1.0:
                g *= coef
        if self.momentum:
            self._buf = g.copy() if self._buf is None else self.momentum * self._buf + g
            g = g + self.momentum * self._buf if self.nesterov else self._buf
        out = np.array(params, dtype=float)
        for sl, lr in self.groups.values():
            out[sl] -= lr * g[sl]
        self.groups = {k: (sl, lr * self.decay) for k, (sl, lr) in self.groups.items()}
        return out


def sgd_solve(
    instance_factory: Callable[[int], BsdeInstance],
    trial0: TrialSolution,
    cset,
    opt: OptConfig,
    callback: Callable | None = None,
):
    """Minimise a criterion with a fresh batch per step.

    ``instance_factory(seed)`` is called with ``derive_seed(opt.seed, step)``.
    ``callback(step, trial, loss)`` sees the parameters before each update.
    Returns the fitted trial (a copy) and the per-step training losses.
    """
    cset = CriterionSet.parse(cset)
    trial = trial0.copy()
    idx = trial.index_map
    sgd = NesterovSGD(
        {"y0": (idx["y0"], opt.lr_y0), "v": (idx["v"], opt.lr_v), "z": (idx["z"], opt.lr_z)},
        momentum=opt.momentum,
        nesterov=opt.nesterov,
        clip=opt.clip,
        decay=opt.decay,
    )
    history = []
    for step in range(opt.steps):
        inst = instance_factory(derive_seed(opt.seed, step))
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = criterion_value_and_grad(inst, trial, cset)
        except DivergenceError as exc:
            raise DivergenceError(f"step {step}: {exc}") from exc
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"step {step}: non-finite gradient")
        if callback is not None:
            callback(step, trial, loss)
        history.append(loss)
        trial.set_params(sgd.step(trial.get_params(), grad))
    return trial, np.array(history)


def write_history_csv(path, history, errors: dict | None = None) -> None:
    """Rows ``step, loss[, error columns]``; ``errors`` maps column -> per-step array."""
    errors = errors or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", *errors])
        for i, loss in enumerate(history):
            w.writerow([i, repr(float(loss)), *(repr(float(col[i])) for col in errors.values())])
