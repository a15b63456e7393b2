"""Generalised policy iteration driven by BSDE policy evaluation.

The on-policy step re-simulates the forward process under the current policy
at every SGD step. The off-policy step fits the same criterion on paths of a
fixed behaviour policy; those paths are simulated once per seed and reused for
every iteration.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .approximators import MlpModel
from .bml import (
    CriterionSet,
    OptConfig,
    TrialSolution,
    build_offpolicy_instance,
    build_onpolicy_instance,
    criterion_value,
    sgd_solve,
)
from .paths import DivergenceError, TimeGrid, derive_seed, integrate_sde, make_grid, sample_brownian
from .problems import ControlProblem, LinearPolicy, improved_policy, mc_policy_cost

__all__ = [
    "PIConfig",
    "PIResult",
    "BehaviorBank",
    "initial_trial",
    "z_function",
    "on_policy_step",
    "off_policy_step",
    "run_gpi",
]

# stream tags under the master seed
_TRAIN_ON, _EPS_ON, _TRAIN_OFF, _EPS_OFF, _EVAL, _INIT_V, _INIT_Z = range(1, 8)


@dataclass
class PIConfig:
    subroutine: str = "off"
    cset: CriterionSet = CriterionSet.A
    n_iterations: int = 9
    init_gain: float = -0.1
    behavior_gain: float = -0.1
    t: float = 0.0
    x: float = 0.0
    grid: TimeGrid = field(default_factory=lambda: make_grid(0.0, 1.0, 100))
    opt: OptConfig = field(
        default_factory=lambda: OptConfig(
            lr_y0=0.5, lr_v=0.1, lr_z=0.1, momentum=1e-3, nesterov=True, clip=10.0, decay=0.99, steps=75, batch_size=16
        )
    )
    hidden: int = 16
    out_scale: float = 1.0
    eval_batch: int = 4096
    eps_batch: int = 256
    seed: int = 0
    eval_seed: int | None = None
    warm_start: bool = True

    def __post_init__(self):
        self.cset = CriterionSet.parse(self.cset)
        if self.subroutine not in ("on", "off"):
            raise ValueError(f"subroutine must be 'on' or 'off', got {self.subroutine!r}")
        if self.subroutine == "off" and self.cset is CriterionSet.C:
            raise ValueError(
                "set c has no off-policy variant: the off-policy generator couples z and v, "
                "so fitting v with z = 0 does not evaluate the target policy"
            )
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be non-negative")

    @property
    def evaluation_seed(self) -> int:
        return derive_seed(self.seed, _EVAL) if self.eval_seed is None else self.eval_seed

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cset"] = self.cset.value
        out["grid"] = {"t0": self.grid.t0, "T": self.grid.T, "n_steps": self.grid.n_steps}
        out["evaluation_seed"] = self.evaluation_seed
        return out


@dataclass
class PIResult:
    costs: list = field(default_factory=list)
    cost_stderr: list = field(default_factory=list)
    epsilons: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    failed: bool = False
    message: str = ""

    def rows(self):
        """``(iteration, cost, cost_stderr, epsilon)``; epsilon of the fit that produced the policy."""
        for i, (c, se) in enumerate(zip(self.costs, self.cost_stderr)):
            eps = self.epsilons[i - 1] if i >= 1 else None
            yield i, c, se, eps

    def write_csv(self, path, repeat: int | None = None, header: bool = True) -> None:
        with open(path, "a" if not header else "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["iteration", "cost", "cost_stderr", "epsilon"]
            if header:
                w.writerow((["repeat"] if repeat is not None else []) + cols)
            for i, c, se, eps in self.rows():
                row = [i, repr(float(c)), repr(float(se)), "" if eps is None else repr(float(eps))]
                w.writerow(([repeat] if repeat is not None else []) + row)


def initial_trial(problem: ControlProblem, cfg: PIConfig) -> TrialSolution:
    return TrialSolution(
        0.0,
        MlpModel(problem.n, cfg.hidden, 1, seed=derive_seed(cfg.seed, _INIT_V), out_scale=cfg.out_scale),
        MlpModel(
            problem.n, cfg.hidden, problem.d, seed=derive_seed(cfg.seed, _INIT_Z), scalar=False, out_scale=cfg.out_scale
        ),
    )


def z_function(problem: ControlProblem, trial: TrialSolution, cset):
    """Gradient process used for policy improvement.

    Set c never fits ``z``, so ``sigma^T d/dx v`` of the fitted value model is
    used instead.
    """
    if CriterionSet.parse(cset) is CriterionSet.C:
        v = trial.v_model.copy()
        return lambda s, x: problem.diffuse_t(s, x, v.input_grad(s, x))
    z = trial.z_model.copy()
    return lambda s, x: z.forward(s, x)


def on_policy_step(problem, policy, t, x, cfg: PIConfig, trial0=None, iteration: int = 0):
    """One on-policy evaluation/improvement; returns ``(new_policy, epsilon, trial)``."""
    grid = cfg.grid
    if not np.isclose(grid.t0, t):
        raise ValueError("grid must start at t")
    M = cfg.opt.batch_size

    def make(seed, size):
        batch = sample_brownian(grid, problem.d, size, seed)
        return build_onpolicy_instance(problem, policy, integrate_sde(problem, policy, x, batch), batch)

    trial0 = initial_trial(problem, cfg) if trial0 is None else trial0
    opt = cfg.opt.with_(seed=derive_seed(cfg.seed, _TRAIN_ON, iteration))
    trial, _ = sgd_solve(lambda seed: make(seed, M), trial0, cfg.cset, opt)
    eps = criterion_value(make(derive_seed(cfg.seed, _EPS_ON, iteration), cfg.eps_batch), trial, cfg.cset)
    new = improved_policy(problem, z_function(problem, trial, cfg.cset), tag=f"improved[{iteration + 1}]")
    return new, eps, trial


class BehaviorBank:
    """Memoised behaviour-policy paths, one batch per seed."""

    def __init__(self, problem, behavior, x, grid: TimeGrid):
        self.problem = problem
        self.behavior = behavior
        self.x = x
        self.grid = grid
        self._cache: dict = {}

    def get(self, seed: int, size: int):
        key = (seed, size)
        if key not in self._cache:
            batch = sample_brownian(self.grid, self.problem.d, size, seed)
            self._cache[key] = (batch, integrate_sde(self.problem, self.behavior, self.x, batch))
        return self._cache[key]

    def instance(self, policy, seed: int, size: int):
        batch, paths = self.get(seed, size)
        return build_offpolicy_instance(self.problem, policy, self.behavior, paths, batch)


def off_policy_step(problem, policy, behavior, bank: BehaviorBank, cfg: PIConfig, trial0=None, iteration: int = 0):
    """One off-policy evaluation/improvement on the cached behaviour paths."""
    if cfg.cset is CriterionSet.C:
        raise ValueError("set c is not supported off-policy")
    trial0 = initial_trial(problem, cfg) if trial0 is None else trial0
    opt = cfg.opt.with_(seed=derive_seed(cfg.seed, _TRAIN_OFF))
    M = opt.batch_size
    trial, _ = sgd_solve(lambda seed: bank.instance(policy, seed, M), trial0, cfg.cset, opt)
    eps = criterion_value(bank.instance(policy, derive_seed(cfg.seed, _EPS_OFF), cfg.eps_batch), trial, cfg.cset)
    new = improved_policy(problem, z_function(problem, trial, cfg.cset), tag=f"improved[{iteration + 1}]")
    return new, eps, trial


def run_gpi(problem: ControlProblem, cfg: PIConfig, policy0=None) -> PIResult:
    """Iterate evaluation and improvement ``cfg.n_iterations`` times.

    Costs of every policy are estimated at ``(t, x)`` with ``cfg.eval_batch``
    paths from the common evaluation stream. On divergence the partial result
    is returned with ``failed`` set.
    """
    result = PIResult()
    policy = LinearPolicy(cfg.init_gain, problem.a_max) if policy0 is None else policy0
    eval_seed = cfg.evaluation_seed
    noise = {}

    def record_cost(pol):
        c, se = mc_policy_cost(
            problem, pol, cfg.t, cfg.x, cfg.grid, cfg.eval_batch, eval_seed, return_stderr=True, noise_cache=noise
        )
        result.costs.append(c)
        result.cost_stderr.append(se)

    trial0 = initial_trial(problem, cfg)
    trial = trial0
    bank = None
    if cfg.subroutine == "off":
        behavior = LinearPolicy(cfg.behavior_gain, problem.a_max)
        bank = BehaviorBank(problem, behavior, cfg.x, cfg.grid)
    try:
        record_cost(policy)
        for it in range(cfg.n_iterations):
            tic = time.perf_counter()
            if bank is None:
                policy, eps, fitted = on_policy_step(problem, policy, cfg.t, cfg.x, cfg, trial, it)
            else:
                policy, eps, fitted = off_policy_step(problem, policy, bank.behavior, bank, cfg, trial, it)
            result.epsilons.append(eps)
            result.snapshots.append(fitted.get_params())
            trial = fitted if cfg.warm_start else trial0
            record_cost(policy)
            result.timings.append(time.perf_counter() - tic)
    except (DivergenceError, FloatingPointError) as exc:
        result.failed = True
        result.message = str(exc)
    return result


def write_manifest(path, payload: dict) -> None:
    import platform

    from . import __version__

    payload = dict(payload)
    payload.setdefault("versions", {"fbsde_pi": __version__, "numpy": np.__version__, "python": platform.python_version()})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, CriterionSet):
        return obj.value
    raise TypeError(f"cannot serialise {type(obj).__name__}")
