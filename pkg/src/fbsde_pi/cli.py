"""Command-line harness for the benchmark experiments.

Subcommands::

    fbsde-pi solve-bsde --example {1,2} --set {a,b,c,d}
    fbsde-pi run-pi --example {3,4} --subroutine {on,off} --set {a,b,c,d}
    fbsde-pi oracle [theta | v-star | direct] ...

Every run writes a CSV, a JSON summary and a JSON manifest into its own
directory below ``--out`` (default ``$FBSDE_PI_OUTPUT`` or ``./runs``).
Settings come from protocol defaults, then an optional ``key = value`` file
given with ``--config``, then flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import __version__
from .approximators import QuadGradModel, QuadValueModel
from .bml import (
    CriterionSet,
    OptConfig,
    TrialSolution,
    build_offpolicy_instance,
    build_onpolicy_instance,
    sgd_solve,
)
from .gpi import PIConfig, run_gpi, write_manifest
from .oracles import direct_terminal_expectation, example1_oracle, example2_oracle, hopf_cole_v_star
from .paths import DivergenceError, derive_seed, integrate_sde, make_grid, sample_brownian
from .problems import LinearPolicy, ZeroPolicy, bsde_example_problem, evaluation_seed, lq_log_problem

OUTPUT_ENV = "FBSDE_PI_OUTPUT"

BSDE_COLUMNS = ["repeat", "step", "loss", "err_theta_y", "err_theta_z", "err_y0"]
PI_COLUMNS = ["repeat", "iteration", "cost", "cost_stderr", "epsilon"]

EXIT_USAGE = 2
EXIT_DIVERGED = 3

_VSTAR_TAG = 0x5747


@dataclass
class RunConfig:
    """Flat run settings; :meth:`for_experiment` fills in the protocol defaults."""

    experiment: str = "example1"
    cset: str = "a"
    subroutine: str = "off"
    repeats: int = 10
    seed: int = 0
    out_dir: str = "runs"
    n: int = 100
    T: float = 1.0
    n_steps: int = 100
    # optimiser
    steps: int = 200
    batch_size: int = 16
    lr_y0: float = 0.1
    lr_v: float = 1e-5
    lr_z: float = 1e-3
    momentum: float = 0.0
    nesterov: bool = False
    clip: float | None = None
    decay: float = 1.0
    # BSDE benchmarks
    b0: float = -0.1
    init_y0: float = 1.0
    init_theta_y: float = -1.0
    init_theta_z: float = -1.0
    # policy iteration
    iterations: int = 9
    hidden: int = 16
    out_scale: float = 1.0
    warm_start: bool = True
    init_gain: float = -0.1
    sigma0: float = float(np.sqrt(2.0))
    bhat0: float = 1.0
    a_max: float = 100.0
    eval_batch: int = 4096
    eps_batch: int = 256
    vstar_samples: int = 204800
    jobs: int = 1

    @classmethod
    def for_experiment(cls, experiment: str) -> "RunConfig":
        if experiment in ("example1", "example2", "custom"):
            return cls(experiment=experiment)
        if experiment in ("example3", "example4"):
            return cls(
                experiment=experiment,
                repeats=5,
                steps=75,
                lr_y0=0.5,
                lr_v=0.1,
                lr_z=0.1,
                momentum=1e-3,
                nesterov=True,
                clip=10.0,
                decay=0.99,
                sigma0=20.0 if experiment == "example4" else float(np.sqrt(2.0)),
            )
        raise ValueError(f"unknown experiment {experiment!r}")

    def update(self, values: dict) -> "RunConfig":
        """Return a copy with string or typed values coerced to field types."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key == "set":
                key = "cset"
            if key not in types:
                raise ValueError(f"unknown setting {key!r}")
            changes[key] = _coerce(types[key], raw)
        out = replace(self, **changes)
        out.cset = CriterionSet.parse(out.cset).value
        return out

    def opt_config(self, seed: int) -> OptConfig:
        return OptConfig(
            lr_y0=self.lr_y0,
            lr_v=self.lr_v,
            lr_z=self.lr_z,
            momentum=self.momentum,
            nesterov=self.nesterov,
            clip=self.clip,
            decay=self.decay,
            steps=self.steps,
            batch_size=self.batch_size,
            seed=seed,
        )

    def pi_config(self, repeat: int) -> PIConfig:
        seed = derive_seed(self.seed, repeat)
        return PIConfig(
            subroutine=self.subroutine,
            cset=self.cset,
            n_iterations=self.iterations,
            init_gain=self.init_gain,
            behavior_gain=self.init_gain,
            grid=make_grid(0.0, self.T, self.n_steps),
            opt=self.opt_config(0),
            hidden=self.hidden,
            out_scale=self.out_scale,
            eval_batch=self.eval_batch,
            eps_batch=self.eps_batch,
            seed=seed,
            eval_seed=evaluation_seed(self.seed),
            warm_start=self.warm_start,
        )

    def run_name(self) -> str:
        if self.experiment in ("example3", "example4"):
            return f"{self.experiment}_{self.subroutine}_set{self.cset}_seed{self.seed}"
        return f"{self.experiment}_set{self.cset}_seed{self.seed}"


def _coerce(typ, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    typ = str(typ)
    if "None" in typ and text.lower() in ("none", ""):
        return None
    if typ.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ.startswith("int"):
        return int(text)
    if typ.startswith("float"):
        return float(text)
    return text


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


# --------------------------------------------------------------------------
# solve-bsde


def _bsde_setup(cfg: RunConfig):
    grid = make_grid(0.0, cfg.T, cfg.n_steps)
    n = cfg.n
    behavior = ZeroPolicy(n)
    x0 = np.zeros(n)
    if cfg.experiment == "example1":
        problem = bsde_example_problem(n, 0.0)
        oracle = example1_oracle(n)

        def factory(seed):
            batch = sample_brownian(grid, n, cfg.batch_size, seed)
            return build_onpolicy_instance(problem, behavior, integrate_sde(problem, behavior, x0, batch), batch)

    else:
        # dX = -b0 X ds + dW; the generator's <b0 X, Z> term is the coupling of
        # the target a = b0 x against the zero behaviour
        problem = bsde_example_problem(n, cfg.b0)
        oracle = example2_oracle(n, cfg.b0)
        target = LinearPolicy(cfg.b0)

        def factory(seed):
            batch = sample_brownian(grid, n, cfg.batch_size, seed)
            paths = integrate_sde(problem, behavior, x0, batch)
            return build_offpolicy_instance(problem, target, behavior, paths, batch)

    return factory, oracle


def _errors(trial: TrialSolution, oracle) -> tuple:
    return (
        abs(float(trial.v_model.theta[0]) - oracle.theta_y),
        abs(float(trial.z_model.theta[0]) - oracle.theta_z),
        abs(trial.y0 - oracle.y0),
    )


def bsde_repeat(cfg: RunConfig, repeat: int) -> dict:
    """One independent fit; rows hold the errors before each step's update."""
    factory, oracle = _bsde_setup(cfg)
    trial0 = TrialSolution(cfg.init_y0, QuadValueModel(cfg.init_theta_y), QuadGradModel(cfg.init_theta_z, cfg.n))
    rows = []

    def record(step, trial, loss):
        rows.append([repeat, step, repr(float(loss)), *(repr(e) for e in _errors(trial, oracle))])

    out = {"repeat": repeat, "rows": rows, "diverged": None}
    try:
        fitted, _ = sgd_solve(factory, trial0, cfg.cset, cfg.opt_config(derive_seed(cfg.seed, repeat)), record)
    except DivergenceError as exc:
        out["diverged"] = str(exc)
        return out
    if cfg.steps == 0:
        rows.append([repeat, 0, "", *(repr(e) for e in _errors(trial0, oracle))])
    out["initial"] = _errors(trial0, oracle)
    out["final"] = _errors(fitted, oracle)
    out["params"] = {"y0": fitted.y0, "theta_y": float(fitted.v_model.theta[0]), "theta_z": float(fitted.z_model.theta[0])}
    return out


def _map_repeats(fn, cfg: RunConfig):
    if cfg.jobs > 1 and cfg.repeats > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(fn, [cfg] * cfg.repeats, range(cfg.repeats)))
    return [fn(cfg, r) for r in range(cfg.repeats)]


def _run_dir(cfg: RunConfig) -> str:
    path = os.path.join(cfg.out_dir, cfg.run_name())
    os.makedirs(path, exist_ok=True)
    return path


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _manifest(cfg: RunConfig, command: str) -> dict:
    return {
        "command": command,
        "config": asdict(cfg),
        "repeat_seeds": [derive_seed(cfg.seed, r) for r in range(cfg.repeats)],
    }


def solve_bsde(cfg: RunConfig) -> tuple[int, dict]:
    """Run every repeat and write ``history.csv``, ``summary.json``, ``manifest.json``."""
    if cfg.experiment not in ("example1", "example2"):
        raise ValueError("solve-bsde runs example1 or example2")
    run_dir = _run_dir(cfg)
    write_manifest(os.path.join(run_dir, "manifest.json"), _manifest(cfg, "solve-bsde"))
    tic = time.perf_counter()
    results = _map_repeats(bsde_repeat, cfg)
    rows = [row for res in results for row in res["rows"]]
    _write_rows(os.path.join(run_dir, "history.csv"), BSDE_COLUMNS, rows)

    failed = [res for res in results if res["diverged"]]
    summary = {"experiment": cfg.experiment, "set": cfg.cset, "repeats": cfg.repeats, "run_dir": run_dir}
    if failed:
        summary["diverged"] = {res["repeat"]: res["diverged"] for res in failed}
    ok = [res for res in results if not res["diverged"]]
    if ok:
        final = np.array([res["final"] for res in ok])
        init = np.array(ok[0]["initial"])
        for i, name in enumerate(("theta_y", "theta_z", "y0")):
            summary[f"err_{name}"] = {
                "initial": float(init[i]),
                "final_mean": float(final[:, i].mean()),
                "final_std": float(final[:, i].std(ddof=1)) if len(ok) > 1 else 0.0,
            }
        summary["final_params"] = [res["params"] for res in ok]
    summary["seconds"] = time.perf_counter() - tic
    _dump_json(os.path.join(run_dir, "summary.json"), summary)
    return (EXIT_DIVERGED if failed else 0), summary


# --------------------------------------------------------------------------
# run-pi


def pi_problem(cfg: RunConfig):
    return lq_log_problem(cfg.sigma0, cfg.bhat0, cfg.a_max, cfg.n)


def pi_repeat(cfg: RunConfig, repeat: int):
    return run_gpi(pi_problem(cfg), cfg.pi_config(repeat))


def v_star_reference(cfg: RunConfig) -> tuple[float, float]:
    return hopf_cole_v_star(0.0, 0.0, cfg.sigma0, cfg.bhat0, cfg.n, cfg.vstar_samples, derive_seed(cfg.seed, _VSTAR_TAG), cfg.T)


def run_pi(cfg: RunConfig) -> tuple[int, dict]:
    """Policy iteration repeats; writes ``costs.csv``, ``summary.json``, ``manifest.json``."""
    if cfg.experiment not in ("example3", "example4"):
        raise ValueError("run-pi runs example3 or example4")
    cfg.pi_config(0)  # validates the (subroutine, set) pair before any work
    run_dir = _run_dir(cfg)
    write_manifest(os.path.join(run_dir, "manifest.json"), _manifest(cfg, "run-pi"))
    tic = time.perf_counter()
    v_star, v_star_se = v_star_reference(cfg)
    results = _map_repeats(pi_repeat, cfg)

    rows = []
    for r, res in enumerate(results):
        for i, c, se, eps in res.rows():
            rows.append([r, i, repr(float(c)), repr(float(se)), "" if eps is None else repr(float(eps))])
    _write_rows(os.path.join(run_dir, "costs.csv"), PI_COLUMNS, rows)

    errors = [np.abs(np.asarray(res.costs) - v_star) for res in results]
    finals = np.array([e[-1] for e in errors])
    complete = [e for res, e in zip(results, errors) if not res.failed]
    summary = {
        "experiment": cfg.experiment,
        "subroutine": cfg.subroutine,
        "set": cfg.cset,
        "repeats": cfg.repeats,
        "run_dir": run_dir,
        "v_star": v_star,
        "v_star_stderr": v_star_se,
        "v_star_samples": cfg.vstar_samples,
        "initial_error": float(errors[0][0]),
        "final_error": finals.tolist(),
        "final_error_mean": float(finals.mean()),
        "mean_error_by_iteration": np.mean(complete, axis=0).tolist() if complete else [],
        "failed": {r: res.message for r, res in enumerate(results) if res.failed},
        "seconds": time.perf_counter() - tic,
    }
    _dump_json(os.path.join(run_dir, "summary.json"), summary)
    return (EXIT_DIVERGED if summary["failed"] else 0), summary


def _dump_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# --------------------------------------------------------------------------
# argument handling

_OVERRIDES = {
    "set": "cset",
    "subroutine": "subroutine",
    "repeats": "repeats",
    "seed": "seed",
    "out": "out_dir",
    "steps": "steps",
    "batch": "batch_size",
    "iterations": "iterations",
    "eval_batch": "eval_batch",
    "vstar_samples": "vstar_samples",
    "jobs": "jobs",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbsde-pi", description="BSDE-based policy evaluation and policy iteration.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--set", choices=list("abcd"), help="criterion set")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--repeats", type=int)
        sp.add_argument("--steps", type=int, help="SGD steps per fit")
        sp.add_argument("--batch", type=int, help="paths per SGD step")
        sp.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./runs)")
        sp.add_argument("--config", help="plain-text file of 'key = value' settings; flags win")
        sp.add_argument("--jobs", type=int, help="worker processes for repeats")

    sb = sub.add_parser("solve-bsde", help="fit the benchmark BSDEs with quadratic trials")
    sb.add_argument("--example", type=int, choices=[1, 2], default=1)
    common(sb)

    sp = sub.add_parser("run-pi", help="policy iteration on the LQ-log control problem")
    sp.add_argument("--example", type=int, choices=[3, 4], default=3)
    sp.add_argument("--subroutine", choices=["on", "off"])
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--eval-batch", dest="eval_batch", type=int)
    sp.add_argument("--vstar-samples", dest="vstar_samples", type=int)
    common(sp)

    so = sub.add_parser("oracle", help="print reference values as JSON")
    so.add_argument("target", nargs="?", choices=["theta", "v-star", "direct"], default="theta")
    so.add_argument("--example", type=int, choices=[1, 2, 3, 4], default=1)
    so.add_argument("--n", type=int, default=100)
    so.add_argument("--b0", type=float, default=-0.1)
    so.add_argument("--sigma0", type=float)
    so.add_argument("--bhat0", type=float, default=1.0)
    so.add_argument("--samples", type=int, default=12800)
    so.add_argument("--seed", type=int, default=0)
    so.add_argument("--t", type=float, default=0.0)
    so.add_argument("--x", type=float, default=0.0)
    return p


def config_from_args(args) -> RunConfig:
    cfg = RunConfig.for_experiment(f"example{args.example}")
    cfg = replace(cfg, out_dir=os.environ.get(OUTPUT_ENV, cfg.out_dir))
    if getattr(args, "config", None):
        cfg = cfg.update(read_config_file(args.config))
    flags = {dest: getattr(args, name) for name, dest in _OVERRIDES.items() if getattr(args, name, None) is not None}
    return cfg.update(flags)


def _cmd_oracle(args) -> int:
    if args.target == "theta":
        if args.example not in (1, 2):
            raise ValueError("theta oracles exist for examples 1 and 2; use 'oracle v-star' for 3 and 4")
        o = example1_oracle(args.n) if args.example == 1 else example2_oracle(args.n, args.b0)
        print(json.dumps({"example": args.example, "n": args.n, "theta_y": o.theta_y, "theta_z": o.theta_z, "y0": o.y0}))
        return 0
    sigma0 = args.sigma0
    if sigma0 is None:
        sigma0 = 20.0 if args.example == 4 else float(np.sqrt(2.0))
    if args.target == "direct":
        value, se = direct_terminal_expectation(args.t, args.x, sigma0, args.n, args.samples, args.seed)
    else:
        if args.bhat0 == 0:
            raise ValueError("bhat0 = 0 has no log-expectation form; the limit is 'oracle direct' (E of the terminal cost)")
        value, se = hopf_cole_v_star(args.t, args.x, sigma0, args.bhat0, args.n, args.samples, args.seed)
    print(json.dumps({"target": args.target, "sigma0": sigma0, "bhat0": args.bhat0, "n": args.n,
                      "samples": args.samples, "seed": args.seed, "value": value, "stderr": se}))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "oracle":
            return _cmd_oracle(args)
        cfg = config_from_args(args)
        if args.command == "solve-bsde":
            code, summary = solve_bsde(cfg)
        else:
            code, summary = run_pi(cfg)
    except ValueError as exc:
        print(f"fbsde-pi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(summary, sort_keys=True, default=_jsonable))
    return code


if __name__ == "__main__":
    sys.exit(main())
