"""Acceptance criteria, each run at its stated tolerance and time budget.

Every criterion writes its measurements as CSV into its own directory; the
determinism criterion reruns criteria 1-8 and compares those files byte for
byte. Seeds are fixed up front.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from fbsde_pi import (
    CriterionSet,
    LinearPolicy,
    MlpModel,
    PIConfig,
    QuadGradModel,
    QuadValueModel,
    TrialSolution,
    ZeroPolicy,
    bsde_example_problem,
    build_offpolicy_instance,
    build_onpolicy_instance,
    criterion_grad,
    criterion_value,
    fd_grad,
    integrate_sde,
    lq_log_problem,
    make_grid,
    run_gpi,
    sample_brownian,
    tilde_y,
)
from fbsde_pi.cli import RunConfig, run_pi, solve_bsde
from fbsde_pi.oracles import closed_form_criterion, optimal_value_1d
from fbsde_pi.paths import derive_seed

pytestmark = pytest.mark.acceptance

N = 100
GRID = make_grid(0.0, 1.0, 100)
BUDGET = {1: 60, 2: 60, 3: 60, 4: 300, 5: 300, 6: 120, 7: 1800, 8: 300}


@dataclass
class Verdict:
    passed: bool
    detail: str


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(x):
    return repr(float(x))


def _example1_chunks(M, seed, chunk=1000):
    problem = bsde_example_problem(N, 0.0)
    zero = ZeroPolicy(N)
    for lo in range(0, M, chunk):
        batch = sample_brownian(GRID, N, min(chunk, M - lo), seed, start=lo)
        yield build_onpolicy_instance(problem, zero, integrate_sde(problem, zero, np.zeros(N), batch), batch)


# -- 1 ----------------------------------------------------------------------


def criterion_1(out: Path) -> Verdict:
    M = 10_000
    thetas = np.random.default_rng(101).uniform(-1.0, 1.0, 5)
    rows, ok = [], True
    for i, th in enumerate(thetas):
        trial = TrialSolution(0.0, QuadValueModel(0.0), QuadGradModel(th, N))
        y0 = np.concatenate([tilde_y(inst, trial, "b")[:, 0] for inst in _example1_chunks(M, derive_seed(1, i))])
        r = y0 - y0.mean()
        terms = r * r * (M / (M - 1.0))
        value, se = terms.mean(), terms.std(ddof=1) / np.sqrt(M)
        closed = closed_form_criterion(1, "b", n=N, theta_z=th)["total"]
        passed = abs(value - closed) <= 3.0 * se + 0.02 * closed
        ok &= bool(passed)
        rows.append([_f(th), _f(value), _f(se), _f(closed), int(passed)])
    _write_csv(out / "c1.csv", ["theta_z", "mc", "stderr", "closed_form", "pass"], rows)
    worst = max(abs(float(r[1]) - float(r[3])) / (3 * float(r[2]) + 0.02 * float(r[3])) for r in rows)
    return Verdict(ok, f"5 theta_z, worst |mc - closed| / (3 se + 2%) = {worst:.3f}")


# -- 2 ----------------------------------------------------------------------


def _set_d_value(theta_y, theta_z, M=10_000, seed=None):
    trial = TrialSolution(0.0, QuadValueModel(theta_y), QuadGradModel(theta_z, N))
    vals, ses = [], []
    for inst in _example1_chunks(M, seed):
        v, se = criterion_value(inst, trial, "d", return_stderr=True)
        vals.append(v)
        ses.append(se)
    return float(np.mean(vals)), float(np.sqrt(np.sum(np.square(ses))) / len(ses))


def criterion_2(out: Path) -> Verdict:
    seed = derive_seed(2)
    floor, floor_se = _set_d_value(1.0 / N, 1.0 / N, seed=seed)
    target = 4.0 / (3.0 * N)
    floor_ok = abs(floor - target) <= 0.10 * target
    rows = [["floor", _f(1.0 / N), _f(floor), _f(floor_se), _f(target), int(floor_ok)]]
    inc_ok = True
    for th in (0.0, -1.0):
        value, se = _set_d_value(th, 1.0 / N, seed=seed)
        inc = value - floor
        want = (th - 1.0 / N) ** 2 * N * (N + 2) / 3.0
        passed = abs(inc - want) <= 0.05 * want
        inc_ok &= bool(passed)
        rows.append(["increment", _f(th), _f(inc), _f(se), _f(want), int(passed)])
    _write_csv(out / "c2.csv", ["quantity", "theta_y", "measured", "stderr", "target", "pass"], rows)
    rel = [abs(float(r[2]) - float(r[4])) / float(r[4]) for r in rows]
    detail = (
        f"floor {floor:.3e} vs 4/(3n) = {target:.3e} (rel err {rel[0]:.2f}, tol 0.10); "
        f"increments rel err {rel[1]:.4f}, {rel[2]:.4f} (tol 0.05)"
    )
    return Verdict(bool(floor_ok and inc_ok), detail)


# -- 3 ----------------------------------------------------------------------


def _small_instance(kind, seed, n=3, M=5):
    grid = make_grid(0.0, 1.0, 6)
    batch = sample_brownian(grid, n, M, seed)
    if kind == "on":
        problem, policy = bsde_example_problem(n, 0.3), ZeroPolicy(n)
        return build_onpolicy_instance(problem, policy, integrate_sde(problem, policy, np.zeros(n), batch), batch)
    problem = lq_log_problem(1.3, 0.7, 100.0, n)
    target, behavior = LinearPolicy(-0.4), LinearPolicy(0.2)
    paths = integrate_sde(problem, behavior, 0.5 * np.ones(n), batch, keep_controls=True)
    return build_offpolicy_instance(problem, target, behavior, paths, batch)


def _random_trial(model, rng, n=3):
    if model == "quad":
        return TrialSolution(rng.normal(), QuadValueModel(rng.normal()), QuadGradModel(rng.normal(), n))
    v = MlpModel(n, 4, 1, seed=int(rng.integers(1 << 31)))
    z = MlpModel(n, 4, n, seed=int(rng.integers(1 << 31)))
    return TrialSolution(rng.normal(), v, z)


def criterion_3(out: Path) -> Verdict:
    rng = np.random.default_rng(303)
    rows, worst = [], 0.0
    for cset in CriterionSet:
        for model in ("quad", "mlp"):
            for rep in range(3):
                kind = ("on", "off")[rep % 2]
                inst = _small_instance(kind, derive_seed(3, len(rows)))
                trial = _random_trial(model, rng)
                probe = trial.copy()

                def loss(p):
                    probe.set_params(p)
                    return criterion_value(inst, probe, cset)

                g = criterion_grad(inst, trial, cset)
                g_fd = fd_grad(loss, trial.get_params())
                rel = float(np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-12))
                worst = max(worst, rel)
                rows.append([cset.value, model, kind, rep, _f(rel)])
    _write_csv(out / "c3.csv", ["set", "model", "instance", "rep", "rel_err"], rows)
    return Verdict(worst < 1e-5, f"{len(rows)} configurations, worst relative error {worst:.2e} (tol 1e-5)")


# -- 4, 5 -------------------------------------------------------------------

_TRAINED = {"a": ("theta_z", "y0"), "b": ("theta_z",), "c": ("theta_y",), "d": ("theta_y", "theta_z")}


def _criterion_bsde(example: int, out: Path) -> Verdict:
    ok, parts = True, []
    for cset in "abcd":
        cfg = RunConfig.for_experiment(f"example{example}").update({"cset": cset, "seed": 0, "out_dir": str(out)})
        code, summary = solve_bsde(cfg)
        if code != 0:
            return Verdict(False, f"set {cset} diverged: {summary.get('diverged')}")
        star = {"theta_y": 1.0 / N, "theta_z": 1.0 / N, "y0": 0.0}
        for name in _TRAINED[cset]:
            init = summary[f"err_{name}"]["initial"]
            finals = [abs(p[name] - star[name]) for p in summary["final_params"]]
            if not all(f < init for f in finals):
                ok = False
                parts.append(f"{cset}:{name} not decreasing in every repeat")
        ez = summary["err_theta_z"]
        ey = summary["err_theta_y"]
        if cset in "abd":
            ok &= ez["final_mean"] < 0.1 * ez["initial"]
            parts.append(f"{cset}: |dtheta_z| {ez['final_mean']:.2e}")
        if cset in "cd":
            ok &= ey["final_mean"] < 0.5 * ey["initial"]
            parts.append(f"{cset}: |dtheta_y| {ey['final_mean']:.3f}")
    return Verdict(bool(ok), "; ".join(parts) + " (initial errors 1.01)")


def criterion_4(out: Path) -> Verdict:
    return _criterion_bsde(1, out)


def criterion_5(out: Path) -> Verdict:
    return _criterion_bsde(2, out)


# -- 6 ----------------------------------------------------------------------

P1 = lq_log_problem(np.sqrt(2.0), 1.0, 100.0, 1)


def criterion_6(out: Path) -> Verdict:
    rows, ok, parts = [], True, []
    base = PIConfig().opt.with_(steps=2000)
    for i, cset in enumerate("abd"):
        costs = {}
        for sub in ("on", "off"):
            cfg = PIConfig(subroutine=sub, cset=cset, n_iterations=1, opt=base, eval_batch=4096, seed=derive_seed(6, i))
            res = run_gpi(P1, cfg)
            costs[sub] = (res.costs[1], res.cost_stderr[1], res.epsilons[0])
        (con, son, eon), (coff, soff, eoff) = costs["on"], costs["off"]
        tol = 3.0 * np.hypot(son, soff)
        passed = abs(con - coff) <= tol
        ok &= bool(passed)
        rows.append([cset, _f(con), _f(son), _f(eon), _f(coff), _f(soff), _f(eoff), int(passed)])
        parts.append(f"{cset}: |on - off| {abs(con - coff):.4f} <= {tol:.4f}")
    _write_csv(out / "c6.csv", ["set", "cost_on", "se_on", "eps_on", "cost_off", "se_off", "eps_off", "pass"], rows)
    return Verdict(bool(ok), "; ".join(parts))


# -- 7 ----------------------------------------------------------------------

PI_COMBOS = [("on", "a"), ("on", "b"), ("on", "c"), ("on", "d"), ("off", "a"), ("off", "b"), ("off", "d")]


def criterion_7(out: Path) -> Verdict:
    ok, parts, rows = True, [], []
    for sub, cset in PI_COMBOS:
        cfg = RunConfig.for_experiment("example3").update(
            {"subroutine": sub, "cset": cset, "seed": 0, "out_dir": str(out)}
        )
        _, summary = run_pi(cfg)
        init, final = summary["initial_error"], summary["final_error_mean"]
        passed = final < 0.5 * init and not summary["failed"]
        ok &= bool(passed)
        rows.append([sub, cset, _f(summary["v_star"]), _f(summary["v_star_stderr"]), _f(init), _f(final), int(passed)])
        parts.append(f"{sub}/{cset} {final:.3f}")
    _write_csv(out / "c7.csv", ["subroutine", "set", "v_star", "v_star_se", "initial_err", "final_err_mean", "pass"], rows)
    init = float(rows[0][4])
    return Verdict(bool(ok), f"bar {0.5 * init:.3f} (initial {init:.3f}); mean final: " + ", ".join(parts))


# -- 8 ----------------------------------------------------------------------


def criterion_8(out: Path) -> Verdict:
    v_star = float(optimal_value_1d(np.sqrt(2.0), 1.0, 0.0, 0.0)[0])
    ladder = (300, 75, 15)
    stats, rows = [], []
    for steps in ladder:
        errs, epss = [], []
        for s in range(5):
            cfg = PIConfig(opt=PIConfig().opt.with_(steps=steps), seed=derive_seed(8, s), eval_seed=derive_seed(8, 999))
            res = run_gpi(P1, cfg)
            errs.append(abs(res.costs[-1] - v_star))
            epss.append(max(res.epsilons))
            rows.append([steps, s, _f(res.costs[-1]), _f(errs[-1]), _f(epss[-1])])
        stats.append((float(np.mean(epss)), float(np.mean(errs)), float(np.std(errs, ddof=1) / np.sqrt(5)), steps))
    _write_csv(out / "c8.csv", ["steps", "seed", "final_cost", "abs_error", "eps_bar"], rows)
    stats.sort()
    ok = all(
        stats[j][1] >= stats[i][1] - np.hypot(stats[i][2], stats[j][2])
        for i in range(len(stats))
        for j in range(i + 1, len(stats))
    )
    detail = "; ".join(f"{st} steps: eps_bar {e:.4f}, err {m:.4f} +- {se:.4f}" for e, m, se, st in stats)
    return Verdict(bool(ok), detail)


CRITERIA = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
}
TITLES = {
    1: "BML identity, set b closed form",
    2: "set d decomposition",
    3: "gradient correctness",
    4: "example 1 reproduction",
    5: "example 2 reproduction",
    6: "on/off-policy equivalence",
    7: "example 3 policy iteration",
    8: "robustness trend",
    9: "determinism",
}


@pytest.fixture(scope="session")
def first_pass(tmp_path_factory):
    cache = {}

    def get(k):
        if k not in cache:
            out = tmp_path_factory.mktemp(f"criterion{k}_first")
            tic = time.perf_counter()
            verdict = CRITERIA[k](out)
            cache[k] = (out, verdict, time.perf_counter() - tic)
        return cache[k]

    return get


def _check(k, first_pass, acceptance_report):
    _, verdict, seconds = first_pass(k)
    in_time = seconds <= BUDGET[k]
    passed = verdict.passed and in_time
    acceptance_report[f"{k} ({TITLES[k]})"] = (passed, f"{verdict.detail}; {seconds:.0f}s of {BUDGET[k]}s")
    assert verdict.passed, verdict.detail
    assert in_time, f"took {seconds:.0f}s, budget {BUDGET[k]}s"


def test_c1_bml_identity(first_pass, acceptance_report):
    _check(1, first_pass, acceptance_report)


def test_c2_general_decomposition(first_pass, acceptance_report):
    _check(2, first_pass, acceptance_report)


def test_c3_gradient_correctness(first_pass, acceptance_report):
    _check(3, first_pass, acceptance_report)


def test_c4_example1_reproduction(first_pass, acceptance_report):
    _check(4, first_pass, acceptance_report)


def test_c5_example2_reproduction(first_pass, acceptance_report):
    _check(5, first_pass, acceptance_report)


def test_c6_on_off_policy_equivalence(first_pass, acceptance_report):
    _check(6, first_pass, acceptance_report)


def test_c7_example3_policy_iteration(first_pass, acceptance_report):
    _check(7, first_pass, acceptance_report)


def test_c8_robustness_trend(first_pass, acceptance_report):
    _check(8, first_pass, acceptance_report)


def test_c9_determinism(first_pass, acceptance_report, tmp_path_factory):
    mismatched, compared = [], 0
    for k, fn in CRITERIA.items():
        first_dir = first_pass(k)[0]
        again = tmp_path_factory.mktemp(f"criterion{k}_again")
        fn(again)
        first = {p.relative_to(first_dir) for p in first_dir.rglob("*.csv")}
        second = {p.relative_to(again) for p in again.rglob("*.csv")}
        if first != second:
            mismatched.append(f"{k}: file sets differ")
            continue
        for rel in sorted(first):
            compared += 1
            if (first_dir / rel).read_bytes() != (again / rel).read_bytes():
                mismatched.append(f"{k}: {rel}")
    passed = not mismatched and compared > 0
    detail = f"{compared} CSV files compared" + (f"; mismatched: {mismatched}" if mismatched else ", all bit-identical")
    acceptance_report[f"9 ({TITLES[9]})"] = (passed, detail)
    assert passed, detail
