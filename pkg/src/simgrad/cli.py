"""Benchmark harness: problem generation, estimator diagnostics, optimizer
runs and CSV trace emission.

Subcommands::

    bench run --config cfg.json [--out DIR] [--set key.path=value ...]
    bench estimate --config cfg.json [--out FILE] [--set ...]
    bench selftest

Configs are single JSON documents; unknown keys are rejected and every
field has a default (see ``DEFAULTS``).  ``--set`` overrides scalar
fields using dotted paths, e.g. ``--set algorithm.step_size=0.02``.
The environment variable ``BENCH_THREADS`` caps how many (seed) cells of
a run execute in parallel (default 1).

Exit codes: 0 success, 2 configuration error, 3 divergence or overflow
during a run (partial traces are still written).
"""
from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import hashlib
import json
import os
import sys
from typing import Optional

import numpy as np

from .core import exact_component_gradient, exact_full_gradient, exact_objective
from .estimators import (
    EstimatorConfig,
    estimator_diagnostics,
    expected_inner_cost,
)
from .optimizers import (
    ScsgConfig,
    SvrgConfig,
    gradient_descent,
    reference_minimum,
    simulated_scsg,
    simulated_sgd,
    simulated_svrg,
)
from .problems import cox_problem, generate_cox_data, generate_synthetic, load_cox_csv
from .rng import RandomSource

GAP_FLOOR = 1e-300

TRACE_COLUMNS = ["epoch", "steps", "inner_evals", "objective", "log10_gap", "elapsed_ms"]


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


DEFAULTS = {
    "problem": {
        "kind": "synthetic",        # synthetic | cox | cox_csv
        "seed": 0,                  # generation seed
        # synthetic
        "n": 4,                     # outer components
        "m": 8,                     # inner components
        "d": 2,                     # inner codomain dimension
        "p": 3,                     # ambient dimension
        "nonlinear_inner": False,
        # cox
        "cox_n": 500,
        "cox_p": 20,
        "censoring": 0.3,
        # cox_csv
        "path": "",
    },
    "estimator": {
        "base_level": 0,            # scalar for run; scalar or list for estimate
        "gamma": 1.5,
    },
    "algorithm": {
        "kind": "svrg",             # svrg | scsg | sgd | gd
        "epochs": 10,
        "inner_steps": 50,
        "step_size": 0.05,
        "epoch_output": "uniform",  # uniform | last
        "batch_size": 2,            # scsg
        "replicate_count": 5,       # scsg
        "steps": 2000,              # sgd / gd
        "schedule": "constant",     # sgd: constant | inverse (step/(t + offset))
        "step_offset": 10.0,        # sgd inverse schedule
        "trace_stride": 0,          # sgd/gd record stride; 0 = automatic
        "divergence_bound": 1e8,
    },
    "estimate": {
        "draws": 100000,
        "component": 0,
        "form": "stochastic",       # stochastic | finite
        "point": "zeros",           # zeros | gaussian
        "point_seed": 0,
        "point_scale": 1.0,
        "seed": 0,
        "out": "estimate.csv",
    },
    "run": {
        "seeds": [0, 1, 2, 3, 4],
        "out_dir": "bench_out",
        "reference_tol": 1e-10,
        "reference_max_steps": 200000,
        "timing": False,            # real elapsed_ms breaks byte-reproducibility
    },
}


def _merge_section(name: str, given: dict) -> dict:
    defaults = DEFAULTS[name]
    merged = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {name}.{key!r}")
        merged[key] = value
    return merged


def load_config(path: str, overrides=()) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for section in raw:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
    config = {name: _merge_section(name, raw.get(name, {})) for name in DEFAULTS}
    for item in overrides:
        _apply_override(config, item)
    return config


def _apply_override(config: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    path, _, text = item.partition("=")
    parts = path.split(".")
    if len(parts) != 2 or parts[0] not in DEFAULTS or parts[1] not in DEFAULTS[parts[0]]:
        raise ConfigError(f"override targets unknown field {path!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    config[parts[0]][parts[1]] = value


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_problem(problem_cfg: dict):
    """Instantiate the configured problem; returns (problem, label)."""
    kind = problem_cfg["kind"]
    if kind == "synthetic":
        inst = generate_synthetic(
            n=int(problem_cfg["n"]), m=int(problem_cfg["m"]),
            d=int(problem_cfg["d"]), p=int(problem_cfg["p"]),
            seed=int(problem_cfg["seed"]),
            nonlinear_inner=bool(problem_cfg["nonlinear_inner"]),
        )
        return inst.problem, "synthetic"
    if kind == "cox":
        data = generate_cox_data(
            n=int(problem_cfg["cox_n"]), p=int(problem_cfg["cox_p"]),
            censor_target=float(problem_cfg["censoring"]),
            seed=int(problem_cfg["seed"]),
        )
        return cox_problem(data).problem, "cox"
    if kind == "cox_csv":
        if not problem_cfg["path"]:
            raise ConfigError("problem.path is required for kind 'cox_csv'")
        data = load_cox_csv(problem_cfg["path"])
        return cox_problem(data).problem, "cox_csv"
    raise ConfigError(f"unknown problem kind {kind!r}")


def _scalar_estimator(est_cfg: dict) -> EstimatorConfig:
    base, gamma = est_cfg["base_level"], est_cfg["gamma"]
    if isinstance(base, list) or isinstance(gamma, list):
        raise ConfigError("run command needs scalar estimator.base_level and estimator.gamma")
    try:
        return EstimatorConfig(base_level=int(base), gamma=float(gamma))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _estimator_grid(est_cfg: dict):
    bases = est_cfg["base_level"]
    gammas = est_cfg["gamma"]
    bases = bases if isinstance(bases, list) else [bases]
    gammas = gammas if isinstance(gammas, list) else [gammas]
    try:
        return [
            EstimatorConfig(base_level=int(b), gamma=float(g))
            for b in bases for g in gammas
        ]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _format_float(value: float) -> str:
    return repr(float(value))


def write_trace_csv(path: str, trace, f_star: float, timing: bool) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for rec in trace.records:
            gap = max(rec.objective - f_star, GAP_FLOOR)
            writer.writerow([
                rec.epoch,
                rec.steps,
                rec.inner_evals,
                _format_float(rec.objective),
                _format_float(np.log10(gap)),
                _format_float(rec.elapsed_s * 1000.0) if timing else "0.0",
            ])


def _run_cell(problem, config, estimator, seed: int):
    algo = config["algorithm"]
    kind = algo["kind"]
    x0 = np.zeros(problem.dimension_p)
    rnd = RandomSource(seed)
    bound = float(algo["divergence_bound"])
    if kind == "svrg":
        cfg = SvrgConfig(
            epochs=int(algo["epochs"]), inner_steps=int(algo["inner_steps"]),
            step_size=float(algo["step_size"]), epoch_output=algo["epoch_output"],
            estimator=estimator, divergence_bound=bound,
        )
        return simulated_svrg(problem, x0, cfg, rnd)
    if kind == "scsg":
        cfg = ScsgConfig(
            epochs=int(algo["epochs"]), inner_steps=int(algo["inner_steps"]),
            step_size=float(algo["step_size"]), epoch_output=algo["epoch_output"],
            estimator=estimator, divergence_bound=bound,
            batch_size=int(algo["batch_size"]),
            replicate_count=int(algo["replicate_count"]),
        )
        return simulated_scsg(problem, x0, cfg, rnd)
    if kind == "sgd":
        stride = int(algo["trace_stride"]) or None
        if algo["schedule"] == "constant":
            schedule = float(algo["step_size"])
        elif algo["schedule"] == "inverse":
            base, offset = float(algo["step_size"]), float(algo["step_offset"])
            schedule = lambda t: base / (t + offset)  # noqa: E731
        else:
            raise ConfigError(f"unknown sgd schedule {algo['schedule']!r}")
        return simulated_sgd(problem, x0, int(algo["steps"]), schedule, estimator,
                             rnd, trace_stride=stride, divergence_bound=bound)
    if kind == "gd":
        stride = int(algo["trace_stride"]) or max(1, int(algo["steps"]) // 200)
        return gradient_descent(problem, x0, int(algo["steps"]),
                                float(algo["step_size"]), trace_stride=stride,
                                divergence_bound=bound)
    raise ConfigError(f"unknown algorithm kind {kind!r}")


def cmd_run(config: dict, out_dir: Optional[str] = None) -> int:
    problem, label = build_problem(config["problem"])
    estimator = _scalar_estimator(config["estimator"])
    run_cfg = config["run"]
    out_dir = out_dir or run_cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    reference = reference_minimum(
        problem, grad_tol=float(run_cfg["reference_tol"]),
        max_steps=int(run_cfg["reference_max_steps"]),
    )
    seeds = [int(s) for s in run_cfg["seeds"]]
    timing = bool(run_cfg["timing"])
    kind = config["algorithm"]["kind"]

    def one(seed: int):
        trace = _run_cell(problem, config, estimator, seed)
        fname = f"{kind}_seed{seed}.csv"
        write_trace_csv(os.path.join(out_dir, fname), trace, reference.f_star, timing)
        return seed, fname, trace.status, trace.message

    workers = max(1, int(os.environ.get("BENCH_THREADS", "1")))
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(seed) for seed in seeds]

    summary = {
        "config_hash": config_hash(config),
        "problem": label,
        "algorithm": kind,
        "seeds": seeds,
        "f_star": reference.f_star,
        "reference": {
            "grad_norm": reference.grad_norm,
            "steps": reference.steps,
            "step_size": reference.step_size,
        },
        "traces": {
            str(seed): {"file": fname, "status": status, "message": message}
            for seed, fname, status, message in results
        },
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    failed = [seed for seed, _, status, _ in results if status != "completed"]
    for seed, fname, status, message in results:
        print(f"seed {seed}: {status} -> {os.path.join(out_dir, fname)}"
              + (f" ({message})" if message else ""))
    return 3 if failed else 0


def cmd_estimate(config: dict, out_path: Optional[str] = None) -> int:
    problem, _label = build_problem(config["problem"])
    est_cfg = config["estimate"]
    grid = _estimator_grid(config["estimator"])
    component = int(est_cfg["component"])
    if est_cfg["point"] == "zeros":
        x = np.zeros(problem.dimension_p)
    elif est_cfg["point"] == "gaussian":
        point_rng = np.random.default_rng(int(est_cfg["point_seed"]))
        x = float(est_cfg["point_scale"]) * point_rng.standard_normal(problem.dimension_p)
    else:
        raise ConfigError(f"unknown estimate.point {est_cfg['point']!r}")
    form = est_cfg["form"]
    if form not in ("stochastic", "finite"):
        raise ConfigError(f"unknown estimate.form {form!r}")
    draws = int(est_cfg["draws"])
    oracle = exact_component_gradient(problem, component, x)

    out_path = out_path or est_cfg["out"]
    rnd = RandomSource(int(est_cfg["seed"]))
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "base_level", "gamma", "draws", "bias_norm", "cov_trace",
            "mean_cost", "predicted_cost", "level_histogram",
        ])
        for cell, cfg in enumerate(grid):
            diag = estimator_diagnostics(
                problem, component, x, cfg, draws, rnd.stream(cell), form=form
            )
            hist = ";".join(
                f"{lvl}:{count}" for lvl, count in enumerate(diag.level_histogram) if count
            )
            writer.writerow([
                cfg.base_level,
                repr(cfg.gamma),
                draws,
                _format_float(np.linalg.norm(diag.mean - oracle)),
                _format_float(diag.cov_trace),
                _format_float(diag.mean_cost),
                f"{expected_inner_cost(cfg):.5f}",
                hist,
            ])
    print(f"wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _selftest_checks():
    from scipy import stats

    from .core import CompositionProblem, FiniteInner, FiniteOuter, InnerBatchStats
    from .estimators import (
        coupled_gradient_pair,
        draw_level_stats,
        level_estimator_value,
        sample_level,
        sample_truncated_level,
        truncated_level_pmf,
        unbiased_gradient,
        unbiased_gradient_finite,
    )
    from .problems import cox_full_gradient

    synth = generate_synthetic(4, 8, 2, 3, seed=7)
    cox = cox_problem(generate_cox_data(80, 5, 0.3, seed=11))
    est = EstimatorConfig(base_level=0, gamma=1.5)

    def check_merge_law():
        rng = np.random.default_rng(0)
        for _ in range(50):
            v1, v2 = rng.standard_normal((2, 6, 2)), rng.standard_normal((2, 6, 2))
            j1, j2 = rng.standard_normal((2, 6, 2, 3)), rng.standard_normal((2, 6, 2, 3))
            a = InnerBatchStats.from_draws(v1[0], j1[0])
            b = InnerBatchStats.from_draws(v1[1], j1[1])
            merged = a.merge(b)
            direct = InnerBatchStats.from_draws(
                np.concatenate([v1[0], v1[1]]), np.concatenate([j1[0], j1[1]])
            )
            assert np.allclose(merged.t_bar, direct.t_bar, atol=1e-12)
            assert np.allclose(merged.s_bar, direct.s_bar, atol=1e-12)

    def check_level_pmf():
        rng = np.random.default_rng(1)
        draws = sample_level(est, rng, size=100_000)
        kmax = 12
        observed = np.bincount(np.minimum(draws, kmax), minlength=kmax + 1)
        p = est.level_tail_prob
        probs = (1 - p) * p ** np.arange(kmax + 1)
        probs[kmax] = p ** kmax
        chi2 = stats.chisquare(observed, probs * draws.size)
        assert chi2.pvalue > 0.01, f"p={chi2.pvalue:.4f}"

    def check_truncated_pmf():
        pmf = truncated_level_pmf(est, 3)
        assert abs(pmf.sum() - 1.0) < 1e-12
        rng = np.random.default_rng(2)
        draws = sample_truncated_level(est, 3, rng, size=100_000)
        observed = np.bincount(draws, minlength=pmf.size)
        chi2 = stats.chisquare(observed, pmf * draws.size)
        assert chi2.pvalue > 0.01, f"p={chi2.pvalue:.4f}"

    def check_antithetic():
        # linear outer function: the multilevel correction cancels exactly
        direction = np.array([0.7, -1.3])
        linear = CompositionProblem(
            dimension_p=3, inner_dimension_d=2,
            outer=FiniteOuter(1), inner_family=lambda v: FiniteInner(8),
            eval_inner=synth.problem.eval_inner, jac_inner=synth.problem.jac_inner,
            eval_outer=lambda v, y: float(direction @ y),
            grad_outer=lambda v, y: direction,
            eval_inner_batch=synth.problem.eval_inner_batch,
            jac_inner_batch=synth.problem.jac_inner_batch,
            grad_outer_batch=lambda v, ys: np.broadcast_to(direction, ys.shape),
        )
        rng = np.random.default_rng(3)
        x = rng.standard_normal(3)
        for _ in range(200):
            _, full, first, second, _ = draw_level_stats(linear, 0, x, est, rng)
            corr = level_estimator_value(linear, 0, x, full, first, second)
            assert np.linalg.norm(corr) <= 1e-12

    def check_unbiasedness():
        rng = np.random.default_rng(4)
        x = rng.standard_normal(3)
        for form in ("stochastic", "finite"):
            diag = estimator_diagnostics(synth.problem, 1, x, est, 20_000,
                                         np.random.default_rng(5), form=form)
            oracle = exact_component_gradient(synth.problem, 1, x)
            assert np.all(np.abs(diag.mean - oracle) <= 5 * diag.std_error + 1e-12), form

    def check_cost_law():
        for gamma, tol in ((1.5, 0.05), (1.9, 0.025)):
            cfg = EstimatorConfig(base_level=0, gamma=gamma)
            diag = estimator_diagnostics(synth.problem, 0, np.zeros(3), cfg, 100_000,
                                         np.random.default_rng(6))
            rel = abs(diag.mean_cost / expected_inner_cost(cfg) - 1.0)
            assert rel <= tol, f"gamma={gamma}: {rel:.4f}"

    def check_coupling_identity():
        rng = np.random.default_rng(7)
        x = rng.standard_normal(3)
        a, b = coupled_gradient_pair(synth.problem, 2, x, x, est, rng)
        assert np.array_equal(a.grad, b.grad)

    def check_cox_wiring():
        rng = np.random.default_rng(8)
        for _ in range(3):
            beta = 0.5 * rng.standard_normal(5)
            generic = exact_full_gradient(cox.problem, beta)
            direct = cox_full_gradient(cox, beta)
            assert np.max(np.abs(generic - direct)) < 1e-10

    def check_finite_differences():
        rng = np.random.default_rng(9)
        x = 0.4 * rng.standard_normal(3)
        grad = exact_full_gradient(synth.problem, x)
        step = 1e-5
        for j in range(3):
            e = np.zeros(3)
            e[j] = step
            fd = (exact_objective(synth.problem, x + e)
                  - exact_objective(synth.problem, x - e)) / (2 * step)
            assert abs(fd - grad[j]) <= 1e-5 * max(1.0, abs(grad[j]))

    def check_determinism():
        rng_a = RandomSource(42).stream(1, 2, 3)
        rng_b = RandomSource(42).stream(1, 2, 3)
        ga = unbiased_gradient(synth.problem, 0, np.ones(3), est, rng_a)
        gb = unbiased_gradient(synth.problem, 0, np.ones(3), est, rng_b)
        assert np.array_equal(ga.grad, gb.grad) and ga.level == gb.level
        gf = unbiased_gradient_finite(synth.problem, 0, np.ones(3), est,
                                      RandomSource(42).stream(9))
        gf2 = unbiased_gradient_finite(synth.problem, 0, np.ones(3), est,
                                       RandomSource(42).stream(9))
        assert np.array_equal(gf.grad, gf2.grad)

    return [
        ("merge-law", check_merge_law),
        ("level-pmf", check_level_pmf),
        ("truncated-level-pmf", check_truncated_pmf),
        ("antithetic-cancellation", check_antithetic),
        ("estimator-unbiasedness", check_unbiasedness),
        ("cost-law", check_cost_law),
        ("coupling-identity", check_coupling_identity),
        ("cox-wiring-equivalence", check_cox_wiring),
        ("finite-difference-gradients", check_finite_differences),
        ("determinism", check_determinism),
    ]


def cmd_selftest() -> int:
    failures = 0
    for name, check in _selftest_checks():
        try:
            check()
        except AssertionError as exc:
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"PASS {name}")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an optimizer over seeds and write trace CSVs")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", default=None, help="output directory (overrides run.out_dir)")
    run_p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE", help="override a config field")

    est_p = sub.add_parser("estimate", help="estimator diagnostics over an (n0, gamma) grid")
    est_p.add_argument("--config", required=True)
    est_p.add_argument("--out", default=None, help="output CSV path (overrides estimate.out)")
    est_p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE")

    sub.add_parser("selftest", help="run the fast invariant checks")

    args = parser.parse_args(argv)
    if args.command == "selftest":
        return cmd_selftest()
    try:
        config = load_config(args.config, args.overrides)
        if args.command == "run":
            return cmd_run(config, args.out)
        return cmd_estimate(config, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
