"""Optimizers driven by simulated gradients, with convergence traces.

Two variance-reduced methods share the same inner loop: each step draws
an outer component, forms a coupled gradient pair at the current iterate
and the epoch's reference point, and applies the control-variate update.
They differ only in how the epoch anchor (the reference full gradient)
is obtained: exactly by full enumeration, or estimated from a batch of
outer components with several independent simulation replicates.  Plain
simulated SGD and deterministic gradient descent complete the set as
baselines.

All optimizers consume a :class:`~simgrad.rng.RandomSource` and key
their streams by ``(epoch, step, replicate)``, so traces are bitwise
reproducible for a given seed and configuration.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np

from .core import (
    CompositionProblem,
    FiniteOuter,
    UnsupportedFamilyError,
    exact_full_gradient,
    exact_objective,
    sample_outer,
    total_inner_evaluations,
)
from .estimators import (
    EstimatorConfig,
    GradientOverflowError,
    coupled_gradient_pair,
    unbiased_gradient,
)
from .rng import RandomSource


@dataclass(frozen=True)
class SvrgConfig:
    """Epoch/step schedule for the variance-reduced optimizer.

    ``epoch_output`` selects the next reference point: ``"last"`` takes
    the final inner iterate, ``"uniform"`` (the default, assumed by the
    convergence analysis) picks an inner iterate uniformly at random
    among the first ``inner_steps`` ones, including the starting point.
    """

    epochs: int
    inner_steps: int
    step_size: float
    epoch_output: str = "uniform"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    divergence_bound: float = 1e8

    def __post_init__(self):
        if self.epochs < 1 or self.inner_steps < 1:
            raise ValueError("epochs and inner_steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.epoch_output not in ("last", "uniform"):
            raise ValueError(f"epoch_output must be 'last' or 'uniform', got {self.epoch_output!r}")


@dataclass(frozen=True)
class ScsgConfig(SvrgConfig):
    """SvrgConfig plus the anchor batch size B and replicate count K."""

    batch_size: int = 1
    replicate_count: int = 1

    def __post_init__(self):
        super().__post_init__()
        if self.batch_size < 1 or self.replicate_count < 1:
            raise ValueError("batch_size and replicate_count must be >= 1")


@dataclass
class EpochRecord:
    """One completed epoch: iterate, objective and cumulative counters."""

    epoch: int
    iterate: np.ndarray
    objective: float
    steps: int
    inner_evals: int
    elapsed_s: float


@dataclass
class RunTrace:
    """Per-epoch convergence record plus the terminal status.

    ``status`` is ``"completed"``, ``"diverged"`` (iterate norm exceeded
    the configured bound) or ``"overflow"`` (non-finite values inside the
    estimator or objective); on failure the records cover the epochs
    finished before the failure.
    """

    records: List[EpochRecord]
    status: str
    message: str = ""

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])


def _safe_objective(problem: CompositionProblem, x) -> float:
    try:
        return exact_objective(problem, x)
    except UnsupportedFamilyError:
        return float("nan")


class _Clock:
    def __init__(self):
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start


def _initial_record(problem, x0, clock):
    return EpochRecord(
        epoch=0, iterate=np.array(x0, dtype=float),
        objective=_safe_objective(problem, x0),
        steps=0, inner_evals=0, elapsed_s=clock.elapsed(),
    )


def _inner_epoch(problem, x_start, x_ref, anchor, config, rnd, epoch, counters):
    """Run one epoch of coupled-pair steps; returns (output, last, status)."""
    x = np.array(x_start, dtype=float)
    pick = None
    if config.epoch_output == "uniform":
        epoch_stream = rnd.stream(epoch, 0, 0)
        pick = int(epoch_stream.integers(config.inner_steps))
    snapshot = x.copy() if pick == 0 else None
    for t in range(1, config.inner_steps + 1):
        stream = rnd.stream(epoch, t, 0)
        v = sample_outer(problem, stream)
        try:
            pair = coupled_gradient_pair(problem, v, x, x_ref, config.estimator, stream)
        except GradientOverflowError as exc:
            return None, None, ("overflow", str(exc))
        direction = pair[0].grad - pair[1].grad + anchor
        x = x - config.step_size * direction
        counters["steps"] += 1
        counters["inner_evals"] += pair[0].inner_draws + pair[1].inner_draws
        if not np.all(np.isfinite(x)):
            return None, None, ("overflow", f"non-finite iterate at epoch {epoch}, step {t}")
        if np.linalg.norm(x) > config.divergence_bound:
            return None, None, (
                "diverged",
                f"iterate norm {np.linalg.norm(x):.3e} exceeded bound at epoch {epoch}, step {t}",
            )
        if pick is not None and t == pick:
            snapshot = x.copy()
    output = x if config.epoch_output == "last" else snapshot
    return output, x, None


def simulated_svrg(problem: CompositionProblem, x0, config: SvrgConfig,
                   rnd: RandomSource) -> RunTrace:
    """Variance-reduced optimizer with exact full-gradient epoch anchors.

    Requires finite outer and inner families (the anchor is computed by
    full enumeration, and its cost is charged to the cumulative inner
    evaluation counter).  Objective values recorded in the trace are
    diagnostics and are not charged.
    """
    x_ref = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x_ref)):
        raise ValueError("x0 must be finite")
    anchor_cost = total_inner_evaluations(problem)
    clock = _Clock()
    records = [_initial_record(problem, x_ref, clock)]
    counters = {"steps": 0, "inner_evals": 0}
    for epoch in range(1, config.epochs + 1):
        anchor = exact_full_gradient(problem, x_ref)
        counters["inner_evals"] += anchor_cost
        output, _, failure = _inner_epoch(
            problem, x_ref, x_ref, anchor, config, rnd, epoch, counters
        )
        if failure is not None:
            return RunTrace(records, failure[0], failure[1])
        x_ref = output
        objective = _safe_objective(problem, x_ref)
        if not np.isnan(objective) and not np.isfinite(objective):
            return RunTrace(records, "overflow", f"non-finite objective at epoch {epoch}")
        records.append(EpochRecord(epoch, x_ref.copy(), objective,
                                   counters["steps"], counters["inner_evals"],
                                   clock.elapsed()))
    return RunTrace(records, "completed")


def _scsg_anchor(problem, x_ref, config, rnd, epoch, counters):
    """Batch-and-replicate estimate of the full gradient at the reference point."""
    epoch_stream = rnd.stream(epoch, 0, 0)
    if isinstance(problem.outer, FiniteOuter):
        n = problem.outer.count
        if config.batch_size > n:
            raise ValueError(
                f"batch_size {config.batch_size} exceeds outer family size {n}"
            )
        batch = epoch_stream.choice(n, size=config.batch_size, replace=False)
    else:
        batch = [problem.outer.sampler(epoch_stream, None) for _ in range(config.batch_size)]
    total = np.zeros(problem.dimension_p)
    for k in range(1, config.replicate_count + 1):
        stream = rnd.stream(epoch, 0, k)
        for v in batch:
            gs = unbiased_gradient(problem, v, x_ref, config.estimator, stream)
            total += gs.grad
            counters["inner_evals"] += gs.inner_draws
    return total / (config.replicate_count * config.batch_size)


def simulated_scsg(problem: CompositionProblem, x0, config: ScsgConfig,
                   rnd: RandomSource) -> RunTrace:
    """Variance-reduced optimizer with simulated epoch anchors.

    Never evaluates an exact full gradient: the anchor averages
    ``replicate_count`` independent simulation passes over one batch of
    ``batch_size`` outer components drawn per epoch.
    """
    x_ref = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x_ref)):
        raise ValueError("x0 must be finite")
    clock = _Clock()
    records = [_initial_record(problem, x_ref, clock)]
    counters = {"steps": 0, "inner_evals": 0}
    for epoch in range(1, config.epochs + 1):
        try:
            anchor = _scsg_anchor(problem, x_ref, config, rnd, epoch, counters)
        except GradientOverflowError as exc:
            return RunTrace(records, "overflow", str(exc))
        output, _, failure = _inner_epoch(
            problem, x_ref, x_ref, anchor, config, rnd, epoch, counters
        )
        if failure is not None:
            return RunTrace(records, failure[0], failure[1])
        x_ref = output
        objective = _safe_objective(problem, x_ref)
        if not np.isnan(objective) and not np.isfinite(objective):
            return RunTrace(records, "overflow", f"non-finite objective at epoch {epoch}")
        records.append(EpochRecord(epoch, x_ref.copy(), objective,
                                   counters["steps"], counters["inner_evals"],
                                   clock.elapsed()))
    return RunTrace(records, "completed")


StepSchedule = Union[float, Callable[[int], float]]


def simulated_sgd(problem: CompositionProblem, x0, steps: int,
                  step_schedule: StepSchedule, estimator: EstimatorConfig,
                  rnd: RandomSource, trace_stride: Optional[int] = None,
                  divergence_bound: float = 1e8) -> RunTrace:
    """Plain stochastic gradient descent on simulated unbiased gradients.

    ``step_schedule`` is either a constant or a callable ``t -> step``
    for t = 1..steps.  A record is appended every ``trace_stride`` steps
    (default: about 100 records over the run).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    stride = trace_stride if trace_stride is not None else max(1, steps // 100)
    schedule = step_schedule if callable(step_schedule) else (lambda t: float(step_schedule))
    x = np.array(x0, dtype=float)
    clock = _Clock()
    records = [_initial_record(problem, x, clock)]
    inner_evals = 0
    for t in range(1, steps + 1):
        stream = rnd.stream(t)
        v = sample_outer(problem, stream)
        try:
            gs = unbiased_gradient(problem, v, x, estimator, stream)
        except GradientOverflowError as exc:
            return RunTrace(records, "overflow", str(exc))
        x = x - schedule(t) * gs.grad
        inner_evals += gs.inner_draws
        if not np.all(np.isfinite(x)):
            return RunTrace(records, "overflow", f"non-finite iterate at step {t}")
        if np.linalg.norm(x) > divergence_bound:
            return RunTrace(records, "diverged",
                            f"iterate norm exceeded bound at step {t}")
        if t % stride == 0 or t == steps:
            records.append(EpochRecord(t, x.copy(), _safe_objective(problem, x),
                                       t, inner_evals, clock.elapsed()))
    return RunTrace(records, "completed")


def gradient_descent(problem: CompositionProblem, x0, steps: int, step_size: float,
                     trace_stride: int = 1, grad_tol: Optional[float] = None,
                     divergence_bound: float = 1e8) -> RunTrace:
    """Deterministic full-gradient descent (requires finite families).

    Stops early once the gradient norm falls below ``grad_tol`` when one
    is given; the final point is always recorded.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if step_size < 0:
        raise ValueError("step_size must be nonnegative")
    x = np.array(x0, dtype=float)
    cost_per_step = total_inner_evaluations(problem)
    clock = _Clock()
    records = [_initial_record(problem, x, clock)]
    inner_evals = 0
    taken = 0
    for t in range(1, steps + 1):
        grad = exact_full_gradient(problem, x)
        inner_evals += cost_per_step
        if grad_tol is not None and np.linalg.norm(grad) <= grad_tol:
            break
        x = x - step_size * grad
        taken = t
        if not np.all(np.isfinite(x)):
            return RunTrace(records, "overflow", f"non-finite iterate at step {t}")
        if np.linalg.norm(x) > divergence_bound:
            return RunTrace(records, "diverged",
                            f"iterate norm exceeded bound at step {t}")
        if t % trace_stride == 0:
            records.append(EpochRecord(t, x.copy(), _safe_objective(problem, x),
                                       t, inner_evals, clock.elapsed()))
    if records[-1].epoch != taken:
        records.append(EpochRecord(taken, x.copy(), _safe_objective(problem, x),
                                   taken, inner_evals, clock.elapsed()))
    return RunTrace(records, "completed")


def estimate_gradient_lipschitz(problem: CompositionProblem, x, iters: int = 12,
                                probe_step: float = 1e-5) -> float:
    """Largest-curvature estimate by power iteration on gradient differences."""
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(problem.dimension_p)
    u /= np.linalg.norm(u)
    estimate = 1.0
    g0 = exact_full_gradient(problem, x)
    for _ in range(iters):
        hu = (exact_full_gradient(problem, x + probe_step * u) - g0) / probe_step
        norm = np.linalg.norm(hu)
        if norm == 0.0:
            break
        estimate = max(estimate, norm)
        u = hu / norm
    return estimate


@dataclass
class ReferenceSolution:
    """High-precision minimizer used as the gap baseline F(x) - f_star."""

    x_star: np.ndarray
    f_star: float
    grad_norm: float
    steps: int
    step_size: float


def reference_minimum(problem: CompositionProblem, x0=None, grad_tol: float = 1e-10,
                      max_steps: int = 200_000,
                      step_size: Optional[float] = None) -> ReferenceSolution:
    """Deterministic reference solve to gradient norm <= grad_tol.

    Runs gradient descent with step ``0.9 / L`` (L estimated by power
    iteration) from the origin unless another start or step is given.
    The step is halved and the run restarted if the objective ever
    increases, so a pessimistic curvature estimate cannot stall it.
    """
    x0 = np.zeros(problem.dimension_p) if x0 is None else np.asarray(x0, dtype=float)
    if step_size is None:
        step_size = 0.9 / estimate_gradient_lipschitz(problem, x0)
    for _attempt in range(30):
        x = x0.copy()
        f_prev = exact_objective(problem, x)
        ok = True
        steps = 0
        for steps in range(1, max_steps + 1):
            grad = exact_full_gradient(problem, x)
            gnorm = np.linalg.norm(grad)
            if gnorm <= grad_tol:
                return ReferenceSolution(x, exact_objective(problem, x), gnorm,
                                         steps - 1, step_size)
            x = x - step_size * grad
            f_new = exact_objective(problem, x)
            if not np.isfinite(f_new) or f_new > f_prev + 1e-12 * max(1.0, abs(f_prev)):
                ok = False
                break
            f_prev = f_new
        if ok:
            grad = exact_full_gradient(problem, x)
            gnorm = np.linalg.norm(grad)
            if gnorm <= grad_tol:
                return ReferenceSolution(x, exact_objective(problem, x), gnorm,
                                         steps, step_size)
            raise RuntimeError(
                f"reference solve did not reach gradient norm {grad_tol:.1e} "
                f"within {max_steps} steps (currently {gnorm:.3e})"
            )
        step_size *= 0.5
    raise RuntimeError("reference solve failed: step size collapsed without descent")
