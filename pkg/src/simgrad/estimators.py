"""Unbiased gradient estimators via randomized multilevel Monte Carlo.

The gradient of ``f_v(E_w g_w(x))`` cannot be estimated without bias by a
single plug-in sample because the inner expectation sits inside the
nonlinear outer gradient.  The estimators here remove the bias by a
randomized telescoping scheme: draw a level ``N`` from a geometric
distribution, average ``2^(N + base_level + 1)`` inner draws, form the
difference between the full-sample plug-in estimator and the mean of the
two half-sample estimators (the antithetic correction), reweight by the
level probability, and anchor with a cheap plug-in estimator at the base
level.  The level distribution uses tail probability ``0.5**gamma`` with
``1 < gamma < 2``: the lower bound keeps the expected number of inner
draws finite, the upper bound keeps the estimator variance finite.

For finite inner families the level is truncated at the point where the
full family could simply be enumerated, and the top level couples the
exact enumeration against a subsample plug-in estimator.

``coupled_gradient_pair`` evaluates the same draws at two points so that
the difference of the two estimates has second moment proportional to
the squared distance between the points; this is what makes the
variance-reduced optimizers work.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    CompositionProblem,
    InnerBatchStats,
    chain_gradient,
    direct_gradient,
    exact_component_gradient,
    exact_inner_mean,
    grad_outer_rows,
    has_finite_inner,
    inner_count,
    inner_tables,
    sample_inner_tokens,
)


class GradientOverflowError(ArithmeticError):
    """A gradient estimate came out non-finite (overflow in f or g)."""

    def __init__(self, level, component):
        self.level = level
        self.component = component
        super().__init__(
            f"non-finite gradient estimate at level {level}, component {component!r}"
        )


@dataclass(frozen=True)
class EstimatorConfig:
    """Level-distribution parameters of the randomized estimator.

    ``base_level`` is the deterministic coarse level anchoring the
    telescoping sum (raising it trades cost for variance).  ``gamma``
    sets the level tail probability ``0.5**gamma`` and must lie strictly
    in (1, 2); values outside break either the finite expected cost or
    the finite variance of the estimator.
    """

    base_level: int = 0
    gamma: float = 1.5

    def __post_init__(self):
        if int(self.base_level) != self.base_level or self.base_level < 0:
            raise ValueError(f"base_level must be a nonnegative integer, got {self.base_level}")
        if not 1.0 < self.gamma < 2.0:
            raise ValueError(f"gamma must lie strictly in (1, 2), got {self.gamma}")

    @property
    def level_tail_prob(self) -> float:
        return 0.5 ** self.gamma


@dataclass(frozen=True)
class GradientSample:
    """One simulated gradient with its realized level and sampling cost.

    ``inner_draws`` counts inner evaluations only; the level draw itself
    is excluded (it is a constant +1 and not comparable across estimator
    variants).  For the randomized estimator ``inner_draws`` equals
    ``2**(level + base_level + 1)``.  When the finite-family estimator
    takes its deterministic exact branch, ``level`` is reported as 0 and
    ``inner_draws`` equals the family size.
    """

    grad: np.ndarray
    level: int
    inner_draws: int
    component: object


def geometric_level_pmf(config: EstimatorConfig, levels):
    """P(N = n) = (1-p) p^n with p = 0.5**gamma; accepts scalars or arrays."""
    p = config.level_tail_prob
    return (1.0 - p) * p ** np.asarray(levels)


def truncated_level_pmf(config: EstimatorConfig, n1: int) -> np.ndarray:
    """Renormalized geometric pmf on the truncated support [0, n1 - base_level]."""
    cap = n1 - config.base_level
    if cap < 1:
        raise ValueError(
            f"truncation requires n1 > base_level, got n1={n1}, base_level={config.base_level}"
        )
    p = config.level_tail_prob
    ks = np.arange(cap + 1)
    return (1.0 - p) * p ** ks / (1.0 - p ** (cap + 1))


def expected_inner_cost(config: EstimatorConfig) -> float:
    """Closed-form mean of the inner draw count 2^(N + base_level + 1)."""
    p = config.level_tail_prob
    return 2.0 ** (config.base_level + 1) * (1.0 - p) / (1.0 - 2.0 ** (1.0 - config.gamma))


def sample_level(config: EstimatorConfig, rng: np.random.Generator, size=None):
    """Draw the estimator level N >= 0 with P(N=n) = (1-p) p^n."""
    draws = rng.geometric(1.0 - config.level_tail_prob, size=size)
    if size is None:
        return int(draws) - 1
    return np.asarray(draws, dtype=np.int64) - 1


def sample_truncated_level(config: EstimatorConfig, n1: int, rng: np.random.Generator, size=None):
    """Draw a level from the truncated-renormalized geometric on [0, n1 - base_level].

    Implemented as ``N mod (cap + 1)`` of a geometric draw, which has
    exactly the renormalized pmf.  Rejected when ``n1 <= base_level``
    (the exact enumeration branch applies there and no level is needed).
    """
    cap = n1 - config.base_level
    if cap < 1:
        raise ValueError(
            f"truncation requires n1 > base_level, got n1={n1}, base_level={config.base_level}"
        )
    return sample_level(config, rng, size) % (cap + 1)


def _plugin_term(problem: CompositionProblem, v, stats: InnerBatchStats) -> np.ndarray:
    """Plug-in gradient estimate s_barᵀ · ∇f_v(t_bar) from one batch."""
    with np.errstate(over="ignore", invalid="ignore"):
        outer = np.asarray(problem.grad_outer(v, stats.t_bar), dtype=float)
        return chain_gradient(stats.s_bar, outer)


def level_estimator_value(
    problem: CompositionProblem,
    v,
    x,
    stats_full: InnerBatchStats,
    stats_first_half: InnerBatchStats,
    stats_second_half: InnerBatchStats,
) -> np.ndarray:
    """Antithetic multilevel correction at one realized level.

    ``stats_full`` must be the merge of the two half-batch stats (same
    draws, split in half).  Returns the full-sample plug-in estimate
    minus the average of the two half-sample estimates; for a linear
    outer function this cancels exactly.
    """
    if stats_first_half.count != stats_second_half.count:
        raise ValueError(
            f"half-batch counts differ: {stats_first_half.count} vs {stats_second_half.count}"
        )
    if stats_full.count != stats_first_half.count + stats_second_half.count:
        raise ValueError(
            f"full count {stats_full.count} is not the sum of the half counts"
        )
    return _plugin_term(problem, v, stats_full) - 0.5 * (
        _plugin_term(problem, v, stats_first_half)
        + _plugin_term(problem, v, stats_second_half)
    )


def _split_stats(values: np.ndarray, jacobians: np.ndarray, base_count: int):
    """Full, first-half, second-half and base-batch stats from one draw table.

    Draws 1..k/2 form the first half and k/2+1..k the second; the base
    batch reuses the first ``base_count`` draws.  The fixed ordering
    keeps every estimator reproducible from its stream.
    """
    k = values.shape[0]
    half = k // 2
    full = InnerBatchStats(values.mean(axis=0), jacobians.mean(axis=0), k)
    first = InnerBatchStats(values[:half].mean(axis=0), jacobians[:half].mean(axis=0), half)
    second = InnerBatchStats(values[half:].mean(axis=0), jacobians[half:].mean(axis=0), half)
    base = InnerBatchStats(
        values[:base_count].mean(axis=0), jacobians[:base_count].mean(axis=0), base_count
    )
    return full, first, second, base


def draw_level_stats(problem: CompositionProblem, v, x, config: EstimatorConfig,
                     rng: np.random.Generator):
    """Sample a level and its inner draws; return the per-level statistics.

    Returns ``(level, stats_full, stats_first, stats_second, stats_base)``.
    This is the randomized part of the estimator, exposed so the
    correction term can be inspected on real draws.
    """
    level = sample_level(config, rng)
    count = 1 << (level + config.base_level + 1)
    tokens = sample_inner_tokens(problem, v, rng, count)
    values, jacs = inner_tables(problem, v, tokens, x)
    return (level,) + _split_stats(values, jacs, 1 << config.base_level)


def _assemble(problem, v, x, values, jacs, level, pmf, base_level):
    full, first, second, base = _split_stats(values, jacs, 1 << base_level)
    correction = level_estimator_value(problem, v, x, full, first, second)
    grad = correction / pmf + _plugin_term(problem, v, base) + direct_gradient(problem, v, x)
    if not np.all(np.isfinite(grad)):
        raise GradientOverflowError(level=level, component=v)
    return grad


def unbiased_gradient(
    problem: CompositionProblem, v, x, config: EstimatorConfig, rng: np.random.Generator
) -> GradientSample:
    """Unbiased estimate of the gradient of ``f_v(E_w g_w(x)) + h_v(x)``.

    Samples a geometric level, draws ``2^(level + base_level + 1)`` i.i.d.
    inner components (with replacement for finite families), and combines
    the reweighted antithetic correction with the base-level plug-in
    estimate.  The exact gradient of the direct term is added unchanged.
    """
    level = sample_level(config, rng)
    count = 1 << (level + config.base_level + 1)
    tokens = sample_inner_tokens(problem, v, rng, count)
    values, jacs = inner_tables(problem, v, tokens, x)
    grad = _assemble(problem, v, x, values, jacs, level,
                     geometric_level_pmf(config, level), config.base_level)
    return GradientSample(grad=grad, level=level, inner_draws=count, component=v)


def unbiased_gradient_finite(
    problem: CompositionProblem, v, x, config: EstimatorConfig, rng: np.random.Generator
) -> GradientSample:
    """Unbiased gradient estimate specialized to a finite inner family of size m.

    The level is truncated at ``n1 = floor(log2 m)`` minus the base level.
    Three branches:

    - ``base_level >= n1``: the base batch would already cost as much as
      enumerating the family, so the exact component gradient is returned
      deterministically (zero variance).
    - top level: the exact enumeration is coupled against a single
      plug-in estimate from ``2^n1`` with-replacement draws, anchored at
      the base level; the correction is reweighted by the truncated pmf.
    - interior levels: identical to the unrestricted estimator except for
      the truncated reweighting.
    """
    m = inner_count(problem, v)
    n0 = config.base_level
    n1 = m.bit_length() - 1
    if n0 >= n1:
        grad = exact_component_gradient(problem, v, x)
        if not np.all(np.isfinite(grad)):
            raise GradientOverflowError(level=0, component=v)
        return GradientSample(grad=grad, level=0, inner_draws=m, component=v)

    cap = n1 - n0
    pmf = truncated_level_pmf(config, n1)
    level = sample_truncated_level(config, n1, rng)
    if level == cap:
        count = 1 << n1
        tokens = sample_inner_tokens(problem, v, rng, count)
        values, jacs = inner_tables(problem, v, tokens, x)
        t_mean, s_mean = exact_inner_mean(problem, v, x)
        with np.errstate(over="ignore", invalid="ignore"):
            exact_term = chain_gradient(
                s_mean, np.asarray(problem.grad_outer(v, t_mean), dtype=float)
            )
        sub = InnerBatchStats.from_draws(values, jacs)
        base = InnerBatchStats.from_draws(values[: 1 << n0], jacs[: 1 << n0])
        grad = (
            (exact_term - _plugin_term(problem, v, sub)) / pmf[level]
            + _plugin_term(problem, v, base)
            + direct_gradient(problem, v, x)
        )
        if not np.all(np.isfinite(grad)):
            raise GradientOverflowError(level=level, component=v)
        return GradientSample(grad=grad, level=level, inner_draws=m + count, component=v)

    count = 1 << (level + n0 + 1)
    tokens = sample_inner_tokens(problem, v, rng, count)
    values, jacs = inner_tables(problem, v, tokens, x)
    grad = _assemble(problem, v, x, values, jacs, level, pmf[level], n0)
    return GradientSample(grad=grad, level=level, inner_draws=count, component=v)


def coupled_gradient_pair(
    problem: CompositionProblem, v, x, x_ref, config: EstimatorConfig,
    rng: np.random.Generator,
):
    """Two gradient estimates at ``x`` and ``x_ref`` from shared randomness.

    Both samples use the same level and the same inner draws, so each is
    marginally distributed exactly like ``unbiased_gradient`` at its own
    point while their difference stays small when the points are close.
    """
    level = sample_level(config, rng)
    count = 1 << (level + config.base_level + 1)
    tokens = sample_inner_tokens(problem, v, rng, count)
    pmf = geometric_level_pmf(config, level)
    values_x, jacs_x = inner_tables(problem, v, tokens, x)
    grad_x = _assemble(problem, v, x, values_x, jacs_x, level, pmf, config.base_level)
    values_r, jacs_r = inner_tables(problem, v, tokens, x_ref)
    grad_r = _assemble(problem, v, x_ref, values_r, jacs_r, level, pmf, config.base_level)
    return (
        GradientSample(grad=grad_x, level=level, inner_draws=count, component=v),
        GradientSample(grad=grad_r, level=level, inner_draws=count, component=v),
    )


def variance_reduced_gradient(
    problem: CompositionProblem, v, x, x_ref, ref_grad, config: EstimatorConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Control-variate gradient: W(x) - W(x_ref) + ref_grad on shared draws.

    Unbiased for the full gradient at ``x`` whenever ``ref_grad`` equals
    the full gradient at ``x_ref``; reduces to ``ref_grad`` exactly when
    ``x == x_ref``.
    """
    sample_x, sample_ref = coupled_gradient_pair(problem, v, x, x_ref, config, rng)
    return sample_x.grad - sample_ref.grad + np.asarray(ref_grad, dtype=float)


@dataclass
class EstimatorDiagnostics:
    """Sample statistics over independent estimator replications."""

    mean: np.ndarray
    var: np.ndarray
    cov_trace: float
    mean_cost: float
    level_histogram: np.ndarray
    draws: int

    @property
    def std_error(self) -> np.ndarray:
        return np.sqrt(self.var / self.draws)


def estimator_diagnostics(
    problem: CompositionProblem, v, x, config: EstimatorConfig, draws: int,
    rng: np.random.Generator, form: str = "stochastic",
) -> EstimatorDiagnostics:
    """Mean, covariance trace, mean cost and level histogram over many draws.

    ``form`` selects the estimator under study: ``"stochastic"`` for the
    unrestricted randomized estimator, ``"finite"`` for the truncated
    finite-family variant.  Deterministic given the generator state.

    Finite inner families with vectorized problem hooks take a grouped
    fast path that batches all draws of one level together; it samples
    from the same distributions and computes the same estimator as the
    per-draw functions, just with the draws laid out level by level.
    """
    if draws < 1:
        raise ValueError(f"draws must be >= 1, got {draws}")
    if form not in ("stochastic", "finite"):
        raise ValueError(f"unknown estimator form {form!r}")

    if form == "finite":
        m = inner_count(problem, v)
        if config.base_level >= m.bit_length() - 1:
            grad = exact_component_gradient(problem, v, x)
            return EstimatorDiagnostics(
                mean=grad, var=np.zeros_like(grad), cov_trace=0.0,
                mean_cost=float(m), level_histogram=np.array([draws]), draws=draws,
            )

    fast = (
        has_finite_inner(problem, v)
        and problem.eval_inner_batch is not None
        and problem.jac_inner_batch is not None
        and problem.grad_outer_batch is not None
    )
    if fast:
        samples, costs, levels = _replicate_grouped(problem, v, x, config, draws, rng, form)
    else:
        samples, costs, levels = _replicate_loop(problem, v, x, config, draws, rng, form)

    bad = ~np.all(np.isfinite(samples), axis=1)
    if bad.any():
        first = int(np.argmax(bad))
        raise GradientOverflowError(level=int(levels[first]), component=v)
    mean = samples.mean(axis=0)
    var = samples.var(axis=0, ddof=1) if draws > 1 else np.zeros_like(mean)
    return EstimatorDiagnostics(
        mean=mean,
        var=var,
        cov_trace=float(var.sum()),
        mean_cost=float(costs.mean()),
        level_histogram=np.bincount(levels),
        draws=draws,
    )


def _replicate_loop(problem, v, x, config, draws, rng, form):
    draw_one = unbiased_gradient if form == "stochastic" else unbiased_gradient_finite
    samples = np.empty((draws, problem.dimension_p))
    costs = np.empty(draws)
    levels = np.empty(draws, dtype=np.int64)
    for r in range(draws):
        gs = draw_one(problem, v, x, config, rng)
        samples[r] = gs.grad
        costs[r] = gs.inner_draws
        levels[r] = gs.level
    return samples, costs, levels


def _chain_rows(s_means: np.ndarray, outer_grads: np.ndarray) -> np.ndarray:
    """Row-wise composition: (c, d, p) Jacobians with (c, d) gradients -> (c, p)."""
    return np.einsum("cdp,cd->cp", s_means, outer_grads)


def _tables_batch(problem, v, idx: np.ndarray, x):
    """Inner tables for a (c, k) index matrix -> (c, k, d) and (c, k, d, p)."""
    c, k = idx.shape
    d, p = problem.inner_dimension_d, problem.dimension_p
    flat = idx.reshape(-1)
    with np.errstate(over="ignore", invalid="ignore"):
        values = np.asarray(problem.eval_inner_batch(v, flat, x), dtype=float)
        jacs = np.asarray(problem.jac_inner_batch(v, flat, x), dtype=float)
    return values.reshape(c, k, d), jacs.reshape(c, k, d, p)


def _replicate_grouped(problem, v, x, config, draws, rng, form):
    n0 = config.base_level
    p = problem.dimension_p
    m = inner_count(problem, v)
    direct = direct_gradient(problem, v, x)

    if form == "stochastic":
        levels = sample_level(config, rng, size=draws)
        cap = None
        pmf_all = None
    else:
        n1 = m.bit_length() - 1
        cap = n1 - n0
        levels = sample_truncated_level(config, n1, rng, size=draws)
        pmf_all = truncated_level_pmf(config, n1)

    counts = np.bincount(levels)
    samples = np.empty((draws, p))
    costs = np.empty(draws)
    out_levels = np.empty(draws, dtype=np.int64)
    pos = 0
    for level in range(len(counts)):
        c = int(counts[level])
        if c == 0:
            continue
        if cap is not None and level == cap:
            # top level: exact enumeration coupled against one subsample estimate
            k = 1 << n1
            idx = rng.integers(0, m, size=(c, k))
            values, jacs = _tables_batch(problem, v, idx, x)
            with np.errstate(over="ignore", invalid="ignore"):
                y_sub = _chain_rows(
                    jacs.mean(axis=1), grad_outer_rows(problem, v, values.mean(axis=1))
                )
                nb = 1 << n0
                y_base = _chain_rows(
                    jacs[:, :nb].mean(axis=1),
                    grad_outer_rows(problem, v, values[:, :nb].mean(axis=1)),
                )
                t_mean, s_mean = exact_inner_mean(problem, v, x)
                y_exact = chain_gradient(
                    s_mean, np.asarray(problem.grad_outer(v, t_mean), dtype=float)
                )
                block = (y_exact[None, :] - y_sub) / pmf_all[level] + y_base + direct
            cost = m + k
        else:
            k = 1 << (level + n0 + 1)
            idx = rng.integers(0, m, size=(c, k))
            values, jacs = _tables_batch(problem, v, idx, x)
            half = k // 2
            nb = 1 << n0
            with np.errstate(over="ignore", invalid="ignore"):
                y_full = _chain_rows(
                    jacs.mean(axis=1), grad_outer_rows(problem, v, values.mean(axis=1))
                )
                y_first = _chain_rows(
                    jacs[:, :half].mean(axis=1),
                    grad_outer_rows(problem, v, values[:, :half].mean(axis=1)),
                )
                y_second = _chain_rows(
                    jacs[:, half:].mean(axis=1),
                    grad_outer_rows(problem, v, values[:, half:].mean(axis=1)),
                )
                y_base = _chain_rows(
                    jacs[:, :nb].mean(axis=1),
                    grad_outer_rows(problem, v, values[:, :nb].mean(axis=1)),
                )
                pmf = geometric_level_pmf(config, level) if cap is None else pmf_all[level]
                block = (y_full - 0.5 * (y_first + y_second)) / pmf + y_base + direct
            cost = k
        samples[pos : pos + c] = block
        costs[pos : pos + c] = cost
        out_levels[pos : pos + c] = level
        pos += c
    return samples, costs, out_levels
