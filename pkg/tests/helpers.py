"""Shared test utilities: scripted generators and tiny problem builders."""
import numpy as np

import simgrad as sg
from simgrad.core import CompositionProblem, FiniteOuter


def linear_outer_problem(synth: sg.SyntheticComposition, direction) -> CompositionProblem:
    """Clone a synthetic instance but with the linear outer f(y) = cᵀy."""
    direction = np.asarray(direction, dtype=float)
    prob = synth.problem
    return CompositionProblem(
        dimension_p=prob.dimension_p,
        inner_dimension_d=prob.inner_dimension_d,
        outer=FiniteOuter(1),
        inner_family=prob.inner_family,
        eval_inner=prob.eval_inner,
        jac_inner=prob.jac_inner,
        eval_outer=lambda v, y: float(direction @ y),
        grad_outer=lambda v, y: direction,
        eval_inner_batch=prob.eval_inner_batch,
        jac_inner_batch=prob.jac_inner_batch,
        grad_outer_batch=lambda v, ys: np.broadcast_to(direction, ys.shape).copy(),
    )


def quadratic_toy(target: float = 1.0) -> sg.SyntheticComposition:
    """One deterministic inner map g(x) = x with outer 0.5 (y - target)^2."""
    return sg.SyntheticComposition.from_arrays(
        targets=[[target]], lin_maps=[[[1.0]]], offsets=[[0.0]]
    )


class ScriptedRng:
    """Generator stand-in that replays prescribed levels and index draws.

    ``levels`` feeds successive ``geometric`` calls (as estimator levels,
    i.e. the raw geometric draw minus one); ``token_batches`` feeds
    successive ``integers`` calls.
    """

    def __init__(self, levels, token_batches):
        self._levels = list(levels)
        self._tokens = [np.asarray(batch) for batch in token_batches]

    def geometric(self, p, size=None):
        assert size is None, "scripted generator only supports scalar level draws"
        return self._levels.pop(0) + 1

    def integers(self, low, high=None, size=None):
        batch = self._tokens.pop(0)
        assert size is None or batch.size == size
        return batch


def central_difference(fun, x, step=1e-5):
    """Componentwise central finite differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        grad[j] = (fun(x + e) - fun(x - e)) / (2.0 * step)
    return grad


def pooled_chi_square_pvalue(observed_levels, pmf_fn, draws, min_expected=10.0):
    """Chi-square GOF p-value with tail bins pooled to keep expected counts sane.

    ``pmf_fn(k)`` must return P(level = k); the tail mass beyond the last
    unpooled bin is computed as 1 - sum of the leading bins.
    """
    from scipy import stats

    kmax = 0
    while draws * pmf_fn(kmax + 1) >= min_expected:
        kmax += 1
    observed = np.bincount(np.minimum(observed_levels, kmax), minlength=kmax + 1)
    probs = np.array([pmf_fn(k) for k in range(kmax)] + [0.0])
    probs[kmax] = 1.0 - probs.sum()
    result = stats.chisquare(observed, probs * draws)
    return float(result.pvalue)
