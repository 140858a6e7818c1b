"""Composition-problem abstraction and exact (deterministic) oracles.

A composition problem is ``F(x) = E_v[ f_v(E_w[g_w(x)]) + h_v(x) ]`` where
the inner map ``g_w`` takes values in R^d, the outer function ``f_v`` is
scalar, and ``h_v`` is an optional additive term that is differentiated
directly (linear and ridge pieces that should not be pushed through the
composition).  Both component distributions may be finite families
(uniform over indices) or arbitrary samplers.

For finite/finite instances the module also provides exact objective and
gradient evaluation by full enumeration; these serve as the oracles that
every stochastic estimator is tested against.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np


class UnsupportedFamilyError(ValueError):
    """Raised when an operation needs an enumerable (finite) family."""


@dataclass(frozen=True)
class FiniteOuter:
    """Uniform distribution over outer component indices 0..count-1."""

    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"outer component count must be >= 1, got {self.count}")


@dataclass(frozen=True)
class StochasticOuter:
    """Outer components drawn by ``sampler(rng, size)`` (tokens, not indices)."""

    sampler: Callable


@dataclass(frozen=True)
class FiniteInner:
    """Uniform distribution over inner component indices 0..count-1."""

    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"inner component count must be >= 1, got {self.count}")


@dataclass(frozen=True)
class StochasticInner:
    """Inner draws produced by ``sampler(v, rng, size)``."""

    sampler: Callable


OuterFamily = Union[FiniteOuter, StochasticOuter]
InnerFamily = Union[FiniteInner, StochasticInner]


@dataclass(frozen=True)
class CompositionProblem:
    """Callable bundle defining one composition optimization problem.

    All derivative information is supplied analytically by the
    constructor; estimators and oracles never differentiate numerically.

    The per-draw callables are the contract:

    - ``eval_inner(v, w, x)``  -> length-d vector  g_w(x)
    - ``jac_inner(v, w, x)``   -> (d, p) matrix; rows index the inner
      output coordinate, columns the x coordinate
    - ``eval_outer(v, y)``     -> scalar  f_v(y)
    - ``grad_outer(v, y)``     -> length-d vector
    - ``direct_term(v, x)`` / ``direct_term_grad(v, x)`` -> optional
      additive term h_v(x) and its exact p-gradient

    The ``*_batch`` hooks are optional vectorized forms used purely for
    speed; when present they must agree with the per-draw forms.
    Instances are immutable and safe to share across threads.
    """

    dimension_p: int
    inner_dimension_d: int
    outer: OuterFamily
    inner_family: Callable[[object], InnerFamily]
    eval_inner: Callable
    jac_inner: Callable
    eval_outer: Callable
    grad_outer: Callable
    direct_term: Optional[Callable] = None
    direct_term_grad: Optional[Callable] = None
    # vectorized hooks: eval_inner_batch(v, w_array, x) -> (k, d),
    # jac_inner_batch(v, w_array, x) -> (k, d, p),
    # grad_outer_batch(v, Y) with Y of shape (c, d) -> (c, d)
    eval_inner_batch: Optional[Callable] = None
    jac_inner_batch: Optional[Callable] = None
    grad_outer_batch: Optional[Callable] = None

    def __post_init__(self):
        if self.dimension_p < 1:
            raise ValueError(f"dimension_p must be >= 1, got {self.dimension_p}")
        if self.inner_dimension_d < 1:
            raise ValueError(
                f"inner_dimension_d must be >= 1, got {self.inner_dimension_d}"
            )
        if (self.direct_term is None) != (self.direct_term_grad is None):
            raise ValueError("direct_term and direct_term_grad must be given together")


def outer_count(problem: CompositionProblem) -> int:
    if not isinstance(problem.outer, FiniteOuter):
        raise UnsupportedFamilyError("operation requires a finite outer family")
    return problem.outer.count


def inner_count(problem: CompositionProblem, v) -> int:
    family = problem.inner_family(v)
    if not isinstance(family, FiniteInner):
        raise UnsupportedFamilyError("operation requires a finite inner family")
    return family.count


def has_finite_inner(problem: CompositionProblem, v) -> bool:
    return isinstance(problem.inner_family(v), FiniteInner)


def sample_outer(problem: CompositionProblem, rng: np.random.Generator):
    """Draw one outer component (index for finite families, else a token)."""
    if isinstance(problem.outer, FiniteOuter):
        return int(rng.integers(problem.outer.count))
    return problem.outer.sampler(rng, None)


def sample_inner_tokens(problem: CompositionProblem, v, rng: np.random.Generator, size: int):
    """Draw ``size`` i.i.d. inner components (with replacement for finite families)."""
    family = problem.inner_family(v)
    if isinstance(family, FiniteInner):
        return rng.integers(0, family.count, size=size)
    return family.sampler(v, rng, size)


def inner_tables(problem: CompositionProblem, v, tokens, x):
    """Evaluate values and Jacobians of the inner map at every token.

    Returns ``(values, jacobians)`` with shapes (k, d) and (k, d, p).
    Out-of-range indices of a finite family are rejected.  Overflow is
    not raised here: non-finite entries propagate to the caller, which
    owns the error report.
    """
    d, p = problem.inner_dimension_d, problem.dimension_p
    family = problem.inner_family(v)
    if isinstance(family, FiniteInner):
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= family.count):
            raise IndexError(
                f"inner index out of range [0, {family.count}) for component {v!r}"
            )
    with np.errstate(over="ignore", invalid="ignore"):
        if problem.eval_inner_batch is not None and problem.jac_inner_batch is not None:
            values = np.asarray(problem.eval_inner_batch(v, tokens, x), dtype=float)
            jacs = np.asarray(problem.jac_inner_batch(v, tokens, x), dtype=float)
        else:
            values = np.empty((len(tokens), d))
            jacs = np.empty((len(tokens), d, p))
            for i, w in enumerate(tokens):
                values[i] = problem.eval_inner(v, w, x)
                jacs[i] = problem.jac_inner(v, w, x)
    if values.shape != (len(tokens), d) or jacs.shape != (len(tokens), d, p):
        raise ValueError(
            f"inner evaluation returned shapes {values.shape}/{jacs.shape}, "
            f"expected {(len(tokens), d)}/{(len(tokens), d, p)}"
        )
    return values, jacs


def grad_outer_rows(problem: CompositionProblem, v, ys: np.ndarray) -> np.ndarray:
    """Outer gradient at each row of ``ys`` (shape (c, d) -> (c, d))."""
    with np.errstate(over="ignore", invalid="ignore"):
        if problem.grad_outer_batch is not None:
            return np.asarray(problem.grad_outer_batch(v, ys), dtype=float)
        return np.array([problem.grad_outer(v, y) for y in ys], dtype=float)


def direct_gradient(problem: CompositionProblem, v, x) -> np.ndarray:
    if problem.direct_term_grad is None:
        return np.zeros(problem.dimension_p)
    return np.asarray(problem.direct_term_grad(v, x), dtype=float)


def direct_value(problem: CompositionProblem, v, x) -> float:
    if problem.direct_term is None:
        return 0.0
    return float(problem.direct_term(v, x))


@dataclass(frozen=True)
class InnerBatchStats:
    """Sample means of inner values and Jacobians over one batch of draws.

    ``t_bar`` has shape (d,), ``s_bar`` has shape (d, p) and ``count`` is
    the number of draws averaged.  Two equal-count batches merge by plain
    arithmetic averaging, which reproduces the mean over the concatenated
    draws exactly (up to floating-point associativity).
    """

    t_bar: np.ndarray
    s_bar: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")

    @classmethod
    def from_draws(cls, values: np.ndarray, jacobians: np.ndarray) -> "InnerBatchStats":
        return cls(t_bar=values.mean(axis=0), s_bar=jacobians.mean(axis=0),
                   count=values.shape[0])

    def merge(self, other: "InnerBatchStats") -> "InnerBatchStats":
        if self.count != other.count:
            raise ValueError(
                f"can only merge equal-count stats, got {self.count} and {other.count}"
            )
        return InnerBatchStats(
            t_bar=0.5 * (self.t_bar + other.t_bar),
            s_bar=0.5 * (self.s_bar + other.s_bar),
            count=2 * self.count,
        )


def chain_gradient(s_bar: np.ndarray, outer_grad: np.ndarray) -> np.ndarray:
    """Compose a mean Jacobian with an outer gradient: returns s_barᵀ·outer_grad."""
    return s_bar.T @ outer_grad


def exact_inner_mean(problem: CompositionProblem, v, x):
    """Full enumeration of the inner family: mean value and mean Jacobian.

    Returns ``(t_mean, s_mean)`` of shapes (d,) and (d, p).  Rejected for
    stochastic inner families, whose support cannot be enumerated.
    """
    m = inner_count(problem, v)
    values, jacs = inner_tables(problem, v, np.arange(m), x)
    return values.mean(axis=0), jacs.mean(axis=0)


def exact_component_gradient(problem: CompositionProblem, v, x) -> np.ndarray:
    """Exact gradient of ``f_v(E_w g_w(x)) + h_v(x)`` by full enumeration."""
    t_mean, s_mean = exact_inner_mean(problem, v, x)
    grad = chain_gradient(s_mean, np.asarray(problem.grad_outer(v, t_mean), dtype=float))
    return grad + direct_gradient(problem, v, x)


def exact_component_objective(problem: CompositionProblem, v, x) -> float:
    t_mean, _ = exact_inner_mean(problem, v, x)
    return float(problem.eval_outer(v, t_mean)) + direct_value(problem, v, x)


def exact_full_gradient(problem: CompositionProblem, x) -> np.ndarray:
    """Deterministic full gradient: average of component gradients over v."""
    n = outer_count(problem)
    total = np.zeros(problem.dimension_p)
    for v in range(n):
        total += exact_component_gradient(problem, v, x)
    return total / n


def exact_objective(problem: CompositionProblem, x) -> float:
    """Deterministic objective value for finite/finite instances."""
    n = outer_count(problem)
    return sum(exact_component_objective(problem, v, x) for v in range(n)) / n


def total_inner_evaluations(problem: CompositionProblem) -> int:
    """Inner evaluations consumed by one exact full-gradient pass."""
    n = outer_count(problem)
    return sum(inner_count(problem, v) for v in range(n))
