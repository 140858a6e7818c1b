"""Built-in problem instances.

Two families:

- a synthetic composition with quadratic outer functions and affine
  (optionally smoothly perturbed) inner maps, whose exact minimizer is
  available in closed form in the affine case, and
- the ridge-regularized Cox partial likelihood over simulated survival
  data, wired as a composition problem with a log outer function and an
  importance-adjusted risk-set inner sampler.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import CompositionProblem, FiniteInner, FiniteOuter


# ---------------------------------------------------------------------------
# Synthetic composition family
# ---------------------------------------------------------------------------

def _smooth(z):
    return z + 0.5 * np.sin(z)


def _smooth_deriv(z):
    return 1.0 + 0.5 * np.cos(z)


@dataclass(frozen=True)
class SyntheticComposition:
    """Quadratic-outer / affine-inner composition instance.

    Outer component v is ``f_v(y) = 0.5 * ||y - targets[v]||^2`` (1-strongly
    convex in y with 1-Lipschitz gradient); inner component j is
    ``g_j(x) = A_j x + b_j``, optionally followed by the componentwise
    smooth map ``z + 0.5 sin z`` when ``nonlinear_inner`` is set.  With
    affine inner maps the full objective is quadratic and ``minimizer()``
    solves it in closed form.
    """

    targets: np.ndarray      # (n, d)
    lin_maps: np.ndarray     # (m, d, p)
    offsets: np.ndarray      # (m, d)
    nonlinear_inner: bool
    problem: CompositionProblem

    @classmethod
    def from_arrays(cls, targets, lin_maps, offsets, nonlinear_inner=False):
        targets = np.asarray(targets, dtype=float)
        lin_maps = np.asarray(lin_maps, dtype=float)
        offsets = np.asarray(offsets, dtype=float)
        n, d = targets.shape
        m, d2, p = lin_maps.shape
        if d2 != d or offsets.shape != (m, d):
            raise ValueError("inconsistent shapes for targets / lin_maps / offsets")

        def eval_inner(v, w, x):
            z = lin_maps[w] @ x + offsets[w]
            return _smooth(z) if nonlinear_inner else z

        def jac_inner(v, w, x):
            z = lin_maps[w] @ x + offsets[w]
            if nonlinear_inner:
                return _smooth_deriv(z)[:, None] * lin_maps[w]
            return lin_maps[w]

        def eval_inner_batch(v, ws, x):
            z = lin_maps[ws] @ x + offsets[ws]
            return _smooth(z) if nonlinear_inner else z

        def jac_inner_batch(v, ws, x):
            if nonlinear_inner:
                z = lin_maps[ws] @ x + offsets[ws]
                return _smooth_deriv(z)[:, :, None] * lin_maps[ws]
            return lin_maps[ws]

        problem = CompositionProblem(
            dimension_p=p,
            inner_dimension_d=d,
            outer=FiniteOuter(n),
            inner_family=lambda v: FiniteInner(m),
            eval_inner=eval_inner,
            jac_inner=jac_inner,
            eval_outer=lambda v, y: 0.5 * float(np.sum((y - targets[v]) ** 2)),
            grad_outer=lambda v, y: y - targets[v],
            eval_inner_batch=eval_inner_batch,
            jac_inner_batch=jac_inner_batch,
            grad_outer_batch=lambda v, ys: ys - targets[v],
        )
        return cls(targets=targets, lin_maps=lin_maps, offsets=offsets,
                   nonlinear_inner=nonlinear_inner, problem=problem)

    def minimizer(self) -> np.ndarray:
        """Closed-form least-norm minimizer (affine inner maps only).

        The objective is ``0.5 ||A_mean x + b_mean - a_mean||^2`` plus a
        constant, so the least-norm solution is the pseudoinverse solve;
        the gradient vanishes there even when ``A_meanᵀA_mean`` is
        singular.
        """
        if self.nonlinear_inner:
            raise ValueError("closed-form minimizer requires affine inner maps")
        a_mean = self.targets.mean(axis=0)
        b_mean = self.offsets.mean(axis=0)
        return np.linalg.pinv(self.lin_maps.mean(axis=0)) @ (a_mean - b_mean)


def generate_synthetic(n: int, m: int, d: int, p: int, seed: int,
                       nonlinear_inner: bool = False) -> SyntheticComposition:
    """Reproducible random synthetic instance with controlled conditioning.

    The mean of the affine maps has its singular values clamped to
    [0.5, 2] (the clamp is distributed additively over the components so
    the family mean matches it exactly), which bounds the condition
    number of the affine case by construction.
    """
    if min(n, m, d, p) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    lin_maps = rng.standard_normal((m, d, p))
    mean_map = lin_maps.mean(axis=0)
    u, s, vt = np.linalg.svd(mean_map, full_matrices=False)
    clamped = (u * np.clip(s, 0.5, 2.0)) @ vt
    lin_maps = lin_maps + (clamped - mean_map)
    offsets = rng.standard_normal((m, d))
    targets = rng.standard_normal((n, d))
    return SyntheticComposition.from_arrays(targets, lin_maps, offsets, nonlinear_inner)


# ---------------------------------------------------------------------------
# Cox partial likelihood
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoxDataset:
    """Right-censored survival observations with precomputed risk sets.

    ``times[i]`` is the observed time (event or censoring), ``events[i]``
    is 1 when the event was observed, and ``risk_sets[k]`` holds the
    sorted indices {j : times[j] >= times[i]} for the k-th event i.
    """

    covariates: np.ndarray           # (n, p)
    times: np.ndarray                # (n,)
    events: np.ndarray               # (n,) in {0, 1}
    event_indices: np.ndarray        # indices i with events[i] == 1
    risk_sets: tuple                 # one sorted index array per event

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def censoring_fraction(self) -> float:
        return 1.0 - float(self.events.mean())


def make_cox_dataset(covariates, times, events) -> CoxDataset:
    """Validate raw arrays and precompute per-event risk sets."""
    covariates = np.asarray(covariates, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    n = covariates.shape[0]
    if covariates.ndim != 2 or times.shape != (n,) or events.shape != (n,):
        raise ValueError("covariates must be (n, p) with matching times and events")
    if not np.all(np.isin(events, (0, 1))):
        raise ValueError("event indicators must be 0 or 1")
    events = events.astype(np.int64)
    event_indices = np.flatnonzero(events == 1)
    if event_indices.size == 0:
        raise ValueError("dataset has no observed events")
    risk_sets = tuple(
        np.flatnonzero(times >= times[i]) for i in event_indices
    )
    return CoxDataset(
        covariates=covariates, times=times, events=events,
        event_indices=event_indices, risk_sets=risk_sets,
    )


def default_ground_truth(p: int) -> np.ndarray:
    """Coefficients used to simulate data: +-0.5 on the first five axes."""
    beta = np.zeros(p)
    k = min(5, p)
    beta[:k] = 0.5 * (-1.0) ** np.arange(k)
    return beta


def generate_cox_data(n: int, p: int, censor_target: float, seed: int,
                      ground_truth: Optional[np.ndarray] = None) -> CoxDataset:
    """Simulate survival data under a unit baseline hazard.

    Covariates are i.i.d. standard normal; event times are exponential
    with rate ``exp(x_iᵀ beta)``; censoring times are exponential with a
    common rate calibrated by bisection so the expected censoring
    fraction matches ``censor_target``.  Draws are retried (fresh
    censoring times) in the rare case the realized fraction lands more
    than five percentage points from the target.
    """
    if n < 1 or p < 1:
        raise ValueError("n and p must be >= 1")
    if not 0.0 < censor_target < 1.0:
        raise ValueError(f"censor_target must lie in (0, 1), got {censor_target}")
    rng = np.random.default_rng(seed)
    beta = default_ground_truth(p) if ground_truth is None else np.asarray(ground_truth, float)
    covariates = rng.standard_normal((n, p))
    hazard = np.exp(covariates @ beta)
    event_times = rng.exponential(1.0, size=n) / hazard

    # P(censored_i) = c / (c + hazard_i); calibrate the common rate c.
    def expected_fraction(c):
        return float(np.mean(c / (c + hazard)))

    lo, hi = 1e-12, 1e12
    rate = None
    for _ in range(100):
        mid = np.sqrt(lo * hi)
        if expected_fraction(mid) < censor_target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-12:
            rate = mid
            break
    rate = mid if rate is None else rate
    if abs(expected_fraction(rate) - censor_target) > 0.02:
        raise RuntimeError(
            f"censoring-rate calibration failed: reached {expected_fraction(rate):.3f} "
            f"for target {censor_target:.3f}"
        )

    for _ in range(20):
        censor_times = rng.exponential(1.0 / rate, size=n)
        events = (event_times <= censor_times).astype(np.int64)
        times = np.minimum(event_times, censor_times)
        realized = 1.0 - events.mean()
        if abs(realized - censor_target) <= 0.05 and events.sum() > 0:
            return make_cox_dataset(covariates, times, events)
    raise RuntimeError(
        f"censoring draws kept missing the target band: last fraction {realized:.3f}"
    )


def save_cox_csv(dataset: CoxDataset, path) -> None:
    """Write a dataset as CSV with columns ``y, delta, x1..xp``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "delta"] + [f"x{j + 1}" for j in range(dataset.p)])
        for i in range(dataset.n):
            writer.writerow(
                [repr(float(dataset.times[i])), int(dataset.events[i])]
                + [repr(float(val)) for val in dataset.covariates[i]]
            )


def load_cox_csv(path) -> CoxDataset:
    """Read a dataset from CSV (header ``y, delta, x1..xp`` required)."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["y", "delta"]:
            raise ValueError(f"{path}: expected header starting with 'y, delta'")
        p = len(header) - 2
        expected = [f"x{j + 1}" for j in range(p)]
        if [h.strip() for h in header[2:]] != expected:
            raise ValueError(f"{path}: covariate columns must be named x1..x{p}")
        times, events, rows = [], [], []
        for row in reader:
            if not row:
                continue
            times.append(float(row[0]))
            events.append(int(row[1]))
            rows.append([float(val) for val in row[2:]])
    return make_cox_dataset(np.asarray(rows), np.asarray(times), np.asarray(events))


@dataclass(frozen=True)
class CoxProblem:
    """Ridge-regularized Cox partial likelihood wired as a composition.

    Outer components range over observed events only; component k (event
    i) pairs the scaled log outer function with a risk-set-restricted
    inner family: inner index j maps to ``(|R_i| / n) * exp(x_jᵀ beta)``
    for j uniform on the risk set R_i, which preserves the inner
    expectation ``(1/n) sum_{j in R_i} exp(x_jᵀ beta)`` while keeping
    every sampled value strictly positive.  The linear term and the ridge
    penalty travel as the directly-differentiated additive term.

    The composition objective equals the direct partial-likelihood
    objective minus ``log_offset`` (the constant from normalizing the sum
    inside the log by 1/n); gaps F - F* are unaffected.
    """

    dataset: CoxDataset
    problem: CompositionProblem
    log_offset: float


def cox_problem(dataset: CoxDataset) -> CoxProblem:
    x_mat = dataset.covariates
    n = dataset.n
    p = dataset.p
    events = dataset.event_indices
    risk_sets = dataset.risk_sets
    n_events = events.size
    scale = n_events / n  # uniform-over-events average times this = (1/n) sum over events

    def eval_inner(v, w, beta):
        rs = risk_sets[v]
        val = (rs.size / n) * np.exp(x_mat[rs[w]] @ beta)
        return np.array([val])

    def jac_inner(v, w, beta):
        rs = risk_sets[v]
        j = rs[w]
        return ((rs.size / n) * np.exp(x_mat[j] @ beta)) * x_mat[j][None, :]

    def eval_inner_batch(v, ws, beta):
        rows = risk_sets[v][np.asarray(ws)]
        return ((risk_sets[v].size / n) * np.exp(x_mat[rows] @ beta))[:, None]

    def jac_inner_batch(v, ws, beta):
        rows = risk_sets[v][np.asarray(ws)]
        vals = (risk_sets[v].size / n) * np.exp(x_mat[rows] @ beta)
        return (vals[:, None] * x_mat[rows])[:, None, :]

    def eval_outer(v, y):
        return scale * float(np.log(y[0]))

    def grad_outer(v, y):
        return np.array([scale / y[0]])

    def grad_outer_batch(v, ys):
        return scale / ys

    def direct_term(v, beta):
        i = events[v]
        return -scale * float(x_mat[i] @ beta) + 0.5 * float(beta @ beta)

    def direct_term_grad(v, beta):
        i = events[v]
        return -scale * x_mat[i] + beta

    problem = CompositionProblem(
        dimension_p=p,
        inner_dimension_d=1,
        outer=FiniteOuter(n_events),
        inner_family=lambda v: FiniteInner(risk_sets[v].size),
        eval_inner=eval_inner,
        jac_inner=jac_inner,
        eval_outer=eval_outer,
        grad_outer=grad_outer,
        direct_term=direct_term,
        direct_term_grad=direct_term_grad,
        eval_inner_batch=eval_inner_batch,
        jac_inner_batch=jac_inner_batch,
        grad_outer_batch=grad_outer_batch,
    )
    return CoxProblem(dataset=dataset, problem=problem,
                      log_offset=scale * np.log(n))


def _descending_order_stats(dataset: CoxDataset, beta: np.ndarray):
    """Shared pieces for the direct objective/gradient.

    Observations are sorted by descending time so that the risk set of an
    event is a prefix of the sorted order (ties included via the >=
    comparison); ``prefix_len`` maps each event to its prefix length.
    """
    scores = dataset.covariates @ beta
    order = np.argsort(-dataset.times, kind="stable")
    sorted_scores = scores[order]
    neg_sorted_times = -dataset.times[order]
    prefix_len = np.searchsorted(
        neg_sorted_times, -dataset.times[dataset.event_indices], side="right"
    )
    return scores, order, sorted_scores, prefix_len


def cox_objective(problem: CoxProblem, beta) -> float:
    """Averaged negative partial log-likelihood plus the ridge term.

    Direct evaluation by full risk-set enumeration; the per-prefix
    log-sum-exp accumulates with a running max so the exponentials never
    overflow.
    """
    beta = np.asarray(beta, dtype=float)
    ds = problem.dataset
    scores, order, sorted_scores, prefix_len = _descending_order_stats(ds, beta)
    prefix_lse = np.logaddexp.accumulate(sorted_scores)
    total = float(np.sum(-scores[ds.event_indices] + prefix_lse[prefix_len - 1]))
    return total / ds.n + 0.5 * float(beta @ beta)


def cox_full_gradient(problem: CoxProblem, beta) -> np.ndarray:
    """Direct gradient by full risk-set enumeration.

    A running-max rescaling scan keeps the prefix sums of ``exp(score)``
    and ``exp(score) * x`` finite for any beta.
    """
    beta = np.asarray(beta, dtype=float)
    ds = problem.dataset
    scores, order, sorted_scores, prefix_len = _descending_order_stats(ds, beta)
    sorted_cov = ds.covariates[order]
    n = ds.n
    weighted_means = np.empty((n, ds.p))
    shift = -np.inf
    sum_w = 0.0
    sum_wx = np.zeros(ds.p)
    for k in range(n):
        s = sorted_scores[k]
        if s > shift:
            rescale = np.exp(shift - s) if np.isfinite(shift) else 0.0
            sum_w *= rescale
            sum_wx *= rescale
            shift = s
        w = np.exp(s - shift)
        sum_w += w
        sum_wx += w * sorted_cov[k]
        weighted_means[k] = sum_wx / sum_w
    grad = (weighted_means[prefix_len - 1] - ds.covariates[ds.event_indices]).sum(axis=0)
    return grad / n + beta
