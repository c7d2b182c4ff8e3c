"""Multinomial EM for the jump sizes of the cumulative intensities.

Each iteration evaluates, for every bin, the expected number of subjects in
state ``g`` just before the bin closes (``y``) and the expected number of
``g -> h`` jumps inside it (``d``), given the panel observations and the
current jumps. The update maximises the expected complete-data likelihood
over ``{alpha >= 0, sum_h alpha[k, g, h] <= 1}``.

The forward/backward work is delegated to :mod:`icmsm.kernels`; everything in
this module operates on the aggregated ``(K, H, H)`` and ``(K, H)`` grids.
"""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import kernels
from .errors import (
    ConfigurationError, MaxIterationsError, NonFiniteLoglikError, NumericalError,
    ZeroDenominatorError,
)
from .prodint import IntensityEstimate, _open_out, stay_probabilities, uniform_estimate
from .panel import (
    BinGrid, IntervalSet, PanelDataset, build_bin_grid, observation_intervals,
)

log = logging.getLogger(__name__)

__all__ = [
    "ExpectedCounts", "EMConfig", "FitResult", "Problem", "prepare", "estep",
    "estep_per_subject", "mstep", "observed_loglik", "reduced_gradient", "kkt_residual",
    "is_local_max", "unfortunate_estimate", "initial_estimate", "run_em", "run_driver",
    "write_trace_csv", "CRITERIA", "STOP_REASONS",
]

CRITERIA = ("max_intensity_change", "loglik_change", "reduced_gradient")
STOP_REASONS = {
    "max_intensity_change": "intensity_tol",
    "loglik_change": "loglik_tol",
    "reduced_gradient": "kkt",
}
LOGLIK_DROP_REPORT = 1e-6


@dataclass(frozen=True)
class ExpectedCounts:
    """Aggregated expectations at one estimate.

    ``d[k, g, h]`` expected jumps, ``y[k, g]`` expected occupancy before the
    bin's right end, ``at_risk[k]`` number of subjects bracketing bin ``k``.
    ``loglik`` is the observed-data log-likelihood at the same estimate.
    ``per_subject_d``/``per_subject_y`` are filled only on request.
    """

    d: np.ndarray
    y: np.ndarray
    at_risk: np.ndarray
    loglik: float = float("nan")
    per_subject_d: np.ndarray | None = None
    per_subject_y: np.ndarray | None = None


@dataclass(frozen=True)
class Problem:
    """Dataset with its bin grid and interval layout, computed once per fit."""

    dataset: PanelDataset
    grid: BinGrid
    intervals: IntervalSet

    @property
    def graph(self):
        return self.dataset.graph

    @property
    def at_risk(self):
        return self.intervals.at_risk()


def prepare(dataset: PanelDataset, grid: BinGrid | None = None) -> Problem:
    grid = grid if grid is not None else build_bin_grid(dataset)
    return Problem(dataset, grid, observation_intervals(dataset, grid))


def _as_problem(data):
    return data if isinstance(data, Problem) else prepare(data)


def _raise_zero(problem: Problem, bad: int, estimate_alpha, stay, backend):
    iv = problem.intervals
    edges = problem.grid.edges
    sid = iv.subject_ids[iv.subject[bad]]
    one = iv.take(np.array([bad]))
    _, _, ll, _ = kernels.sweep(estimate_alpha, stay, one, want_counts=False,
                                backend=backend)
    value = math.exp(ll) if ll > -745 else 0.0
    raise ZeroDenominatorError(sid, (float(edges[iv.start[bad]]), float(edges[iv.end[bad]])),
                               value)


def _sweep(problem, alpha, want_counts, clamp, threads, backend):
    stay, _ = stay_probabilities(alpha, clamp=clamp)
    d, y, ll, bad = kernels.sweep(alpha, stay, problem.intervals, want_counts,
                                  backend=backend, threads=threads)
    if bad >= 0:
        _raise_zero(problem, bad, alpha, stay, backend)
    return d, y, ll


def estep(estimate: IntensityEstimate, data, *, threads=1, backend=None,
          clamp=False, per_subject=False) -> ExpectedCounts:
    """Expected jump and occupancy counts at ``estimate``.

    ``data`` is a :class:`PanelDataset` or a prepared :class:`Problem`.
    Intervals ending in an arrival into an exactly observed state condition on
    the arrival happening at the observed time.
    """
    problem = _as_problem(data)
    d, y, ll = _sweep(problem, estimate.alpha, True, clamp, threads, backend)
    psd = psy = None
    if per_subject:
        psd, psy = estep_per_subject(estimate, problem, backend=backend, clamp=clamp)
    return ExpectedCounts(d, y, problem.at_risk, ll, psd, psy)


def estep_per_subject(estimate: IntensityEstimate, data, *, backend=None, clamp=False):
    """Per-subject ``d`` and ``y`` grids, shapes ``(n, K, H, H)`` and ``(n, K, H)``."""
    problem = _as_problem(data)
    iv = problem.intervals
    stay, _ = stay_probabilities(estimate.alpha, clamp=clamp)
    n = len(problem.dataset)
    K, H = estimate.K, estimate.H
    psd = np.zeros((n, K, H, H))
    psy = np.zeros((n, K, H))
    for i in range(n):
        rows = np.flatnonzero(iv.subject == i)
        d, y, _, bad = kernels.sweep(estimate.alpha, stay, iv.take(rows), True,
                                     backend=backend)
        if bad >= 0:
            _raise_zero(problem, int(rows[bad]), estimate.alpha, stay, backend)
        psd[i], psy[i] = d, y
    return psd, psy


def observed_loglik(estimate: IntensityEstimate, data, *, threads=1, backend=None,
                    clamp=False) -> float:
    """Observed-data log-likelihood of the panel under ``estimate``."""
    problem = _as_problem(data)
    try:
        _, _, ll = _sweep(problem, estimate.alpha, False, clamp, threads, backend)
    except ZeroDenominatorError as exc:
        raise NonFiniteLoglikError(str(exc)) from None
    return ll


def _enforce_row_bound(alpha):
    """Push rows whose total exceeds one by rounding back to at most one."""
    sums = alpha.sum(axis=-1)
    over = np.argwhere(sums > 1.0)
    for k, g in over:
        row = alpha[k, g]
        row /= row.sum()
        while row.sum() > 1.0:
            j = int(np.argmax(row))
            row[j] = np.nextafter(row[j], 0.0)
    return alpha


def _ratio(num, den):
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=(num != 0))
    return out


def multipliers(counts: ExpectedCounts) -> np.ndarray:
    """Row multipliers ``max(0, sum_h d - y)`` per bin and state."""
    return np.maximum(0.0, counts.d.sum(axis=-1) - counts.y)


def mstep(counts: ExpectedCounts, graph=None) -> np.ndarray:
    """Constrained maximiser of the expected complete-data likelihood.

    ``d / y`` when the row of expected jumps fits in the occupancy, otherwise
    the jumps normalised to sum to one. Zero-over-zero cells are zero. Returns
    the new jump grid; rows are guaranteed to sum to at most one exactly.
    """
    d, y = counts.d, counts.y
    dsum = d.sum(axis=-1)
    mu = np.maximum(0.0, dsum - y)
    den = np.where(mu > 0, dsum, y)
    alpha = _ratio(d, den[..., None])
    if graph is not None:
        alpha[:, ~graph.allowed] = 0.0
    return _enforce_row_bound(alpha)


def reduced_gradient(alpha, counts: ExpectedCounts) -> np.ndarray:
    """``y - d / alpha + mu`` on every cell with a positive jump.

    Cells with a zero jump (and hence zero expected jumps) are reported as
    zero: their bound multiplier absorbs the remaining term. Subnormal jumps
    count as zero since ``d / alpha`` carries no digits there.
    """
    alpha = np.asarray(alpha)
    mu = multipliers(counts)
    base = counts.y + mu
    grad = np.broadcast_to(base[..., None], alpha.shape).copy()
    pos = alpha >= np.finfo(float).tiny
    grad[pos] -= counts.d[pos] / alpha[pos]
    grad[~pos] = 0.0
    return grad


def kkt_residual(alpha, grad) -> float:
    """Largest violation of the approximate KKT conditions.

    A cell that would gain from a larger jump contributes ``-grad``; a cell
    that would gain from a smaller one contributes ``alpha * grad``, which
    vanishes as the jump reaches its zero bound. Both are in expected counts.
    """
    alpha = np.asarray(alpha)
    grad = np.asarray(grad)
    viol = np.maximum(-grad, alpha * np.maximum(grad, 0.0))
    return float(np.max(viol, initial=0.0))


def is_local_max(alpha, counts: ExpectedCounts, tol=1e-9) -> bool:
    """True when every reduced-gradient entry vanishes.

    ``tol`` is relative to the largest occupancy count, so it does not depend
    on the number of subjects.
    """
    grad = reduced_gradient(alpha, counts)
    scale = max(1.0, float(np.max(counts.y, initial=0.0)))
    return bool(np.max(np.abs(grad), initial=0.0) <= tol * scale)


def unfortunate_estimate(graph, taus, front_mass=0.9, front_fraction=0.1):
    """Total mass one per transition with ``front_mass`` in the first bins.

    The first ``floor(front_fraction * K)`` bins share ``front_mass``; the
    remaining bins share the rest evenly.
    """
    taus = np.asarray(taus, dtype=float)
    K = len(taus)
    m = int(math.floor(front_fraction * K))
    if m < 1 or m >= K:
        raise ConfigurationError(
            f"cannot front-load {front_fraction:.0%} of the bins with K={K}")
    col = np.empty(K)
    col[:m] = front_mass / m
    col[m:] = (1.0 - front_mass) / (K - m)
    alpha = np.zeros((K, graph.num_states, graph.num_states))
    alpha[:, graph.allowed] = col[:, None]
    if np.any(alpha.sum(axis=-1) > 1.0):
        raise ConfigurationError(
            "front-loaded initial jumps leave the feasible region; more bins are needed")
    return IntensityEstimate(alpha, taus, graph)


@dataclass
class EMConfig:
    tolerance: float = 1e-4
    criterion: str = "max_intensity_change"
    max_iterations: int = 5000
    # "uniform", "unfortunate", or an IntensityEstimate / (K, H, H) array
    initial: object = "uniform"
    raise_on_max_iter: bool = False
    threads: int = 1
    backend: str | None = None
    progress_every: int = 50
    progress: Callable | None = None

    def validate(self):
        if not (isinstance(self.tolerance, (int, float)) and self.tolerance > 0
                and math.isfinite(self.tolerance)):
            raise ConfigurationError(f"tolerance must be positive, got {self.tolerance!r}")
        if self.criterion not in CRITERIA:
            raise ConfigurationError(
                f"unknown criterion {self.criterion!r}; choose from {', '.join(CRITERIA)}")
        if isinstance(self.max_iterations, bool) or int(self.max_iterations) != self.max_iterations \
                or self.max_iterations < 1:
            raise ConfigurationError(
                f"max_iterations must be a positive integer, got {self.max_iterations!r}")
        if int(self.threads) < 1:
            raise ConfigurationError("threads must be at least 1")
        return self


def initial_estimate(config: EMConfig, problem: Problem) -> IntensityEstimate:
    graph, taus = problem.graph, problem.grid.taus
    init = config.initial
    if isinstance(init, str):
        if init == "uniform":
            return uniform_estimate(graph, taus)
        if init == "unfortunate":
            return unfortunate_estimate(graph, taus)
        raise ConfigurationError(f"unknown initial estimate {init!r}")
    alpha = init.alpha if isinstance(init, IntensityEstimate) else np.asarray(init, float)
    if alpha.shape != (len(taus), graph.num_states, graph.num_states):
        raise ConfigurationError(
            f"initial grid has shape {alpha.shape}, data need "
            f"{(len(taus), graph.num_states, graph.num_states)}")
    if isinstance(init, IntensityEstimate) and not np.array_equal(init.taus, taus):
        raise ConfigurationError("initial estimate is defined on a different bin grid")
    if np.any(alpha[:, ~graph.allowed] != 0):
        raise ConfigurationError("initial grid has jumps outside the allowed transitions")
    if np.any(alpha[:, graph.allowed] <= 0):
        raise ConfigurationError("initial jumps must be strictly positive on every transition")
    if np.any(alpha.sum(axis=-1) > 1.0):
        raise ConfigurationError("initial jumps out of some state sum to more than one")
    return IntensityEstimate(alpha.copy(), taus, graph)


@dataclass(frozen=True)
class FitResult:
    estimate: IntensityEstimate
    iterations: int
    loglik_trace: np.ndarray
    max_delta_trace: np.ndarray
    max_reduced_gradient_trace: np.ndarray
    final_reduced_gradient: np.ndarray
    converged: bool
    stop_reason: str
    variant: str = "multinomial"
    initial: str = "uniform"
    clamp_events: int = 0
    loglik_decreases: tuple = ()
    final_counts: ExpectedCounts | None = field(default=None, repr=False)
    wall_time: float = 0.0

    @property
    def loglik(self):
        return float(self.loglik_trace[-1]) if len(self.loglik_trace) else float("nan")

    @property
    def max_reduced_gradient(self):
        return float(np.max(np.abs(self.final_reduced_gradient), initial=0.0))

    @property
    def kkt_residual(self):
        return kkt_residual(self.estimate.alpha, self.final_reduced_gradient)


# An update takes (alpha, counts, problem) and returns (new_alpha, clamp_events).
Update = Callable[[np.ndarray, ExpectedCounts, Problem], tuple]


def run_driver(data, config: EMConfig, update: Update, variant: str,
               clamp=False, gradient_counts=None) -> FitResult:
    """Generic EM loop shared by all estimators.

    One forward/backward pass per iteration: the pass at the new estimate
    yields both its log-likelihood (recorded) and the counts for the next
    update. ``clamp`` allows infeasible interim estimates, whose bin matrices
    get a zero diagonal for likelihood evaluation.
    """
    config = replace(config).validate()
    problem = _as_problem(data)
    t0 = time.perf_counter()
    start = initial_estimate(config, problem)
    init_kind = config.initial if isinstance(config.initial, str) else "custom"
    graph = problem.graph
    threads = int(config.threads)

    def expect(alpha):
        d, y, ll = _sweep(problem, alpha, True, clamp, threads, config.backend)
        if not math.isfinite(ll):
            raise NonFiniteLoglikError(f"log-likelihood is {ll}")
        return ExpectedCounts(d, y, problem.at_risk, ll)

    cur = start.alpha
    try:
        counts = expect(cur)
    except NumericalError as exc:
        exc.iteration = 0
        raise
    lls, deltas, grads = [], [], []
    decreases = []
    clamps = 0
    stop = "max_iter"
    converged = False
    for it in range(1, int(config.max_iterations) + 1):
        try:
            new, n_clamped = update(cur, counts, problem)
            new[:, ~graph.allowed] = 0.0
            clamps += n_clamped
            new_counts = expect(new)
        except NumericalError as exc:
            exc.iteration = it
            raise
        delta = float(np.max(np.abs(new - cur), initial=0.0))
        grad = reduced_gradient(new, gradient_counts(new, new_counts, problem)
                                if gradient_counts else new_counts)
        gmax = float(np.max(np.abs(grad), initial=0.0))
        ll = new_counts.loglik
        if lls and ll < lls[-1] - LOGLIK_DROP_REPORT:
            decreases.append((it, lls[-1] - ll))
            log.info("%s EM: log-likelihood fell by %.3g at iteration %d",
                     variant, lls[-1] - ll, it)
        prev_ll = lls[-1] if lls else counts.loglik
        lls.append(ll)
        deltas.append(delta)
        grads.append(gmax)
        if config.progress is not None and config.progress_every and \
                it % config.progress_every == 0:
            config.progress(it, delta, ll)
        cur, counts = new, new_counts
        value = {"max_intensity_change": delta,
                 "loglik_change": abs(ll - prev_ll),
                 "reduced_gradient": kkt_residual(new, grad)}[config.criterion]
        if value < config.tolerance:
            stop = STOP_REASONS[config.criterion]
            converged = True
            break
    if clamps:
        warnings.warn(f"{variant} EM: {clamps} bin rows left the feasible region and "
                      "were clamped for likelihood evaluation", RuntimeWarning,
                      stacklevel=2)
    final_grad = reduced_gradient(cur, gradient_counts(cur, counts, problem)
                                  if gradient_counts else counts)
    result = FitResult(
        estimate=IntensityEstimate(cur, problem.grid.taus, graph),
        iterations=len(lls),
        loglik_trace=np.array(lls),
        max_delta_trace=np.array(deltas),
        max_reduced_gradient_trace=np.array(grads),
        final_reduced_gradient=final_grad,
        converged=converged,
        stop_reason=stop,
        variant=variant,
        initial=init_kind,
        clamp_events=clamps,
        loglik_decreases=tuple(decreases),
        final_counts=counts,
        wall_time=time.perf_counter() - t0,
    )
    log.info("%s EM: %s after %d iterations, loglik %.6f", variant, stop,
             result.iterations, result.loglik)
    if not converged and config.raise_on_max_iter:
        raise MaxIterationsError(result)
    return result


def _multinomial_update(alpha, counts, problem):
    return mstep(counts, problem.graph), 0


def run_em(data, config: EMConfig | None = None) -> FitResult:
    """Fit the multinomial EM estimator.

    ``data`` is a :class:`PanelDataset` or a prepared :class:`Problem`.
    """
    return run_driver(data, config or EMConfig(), _multinomial_update, "multinomial")


def write_trace_csv(result: FitResult, dest=None):
    """``iteration,loglik,max_delta,max_reduced_gradient`` rows."""
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loglik", "max_delta", "max_reduced_gradient"])
        for j in range(result.iterations):
            w.writerow([j + 1, repr(float(result.loglik_trace[j])),
                        repr(float(result.max_delta_trace[j])),
                        repr(float(result.max_reduced_gradient_trace[j]))])
    return _open_out(dest, emit)
