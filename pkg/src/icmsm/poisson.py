"""Latent-Poisson EM comparator.

Each subject carries an independent Poisson count of ``g -> h`` jumps per bin
with mean ``alpha[k, g, h]``. Its expectation given the panel splits into the
part where the subject is not in ``g`` before the bin closes (the prior mean
survives untouched) and the part where it is and actually jumps to ``h``::

    E[W] = alpha * (1 - y_i) + d_i * exp(-sum of the other jumps out of g)

Summed over the subjects bracketing the bin and divided by their number this
gives the update. It is computed as ``alpha + (d * e - alpha * y) / n`` so
that cells nobody can occupy keep their current value bitwise.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .em import EMConfig, FitResult, _as_problem, _sweep, run_driver
from .errors import ConfigurationError, EmptyRiskSetError
from .prodint import IntensityEstimate

log = logging.getLogger(__name__)

__all__ = ["PoissonExpectedCounts", "estep_poisson", "mstep_poisson", "run_em_poisson"]


@dataclass(frozen=True)
class PoissonExpectedCounts:
    """Expected latent counts summed over the subjects at risk in each bin.

    ``W == base * at_risk_n + excess`` cell by cell, where ``base`` is the
    estimate the expectation was taken at.
    """

    W: np.ndarray
    at_risk_n: np.ndarray
    base: np.ndarray | None = None
    excess: np.ndarray | None = None
    loglik: float = float("nan")


def _other_jumps_factor(alpha):
    rowsum = alpha.sum(axis=-1, keepdims=True)
    return np.exp(-np.maximum(rowsum - alpha, 0.0))


def poisson_counts(alpha, d, y, at_risk, allowed, loglik=float("nan")):
    """Combine multinomial expectations into expected latent Poisson counts."""
    e = _other_jumps_factor(alpha)
    excess = d * e - alpha * y[..., None]
    excess[:, ~allowed] = 0.0
    W = alpha * at_risk[:, None, None] + excess
    return PoissonExpectedCounts(W, np.asarray(at_risk), alpha.copy(), excess, loglik)


def estep_poisson(estimate: IntensityEstimate, data, *, threads=1,
                  backend=None) -> PoissonExpectedCounts:
    problem = _as_problem(data)
    _check_no_exact(problem.graph)
    d, y, ll = _sweep(problem, estimate.alpha, True, True, threads, backend)
    return poisson_counts(estimate.alpha, d, y, problem.at_risk, problem.graph.allowed, ll)


def mstep_poisson(counts: PoissonExpectedCounts, warn=True):
    """Average expected latent count over the subjects at risk in each bin.

    Returns ``(alpha, n_rows_over_one)``. Rows whose jumps sum past one are
    left as they are; the caller decides how to evaluate them.
    """
    n = np.asarray(counts.at_risk_n, dtype=float)
    empty = n == 0
    if np.any(empty & np.any(counts.W != 0, axis=(1, 2))):
        k = int(np.flatnonzero(empty & np.any(counts.W != 0, axis=(1, 2)))[0])
        raise EmptyRiskSetError(k + 1)
    alpha = np.zeros_like(counts.W)
    live = ~empty
    if counts.base is None:
        alpha[live] = counts.W[live] / n[live, None, None]
    else:
        alpha[live] = counts.base[live] + counts.excess[live] / n[live, None, None]
    # the excess can undershoot by rounding when the true value is zero
    np.maximum(alpha, 0.0, out=alpha)
    over = int(np.sum(alpha.sum(axis=-1) > 1.0))
    if over and warn:
        warnings.warn(f"latent-Poisson update: {over} bin rows have jumps summing past one",
                      RuntimeWarning, stacklevel=2)
    return alpha, over


def _check_no_exact(graph):
    if graph.exact_states:
        raise ConfigurationError(
            "the latent-Poisson estimator does not handle exactly observed states "
            f"(model marks {sorted(graph.exact_states)})")


def _poisson_update(alpha, counts, problem):
    pc = poisson_counts(alpha, counts.d, counts.y, counts.at_risk, problem.graph.allowed)
    return mstep_poisson(pc, warn=False)


def run_em_poisson(data, config: EMConfig | None = None) -> FitResult:
    """Fit the latent-Poisson EM estimator.

    Interim estimates may leave the feasible region; their bin matrices get a
    zero diagonal when the likelihood is evaluated, and the number of such
    events is reported on the result.
    """
    problem = _as_problem(data)
    _check_no_exact(problem.graph)
    return run_driver(problem, config or EMConfig(), _poisson_update, "poisson", clamp=True)
