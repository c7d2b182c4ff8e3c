"""EM variants whose M-step is a small linear solve.

``canonical``: one jump at most per subject and bin, with the stay probability
``1 - sum_h alpha`` in the complete-data likelihood. For each state ``g`` and
bin the stationarity conditions read ``alpha = D (1 - M alpha)`` with ``D`` the
diagonal of ``d_h / (y - sum d + d_h)`` over the successors and ``M`` the
hollow all-ones matrix, so ``alpha = (I + D M)^{-1} D 1``.

``multinoulli``: one jump at most in the whole cohort per bin. Same form with
a single joint system over all allowed transitions and the number of subjects
at risk in place of ``y``.
"""
from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .em import EMConfig, ExpectedCounts, FitResult, _as_problem, _enforce_row_bound, run_driver
from .errors import ConfigurationError, NumericalError, SingularMStepError

log = logging.getLogger(__name__)

__all__ = ["PIVOT_THRESHOLD", "linear_system", "solve_block", "mstep_canonical",
           "mstep_multinoulli", "run_em_variant", "VARIANTS"]

PIVOT_THRESHOLD = 1e-12
RESIDUAL_TOL = 1e-10
VARIANTS = ("canonical", "multinoulli")


def linear_system(d, total):
    """Ratios ``Q`` and system matrix ``I + diag(Q) M`` for one block.

    ``d`` holds the expected jumps of the block, ``total`` the occupancy (or
    the number at risk). ``Q`` is zero where ``d`` is.
    """
    d = np.asarray(d, dtype=float)
    den = total - d.sum() + d
    q = np.zeros_like(d)
    nz = d != 0
    if np.any(den[nz] <= 0):
        raise ZeroDivisionError("expected jumps exceed the block total")
    q[nz] = d[nz] / den[nz]
    m = len(d)
    hollow = np.ones((m, m)) - np.eye(m)
    return q, np.eye(m) + q[:, None] * hollow


def solve_block(d, total, where=""):
    """Solve ``alpha = D (1 - M alpha)`` for one block. Returns ``alpha``."""
    try:
        q, A = linear_system(d, total)
    except ZeroDivisionError:
        raise SingularMStepError(f"singular M-step system{where}: no mass left to stay") from None
    if not np.any(q):
        return np.zeros_like(q)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(A, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < PIVOT_THRESHOLD:
        raise SingularMStepError(f"singular M-step system{where}: no mass left to stay")
    alpha = lu_solve((lu, piv), q, check_finite=False)
    resid = alpha - q * (1.0 - (alpha.sum() - alpha))
    if np.max(np.abs(resid)) > RESIDUAL_TOL:
        raise NumericalError(f"M-step solve{where} misses its fixed point by "
                             f"{np.max(np.abs(resid)):.3g}")
    return alpha


def _finish(alpha, clamps, variant):
    neg = alpha < 0
    n_neg = int(neg.sum())
    if n_neg:
        warnings.warn(f"{variant} M-step: {n_neg} negative jumps clamped to zero",
                      RuntimeWarning, stacklevel=3)
        alpha[neg] = 0.0
    return _enforce_row_bound(alpha), clamps + n_neg


def mstep_canonical(counts: ExpectedCounts, graph):
    """Per state and bin solve. Returns ``(alpha, n_clamped)``."""
    K, H, _ = counts.d.shape
    alpha = np.zeros((K, H, H))
    for g in range(H):
        succ = np.flatnonzero(graph.allowed[g])
        if len(succ) == 0:
            continue
        for k in range(K):
            alpha[k, g, succ] = solve_block(
                counts.d[k, g, succ], counts.y[k, g],
                where=f" for state {g + 1} in bin {k + 1}")
    return _finish(alpha, 0, "canonical")


def mstep_multinoulli(counts: ExpectedCounts, graph, n_k=None):
    """Per bin joint solve over all transitions. Returns ``(alpha, n_clamped)``."""
    K, H, _ = counts.d.shape
    n_k = counts.at_risk if n_k is None else np.asarray(n_k)
    rows, cols = np.nonzero(graph.allowed)
    alpha = np.zeros((K, H, H))
    for k in range(K):
        alpha[k, rows, cols] = solve_block(counts.d[k, rows, cols], float(n_k[k]),
                                           where=f" in bin {k + 1}")
    return _finish(alpha, 0, "multinoulli")


def _update_for(variant):
    if variant == "canonical":
        return lambda alpha, counts, problem: mstep_canonical(counts, problem.graph)
    if variant == "multinoulli":
        return lambda alpha, counts, problem: mstep_multinoulli(counts, problem.graph)
    raise ConfigurationError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


def run_em_variant(data, config: EMConfig | None = None,
                   variant: str = "canonical") -> FitResult:
    update = _update_for(variant)
    problem = _as_problem(data)
    if problem.graph.exact_states:
        raise ConfigurationError(
            f"the {variant} estimator does not handle exactly observed states")
    return run_driver(problem, config or EMConfig(), update, variant)
