"""Discrete transition matrices per bin and their ordered products.

An estimate is a grid of jumps ``alpha[k, g, h]`` (bin ``k`` zero-based here,
states zero-based) over the allowed transitions. Bin ``k`` carries the
row-stochastic matrix ``I + dA(tau_k)``: off-diagonals are the jumps and the
diagonal is one minus the row total. Transition probabilities between two
times are ordered products of these matrices.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleEstimateError, ShapeMismatchError, ZeroDenominatorError
from .graph import TransitionGraph
from .panel import format_time

log = logging.getLogger(__name__)

__all__ = [
    "IntensityEstimate", "IntervalCache", "FEASIBILITY_SLACK", "PROB_FLOOR",
    "stay_probabilities", "bin_matrix", "bin_matrices", "transition_matrix",
    "build_interval_cache", "write_estimate_csv", "read_estimate_csv",
    "write_probabilities_csv", "uniform_estimate",
]

FEASIBILITY_SLACK = 1e-12
PROB_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class IntensityEstimate:
    """Jump sizes of the cumulative intensities on the bin grid.

    ``alpha`` has shape ``(K, H, H)`` with a zero diagonal and zeros outside the
    allowed transitions. ``taus`` are the right bin endpoints.
    """

    alpha: np.ndarray
    taus: np.ndarray
    graph: TransitionGraph

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        taus = np.asarray(self.taus, dtype=float)
        H = self.graph.num_states
        if alpha.shape != (len(taus), H, H):
            raise ShapeMismatchError(
                f"alpha has shape {alpha.shape}, expected {(len(taus), H, H)}")
        if np.any(alpha[:, ~self.graph.allowed] != 0):
            raise ValueError("non-zero jump on a transition outside the graph")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "taus", taus)

    @property
    def K(self):
        return len(self.taus)

    @property
    def H(self):
        return self.graph.num_states

    def row_sums(self):
        return self.alpha.sum(axis=2)

    def is_feasible(self, slack=FEASIBILITY_SLACK):
        return bool(np.all(self.alpha >= 0) and np.all(self.row_sums() <= 1 + slack))

    def jumps(self, g, h):
        """Jump sizes of transition ``g -> h`` (1-based states) per bin."""
        return self.alpha[:, g - 1, h - 1]

    def cumulative(self, g, h, t):
        """Right-continuous cumulative intensity ``A_gh`` at time(s) ``t``."""
        csum = np.concatenate(([0.0], np.cumsum(self.jumps(g, h))))
        idx = np.searchsorted(self.taus, np.asarray(t, dtype=float), side="right")
        return csum[idx]

    def with_alpha(self, alpha):
        return IntensityEstimate(alpha, self.taus, self.graph)


def uniform_estimate(graph: TransitionGraph, taus) -> IntensityEstimate:
    """``1/K`` on every allowed transition and bin."""
    taus = np.asarray(taus, dtype=float)
    K = len(taus)
    alpha = np.zeros((K, graph.num_states, graph.num_states))
    alpha[:, graph.allowed] = 1.0 / K
    return IntensityEstimate(alpha, taus, graph)


def stay_probabilities(alpha, clamp=False):
    """Diagonal of every bin matrix, ``1 - sum_h alpha[k, g, h]``.

    Rows whose total exceeds one by more than the slack raise
    :class:`InfeasibleEstimateError` unless ``clamp`` is set, in which case the
    diagonal is set to zero. Returns ``(stay, n_clamped)``.
    """
    alpha = np.asarray(alpha)
    if np.any(alpha < 0):
        k, g, h = np.argwhere(alpha < 0)[0]
        raise InfeasibleEstimateError(
            f"negative jump {alpha[k, g, h]:.3g} for {g + 1}->{h + 1} in bin {k + 1}")
    stay = 1.0 - alpha.sum(axis=-1)
    over = stay < -FEASIBILITY_SLACK
    n_over = int(over.sum())
    if n_over and not clamp:
        k, g = np.argwhere(over)[0]
        raise InfeasibleEstimateError(
            f"jumps out of state {g + 1} in bin {k + 1} sum to {1 - stay[k, g]:.12g} > 1")
    return np.maximum(stay, 0.0), n_over


def bin_matrix(estimate: IntensityEstimate, k: int) -> np.ndarray:
    """Matrix ``I + dA(tau_k)`` for bin ``k`` (1-based)."""
    if not 1 <= k <= estimate.K:
        raise IndexError(f"bin {k} outside 1..{estimate.K}")
    a = estimate.alpha[k - 1:k]
    stay, _ = stay_probabilities(a)
    m = a[0].copy()
    np.fill_diagonal(m, stay[0])
    return m


def bin_matrices(estimate: IntensityEstimate, clamp=False) -> np.ndarray:
    """All bin matrices stacked as ``(K, H, H)``."""
    stay, _ = stay_probabilities(estimate.alpha, clamp=clamp)
    m = estimate.alpha.copy()
    idx = np.arange(estimate.H)
    m[:, idx, idx] = stay
    return m


def _bin_range(taus, s, t):
    # zero-based bins k with s < tau_k <= t
    lo = int(np.searchsorted(taus, s, side="right"))
    hi = int(np.searchsorted(taus, t, side="right"))
    return lo, hi


def transition_matrix(estimate: IntensityEstimate, s: float, t: float,
                      mats=None) -> np.ndarray:
    """``P(s, t)``: ordered product of bin matrices over ``s < tau_k <= t``."""
    if s < 0 or t < s:
        raise ValueError(f"need 0 <= s <= t, got s={s}, t={t}")
    if mats is None:
        mats = bin_matrices(estimate)
    lo, hi = _bin_range(estimate.taus, s, t)
    p = np.eye(estimate.H)
    for k in range(lo, hi):
        p = p @ mats[k]
    return p


def transition_path(estimate: IntensityEstimate, s: float, times, mats=None):
    """``P(s, t)`` for each ``t`` in the non-decreasing sequence ``times``."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise ValueError("evaluation times must be non-decreasing")
    if mats is None:
        mats = bin_matrices(estimate)
    out = np.empty((len(times), estimate.H, estimate.H))
    p = np.eye(estimate.H)
    lo, _ = _bin_range(estimate.taus, s, s)
    k = lo
    for j, t in enumerate(times):
        if t < s:
            raise ValueError(f"evaluation time {t} precedes start {s}")
        _, hi = _bin_range(estimate.taus, s, t)
        while k < hi:
            p = p @ mats[k]
            k += 1
        out[j] = p
    return out


@dataclass(frozen=True)
class IntervalCache:
    """Forward rows and backward columns across the bins of one interval.

    ``forward[j]`` is row ``a`` of ``P(l, tau_{start+j})`` and ``backward[j]``
    is column ``b`` of ``P(tau_{start+j}, r)``, for ``j = 0..L``. Their inner
    product is ``P_ab(l, r)`` at every ``j``.
    """

    start: int
    end: int
    a: int
    b: int
    forward: np.ndarray
    backward: np.ndarray
    denominator: float


def build_interval_cache(estimate: IntensityEstimate, l: float, r: float, a: int,
                         b: int, subject=None) -> IntervalCache:
    """Cache propagation vectors for the interval ``(l, r]`` from state ``a`` to ``b``.

    ``l`` and ``r`` must be grid times (0 or some ``tau_k``); states are 1-based.
    """
    edges = np.concatenate(([0.0], estimate.taus))
    s = int(np.searchsorted(edges, l))
    e = int(np.searchsorted(edges, r))
    if s >= len(edges) or e >= len(edges) or edges[s] != l or edges[e] != r or e <= s:
        raise ValueError(f"({l}, {r}] is not an interval of the bin grid")
    mats = bin_matrices(estimate)
    H = estimate.H
    L = e - s
    fwd = np.empty((L + 1, H))
    bwd = np.empty((L + 1, H))
    fwd[0] = np.eye(H)[a - 1]
    for j in range(L):
        fwd[j + 1] = fwd[j] @ mats[s + j]
    bwd[L] = np.eye(H)[b - 1]
    for j in range(L - 1, -1, -1):
        bwd[j] = mats[s + j] @ bwd[j + 1]
    den = float(fwd[L, b - 1])
    if not den >= PROB_FLOOR:
        raise ZeroDenominatorError(subject, (l, r), den)
    return IntervalCache(s, e, a, b, fwd, bwd, den)


# -- exports ----------------------------------------------------------------------

def _open_out(dest, writer_fn):
    if dest is None:
        buf = io.StringIO()
        writer_fn(buf)
        return buf.getvalue()
    if hasattr(dest, "write"):
        writer_fn(dest)
        return None
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        writer_fn(fh)
    return None


def write_estimate_csv(estimate: IntensityEstimate, dest=None):
    """``from,to,bin,tau,alpha`` rows ordered by transition then bin."""
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from", "to", "bin", "tau", "alpha"])
        for g, h in estimate.graph.transitions:
            col = estimate.jumps(g, h)
            for k in range(estimate.K):
                w.writerow([g, h, k + 1, format_time(estimate.taus[k]), repr(float(col[k]))])
    return _open_out(dest, emit)


def read_estimate_csv(source, graph: TransitionGraph) -> IntensityEstimate:
    """Inverse of :func:`write_estimate_csv`. Missing cells are zero."""
    if not hasattr(source, "read"):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_estimate_csv(fh, graph)
    rows = list(csv.DictReader(source))
    if not rows:
        raise ValueError("empty estimate file")
    taus = {}
    for row in rows:
        k = int(row["bin"])
        t = float(row["tau"])
        if taus.setdefault(k, t) != t:
            raise ValueError(f"bin {k} listed with two different times")
    K = max(taus)
    if sorted(taus) != list(range(1, K + 1)):
        raise ValueError("estimate file does not cover bins 1..K")
    H = graph.num_states
    alpha = np.zeros((K, H, H))
    for row in rows:
        g, h = int(row["from"]), int(row["to"])
        if not graph.allowed[g - 1, h - 1]:
            raise ValueError(f"estimate file lists transition {g}->{h} outside the model")
        alpha[int(row["bin"]) - 1, g - 1, h - 1] = float(row["alpha"])
    return IntensityEstimate(alpha, np.array([taus[k] for k in range(1, K + 1)]), graph)


def write_probabilities_csv(estimate: IntensityEstimate, s: float, times, dest=None,
                            from_states=None):
    """``from,to,s,t,prob`` rows for ``P(s, t)`` over the given times."""
    from_states = list(from_states or estimate.graph.states)
    path = transition_path(estimate, s, times)

    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from", "to", "s", "t", "prob"])
        for g in from_states:
            for j, t in enumerate(times):
                for h in estimate.graph.states:
                    w.writerow([g, h, format_time(s), format_time(t),
                                repr(float(path[j, g - 1, h - 1]))])
    return _open_out(dest, emit)
