"""Panel observations, the global bin grid and per-subject bracketing intervals.

The bin grid holds the sorted unique positive observation times
``tau_1 < ... < tau_K`` with ``tau_0 = 0`` implied; bin ``k`` is
``(tau_{k-1}, tau_k]``. A subject contributes to bin ``k`` only when it has an
observation at or before ``tau_{k-1}`` and one at or after ``tau_k``.

Visit times are assumed to follow a conditionally independent visit process.
Nothing here can check that assumption.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DataError, DuplicateTimeError, SingleObservationError
from .graph import TransitionGraph, validate_observation_sequence

log = logging.getLogger(__name__)

__all__ = [
    "SubjectRecord", "PanelDataset", "BinGrid", "SubjectBinContext", "IntervalSet",
    "ingest_panel", "build_bin_grid", "subject_bin_context", "observation_intervals",
    "read_panel_csv", "write_panel_csv", "format_time",
]


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    times: np.ndarray
    states: np.ndarray

    @property
    def n_obs(self):
        return len(self.times)


@dataclass(frozen=True)
class PanelDataset:
    subjects: tuple
    graph: TransitionGraph

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def subject(self, sid):
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def rows(self):
        for s in self.subjects:
            for t, x in zip(s.times, s.states):
                yield s.id, float(t), int(x)

    def subset(self, indices):
        return PanelDataset(tuple(self.subjects[i] for i in indices), self.graph)


@dataclass(frozen=True)
class BinGrid:
    taus: np.ndarray

    @property
    def K(self):
        return len(self.taus)

    @property
    def edges(self):
        """``[tau_0 = 0, tau_1, ..., tau_K]``."""
        return np.concatenate(([0.0], self.taus))

    @property
    def max_gap(self):
        return float(np.max(np.diff(self.edges))) if self.K else 0.0

    def index_of(self, t):
        """Grid index ``k`` with ``tau_k == t`` (0 for t == 0)."""
        edges = self.edges
        k = int(np.searchsorted(edges, t))
        if k >= len(edges) or edges[k] != t:
            raise DataError(f"time {t!r} is not on the bin grid")
        return k


@dataclass(frozen=True)
class SubjectBinContext:
    active: bool
    l: float | None = None
    r: float | None = None
    a: int | None = None
    b: int | None = None
    k_r: int | None = None


def format_time(t: float) -> str:
    return repr(float(t))


def ingest_panel(records: Iterable, graph: TransitionGraph) -> PanelDataset:
    """Group ``(id, time, state)`` rows into validated subjects.

    Subjects keep their order of first appearance. Exact duplicate rows are
    merged; two states at the same time raise :class:`DuplicateTimeError`.
    """
    grouped = {}
    for row in records:
        sid, t, x = row
        sid = str(sid)
        t = float(t)
        if not np.isfinite(t):
            raise DataError(f"subject {sid!r}: non-finite observation time")
        if t < 0:
            raise DataError(f"subject {sid!r}: observation before time 0 ({t})")
        x = graph.state_index(x)
        obs = grouped.setdefault(sid, {})
        if t in obs and obs[t] != x:
            raise DuplicateTimeError(
                f"subject {sid!r} observed in states {obs[t]} and {x} at time {t}")
        obs[t] = x
    singles = [sid for sid, obs in grouped.items() if len(obs) < 2]
    if singles:
        raise SingleObservationError(singles)
    subjects = []
    for sid, obs in grouped.items():
        times = np.array(sorted(obs), dtype=float)
        states = np.array([obs[t] for t in times], dtype=np.int64)
        validate_observation_sequence(graph, states.tolist(), subject=sid)
        times.setflags(write=False)
        states.setflags(write=False)
        subjects.append(SubjectRecord(sid, times, states))
    if not subjects:
        raise DataError("empty panel")
    return PanelDataset(tuple(subjects), graph)


def build_bin_grid(dataset: PanelDataset) -> BinGrid:
    if len(dataset) == 0:
        raise DataError("empty panel")
    taus = np.unique(np.concatenate([s.times for s in dataset.subjects]))
    taus = taus[taus > 0]
    taus.setflags(write=False)
    grid = BinGrid(taus)
    log.debug("bin grid: K=%d, max gap %.4g", grid.K, grid.max_gap)
    return grid


def subject_bin_context(dataset: PanelDataset, grid: BinGrid, i: int, k: int
                        ) -> SubjectBinContext:
    """Bracketing observations of subject ``i`` (0-based) around bin ``k`` (1-based)."""
    if not 1 <= k <= grid.K:
        raise IndexError(f"bin {k} outside 1..{grid.K}")
    subj = dataset.subjects[i]
    edges = grid.edges
    left = subj.times <= edges[k - 1]
    right = subj.times >= edges[k]
    if not left.any() or not right.any():
        return SubjectBinContext(active=False)
    jl = int(np.flatnonzero(left)[-1])
    jr = int(np.flatnonzero(right)[0])
    r = float(subj.times[jr])
    return SubjectBinContext(True, float(subj.times[jl]), r, int(subj.states[jl]),
                             int(subj.states[jr]), grid.index_of(r))


@dataclass
class IntervalSet:
    """Flattened observation intervals in the layout the E-step kernels consume.

    Bin indices are grid indices (``start`` in ``0..K-1``, ``end`` in ``1..K``);
    states are zero-based. ``exact`` marks arrivals into an exactly observed
    state. Intervals are ordered by subject, then time.
    """

    subject: np.ndarray
    start: np.ndarray
    end: np.ndarray
    a: np.ndarray
    b: np.ndarray
    exact: np.ndarray
    K: int
    subject_ids: tuple

    def __len__(self):
        return len(self.start)

    def take(self, mask_or_index) -> "IntervalSet":
        idx = np.asarray(mask_or_index)
        return IntervalSet(self.subject[idx], self.start[idx], self.end[idx],
                           self.a[idx], self.b[idx], self.exact[idx], self.K,
                           self.subject_ids)

    def without_exact(self) -> "IntervalSet":
        out = self.take(np.arange(len(self)))
        out.exact = np.zeros_like(self.exact)
        return out

    def at_risk(self) -> np.ndarray:
        """Number of subjects active in each bin (length K)."""
        diff = np.zeros(self.K + 1, dtype=np.int64)
        np.add.at(diff, self.start, 1)
        np.add.at(diff, self.end, -1)
        return np.cumsum(diff)[:-1]

    def chunks(self, subjects_per_chunk):
        """Split at subject boundaries into pieces of a fixed subject count."""
        if len(self) == 0:
            return [self]
        bounds = np.flatnonzero(np.diff(self.subject // subjects_per_chunk)) + 1
        pieces = np.split(np.arange(len(self)), bounds)
        return [self.take(p) for p in pieces]


def observation_intervals(dataset: PanelDataset, grid: BinGrid) -> IntervalSet:
    graph = dataset.graph
    edges = grid.edges
    cols = {k: [] for k in ("subject", "start", "end", "a", "b", "exact")}
    for i, subj in enumerate(dataset.subjects):
        idx = np.searchsorted(edges, subj.times)
        if np.any(edges[idx] != subj.times):
            raise DataError(f"subject {subj.id!r} has times off the bin grid")
        for j in range(1, subj.n_obs):
            prev, cur = int(subj.states[j - 1]), int(subj.states[j])
            cols["subject"].append(i)
            cols["start"].append(idx[j - 1])
            cols["end"].append(idx[j])
            cols["a"].append(prev - 1)
            cols["b"].append(cur - 1)
            # an exact state seen again is not a new arrival
            cols["exact"].append(graph.is_exact(cur) and cur != prev)
    return IntervalSet(
        np.asarray(cols["subject"], dtype=np.intp),
        np.asarray(cols["start"], dtype=np.intp),
        np.asarray(cols["end"], dtype=np.intp),
        np.asarray(cols["a"], dtype=np.intp),
        np.asarray(cols["b"], dtype=np.intp),
        np.asarray(cols["exact"], dtype=np.uint8),
        grid.K,
        tuple(s.id for s in dataset.subjects),
    )


# -- CSV ------------------------------------------------------------------------

def read_panel_csv(path_or_buffer, graph: TransitionGraph) -> PanelDataset:
    if isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__"):
        with open(path_or_buffer, newline="", encoding="utf-8") as fh:
            return read_panel_csv(fh, graph)
    reader = csv.DictReader(path_or_buffer)
    missing = {"id", "time", "state"} - set(reader.fieldnames or ())
    if missing:
        raise DataError(f"panel file lacks columns: {sorted(missing)}")
    rows = []
    for line, rec in enumerate(reader, start=2):
        try:
            rows.append((rec["id"], float(rec["time"]), rec["state"]))
        except (TypeError, ValueError):
            raise DataError(f"line {line}: cannot parse {rec}") from None
    return ingest_panel(rows, graph)


def write_panel_csv(dataset: PanelDataset, path_or_buffer=None):
    """Write the panel; returns the text when no destination is given."""
    if path_or_buffer is None:
        buf = io.StringIO()
        write_panel_csv(dataset, buf)
        return buf.getvalue()
    if isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__"):
        with open(path_or_buffer, "w", newline="", encoding="utf-8") as fh:
            return write_panel_csv(dataset, fh)
    w = csv.writer(path_or_buffer, lineterminator="\n")
    w.writerow(["id", "time", "state"])
    for sid, t, x in dataset.rows():
        w.writerow([sid, format_time(t), x])
    return None
