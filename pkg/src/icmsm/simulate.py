"""Panel-data simulation from known intensities, oracle curves and scoring.

Trajectories are continuous-time Markov: from the current state every allowed
transition draws its own event time by inverting its cumulative hazard from
the entry time on the global clock, and the earliest one wins. Trajectories
are then read off at the visit times of a visit process.

Weibull hazards use the cumulative hazard ``scale * t**shape`` (hazard
``scale * shape * t**(shape - 1)``).
"""
from __future__ import annotations

import csv
import logging
import math
import sys
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.linalg import expm

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .errors import InvalidSpecError, ShapeMismatchError
from .graph import TransitionGraph, build_graph, graph_to_dict
from .panel import PanelDataset, SubjectRecord, format_time
from .prodint import IntensityEstimate, _open_out, bin_matrices, transition_path

log = logging.getLogger(__name__)

__all__ = [
    "Exponential", "Weibull", "UniformGap", "FixedGapJitter", "ScenarioSpec",
    "SamplePaths", "Target", "MetricsSeries", "sample_paths", "visit_times",
    "simulate_panel", "simulate_replicates", "true_values", "fitted_curves", "score",
    "parse_scenario", "read_scenario", "serialize_scenario", "builtin_scenario",
    "BUILTIN_SCENARIOS", "default_tgrid", "write_metrics_csv",
]


# -- hazards ------------------------------------------------------------------------

@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise InvalidSpecError(f"exponential rate must be positive, got {self.rate!r}")

    def cumulative(self, t):
        return self.rate * np.asarray(t, dtype=float)

    def inverse(self, v):
        return np.asarray(v, dtype=float) / self.rate

    def to_dict(self):
        return {"kind": "exponential", "rate": self.rate}


@dataclass(frozen=True)
class Weibull:
    scale: float
    shape: float

    def __post_init__(self):
        for name in ("scale", "shape"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise InvalidSpecError(f"Weibull {name} must be positive, got {v!r}")

    def cumulative(self, t):
        return self.scale * np.asarray(t, dtype=float) ** self.shape

    def inverse(self, v):
        return (np.asarray(v, dtype=float) / self.scale) ** (1.0 / self.shape)

    def to_dict(self):
        return {"kind": "weibull", "scale": self.scale, "shape": self.shape}


# -- visit processes ------------------------------------------------------------------

@dataclass(frozen=True)
class UniformGap:
    """Gaps between consecutive visits drawn from U[lo, hi]."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (0 <= self.lo <= self.hi) or self.hi <= 0:
            raise InvalidSpecError(f"need 0 <= lo <= hi and hi > 0, got [{self.lo}, {self.hi}]")

    def draw(self, rng, n, horizon):
        mean = 0.5 * (self.lo + self.hi)
        cols = max(4, int(math.ceil(horizon / mean * 1.5)) + 4)
        times = np.cumsum(rng.uniform(self.lo, self.hi, size=(n, cols)), axis=1)
        # top up the rare rows that have not yet passed the horizon
        while np.any(times[:, -1] <= horizon):
            more = np.cumsum(rng.uniform(self.lo, self.hi, size=(n, cols)), axis=1)
            times = np.concatenate([times, times[:, -1:] + more], axis=1)
        return times

    def to_dict(self):
        return {"kind": "uniform_gap", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class FixedGapJitter:
    """Visits scheduled every ``gap`` and shifted by U[-jitter, jitter]."""

    gap: float
    jitter: float

    def __post_init__(self):
        if not self.gap > 0 or not 0 <= self.jitter < self.gap / 2:
            raise InvalidSpecError(
                f"need gap > 0 and 0 <= jitter < gap/2, got {self.gap}, {self.jitter}")

    def draw(self, rng, n, horizon):
        m = int(math.floor((horizon + self.jitter) / self.gap)) + 1
        sched = self.gap * np.arange(1, m + 1)
        return sched + rng.uniform(-self.jitter, self.jitter, size=(n, m))

    def to_dict(self):
        return {"kind": "fixed_gap_jitter", "gap": self.gap, "jitter": self.jitter}


def _hazard_from_dict(d):
    kind = d.get("kind")
    try:
        if kind == "exponential":
            return Exponential(float(d["rate"]))
        if kind == "weibull":
            return Weibull(float(d["scale"]), float(d["shape"]))
    except KeyError as exc:
        raise InvalidSpecError(f"{kind} hazard lacks {exc.args[0]!r}") from None
    raise InvalidSpecError(f"unknown hazard kind {kind!r}")


def _visits_from_dict(d):
    kind = d.get("kind")
    try:
        if kind == "uniform_gap":
            return UniformGap(float(d["lo"]), float(d["hi"]))
        if kind == "fixed_gap_jitter":
            return FixedGapJitter(float(d["gap"]), float(d["jitter"]))
    except KeyError as exc:
        raise InvalidSpecError(f"{kind} visit process lacks {exc.args[0]!r}") from None
    raise InvalidSpecError(f"unknown visit process {kind!r}")


# -- scenario -------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    graph: TransitionGraph
    hazards: dict
    start: tuple
    visits: object
    horizon: float
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        g = self.graph
        if not (isinstance(self.horizon, (int, float)) and self.horizon > 0
                and math.isfinite(self.horizon)):
            raise InvalidSpecError(f"horizon must be positive, got {self.horizon!r}")
        if set(self.hazards) != set(g.transitions):
            missing = sorted(set(g.transitions) - set(self.hazards))
            extra = sorted(set(self.hazards) - set(g.transitions))
            raise InvalidSpecError(
                f"hazards must match the transitions (missing {missing}, extra {extra})")
        start = tuple(float(p) for p in self.start)
        if len(start) != g.num_states or min(start) < 0 or abs(sum(start) - 1) > 1e-12:
            raise InvalidSpecError("start must be a probability vector over the states")
        if not isinstance(self.visits, (UniformGap, FixedGapJitter)):
            raise InvalidSpecError(f"unsupported visit process {self.visits!r}")
        object.__setattr__(self, "start", start)

    @property
    def exact_states(self):
        return self.graph.exact_states


def parse_scenario(text: str) -> ScenarioSpec:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidSpecError(f"cannot parse scenario: {exc}") from None
    return scenario_from_dict(data)


def scenario_from_dict(data: dict) -> ScenarioSpec:
    try:
        graph = build_graph(data["states"], data["transitions"], data.get("exact", []),
                            data.get("labels"))
        hazards = {}
        for h in data["hazard"]:
            pair = (int(h["from"]), int(h["to"]))
            if pair in hazards:
                raise InvalidSpecError(f"transition {pair} has two hazards")
            hazards[pair] = _hazard_from_dict(h)
        start = data.get("start")
        if start is None:
            start = [1.0] + [0.0] * (graph.num_states - 1)
        return ScenarioSpec(graph, hazards, tuple(start), _visits_from_dict(data["visits"]),
                            float(data["horizon"]), int(data.get("seed", 0)),
                            str(data.get("name", "")))
    except KeyError as exc:
        raise InvalidSpecError(f"scenario lacks key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidSpecError):
            raise
        raise InvalidSpecError(f"malformed scenario: {exc}") from None


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    out = {"name": spec.name} if spec.name else {}
    out.update(graph_to_dict(spec.graph))
    out["horizon"] = spec.horizon
    out["seed"] = spec.seed
    out["start"] = list(spec.start)
    out["visits"] = spec.visits.to_dict()
    out["hazard"] = [{"from": g, "to": h, **spec.hazards[(g, h)].to_dict()}
                     for g, h in spec.graph.transitions]
    return out


def serialize_scenario(spec: ScenarioSpec) -> str:
    return tomli_w.dumps(scenario_to_dict(spec))


def read_scenario(path) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


BUILTIN_SCENARIOS = ("scenario1", "scenario2", "scenario3", "scenario4", "scenario5",
                     "scenario6a", "scenario6b")


def builtin_scenario(name: str) -> ScenarioSpec:
    """One of the bundled scenario files, e.g. ``"scenario2"``."""
    if name not in BUILTIN_SCENARIOS:
        raise InvalidSpecError(f"no bundled scenario {name!r}")
    text = resources.files("icmsm").joinpath("scenarios", f"{name}.toml").read_text("utf-8")
    return parse_scenario(text)


# -- sampling -------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplePaths:
    """Jump chains: ``states[i, j]`` entered at ``times[i, j]`` (padding -1 / inf)."""

    states: np.ndarray
    times: np.ndarray

    def state_at(self, t):
        """State of each subject at times ``t`` of shape ``(n, m)``."""
        t = np.asarray(t, dtype=float)
        idx = np.sum(self.times[:, None, :] <= t[..., None], axis=-1) - 1
        return np.take_along_axis(self.states, idx, axis=1)


def sample_paths(spec: ScenarioSpec, n: int, rng, horizon=None) -> SamplePaths:
    """Simulate ``n`` trajectories up to ``horizon`` (default the study end)."""
    graph = spec.graph
    horizon = spec.horizon if horizon is None else horizon
    H = graph.num_states
    steps = len(graph.topological_order)
    states = np.full((n, steps), -1, dtype=np.int64)
    times = np.full((n, steps), np.inf)
    states[:, 0] = rng.choice(np.arange(1, H + 1), size=n, p=np.asarray(spec.start))
    times[:, 0] = 0.0
    cur = states[:, 0].copy()
    t_entry = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for j in range(1, steps):
        best_t = np.full(n, np.inf)
        best_h = np.full(n, -1, dtype=np.int64)
        for g, h in graph.transitions:
            e = rng.standard_exponential(n)
            haz = spec.hazards[(g, h)]
            m = alive & (cur == g)
            if not m.any():
                continue
            tt = haz.inverse(haz.cumulative(t_entry[m]) + e[m])
            win = tt < best_t[m]
            idx = np.flatnonzero(m)[win]
            best_t[idx] = tt[win]
            best_h[idx] = h
        jump = alive & (best_t <= horizon)
        states[jump, j] = best_h[jump]
        times[jump, j] = best_t[jump]
        cur[jump] = best_h[jump]
        t_entry[jump] = best_t[jump]
        alive = jump
        if not alive.any():
            break
    return SamplePaths(states, times)


def visit_times(spec: ScenarioSpec, n: int, rng):
    """Visit times after 0 for ``n`` subjects, ``inf`` beyond the horizon."""
    v = spec.visits.draw(rng, n, spec.horizon)
    v = np.where(v <= spec.horizon, v, np.inf)
    return v


def _subject_rows(times_row, states_row, visits_row, graph):
    obs_t = [0.0]
    obs_x = [int(states_row[0])]
    jumps = [(float(t), int(x)) for t, x in zip(times_row[1:], states_row[1:]) if x > 0]
    exact = [(t, x) for t, x in jumps if graph.is_exact(x)]
    visits = visits_row[np.isfinite(visits_row)]
    j_idx = 0
    events = sorted([(float(v), False, 0) for v in visits] + [(t, True, x) for t, x in exact])
    for t, is_exact, x in events:
        if is_exact:
            state = x
        else:
            while j_idx < len(jumps) and jumps[j_idx][0] <= t:
                j_idx += 1
            state = int(states_row[j_idx])
        if t == obs_t[-1]:
            continue
        obs_t.append(t)
        obs_x.append(state)
    return np.array(obs_t), np.array(obs_x, dtype=np.int64)


def simulate_panel(spec: ScenarioSpec, n: int, seed=None, rng=None,
                   return_paths=False):
    """Simulate a panel of ``n`` subjects.

    Everyone is visited at time 0 and then per the visit process until the
    study end, whatever state they are in. Arrivals into exactly observed
    states are added at their true times.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidSpecError(f"n must be a positive integer, got {n!r}")
    if rng is None:
        rng = np.random.default_rng(spec.seed if seed is None else seed)
    paths = sample_paths(spec, int(n), rng)
    visits = visit_times(spec, int(n), rng)
    subjects = []
    for i in range(int(n)):
        t, x = _subject_rows(paths.times[i], paths.states[i], visits[i], spec.graph)
        if len(t) < 2:
            raise InvalidSpecError(
                "visit process left a subject with a single observation; "
                "shorten the gaps or lengthen the horizon")
        t.setflags(write=False)
        x.setflags(write=False)
        subjects.append(SubjectRecord(str(i + 1), t, x))
    data = PanelDataset(tuple(subjects), spec.graph)
    return (data, paths) if return_paths else data


def replicate_rng(seed: int, rep: int):
    return np.random.default_rng([int(seed), int(rep)])


def simulate_replicates(spec: ScenarioSpec, n: int, reps: int, seed=None):
    """Yield ``reps`` independent panels, replicate ``j`` seeded by ``(seed, j)``."""
    seed = spec.seed if seed is None else seed
    for rep in range(reps):
        yield simulate_panel(spec, n, rng=replicate_rng(seed, rep))


# -- oracle and scoring ---------------------------------------------------------------

@dataclass(frozen=True)
class Target:
    """``kind`` is ``"cumintensity"`` (uses ``g, h``) or ``"transprob"`` (``P_gh(s, t)``)."""

    kind: str
    g: int
    h: int
    s: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cumintensity", "transprob"):
            raise ValueError(f"unknown target kind {self.kind!r}")

    @property
    def label(self):
        return "A" if self.kind == "cumintensity" else "P"


def default_tgrid(horizon=15.0, step=0.1):
    return np.round(np.arange(0.0, horizon + step / 2, step), 10)


def _intensity_matrices(spec, grid):
    H = spec.graph.num_states
    cum = np.zeros((len(grid), H, H))
    for (g, h), haz in spec.hazards.items():
        cum[:, g - 1, h - 1] = haz.cumulative(grid)
    inc = np.diff(cum, axis=0)
    idx = np.arange(H)
    inc[:, idx, idx] = -inc.sum(axis=-1)
    return inc


def oracle_transition_path(spec: ScenarioSpec, s, times, step=None):
    """True ``P(s, t)`` for each ``t`` by product integration on a fine grid."""
    times = np.asarray(times, dtype=float)
    if np.any(times < s):
        raise ValueError("evaluation times must not precede s")
    step = spec.horizon * 1e-3 if step is None else step
    top = float(times.max(initial=s))
    fine = np.arange(s, top, step)
    grid = np.unique(np.concatenate([fine, times, [s, top]]))
    factors = expm(_intensity_matrices(spec, grid))
    out = np.empty((len(grid), spec.graph.num_states, spec.graph.num_states))
    p = np.eye(spec.graph.num_states)
    out[0] = p
    for j, f in enumerate(factors):
        p = p @ f
        out[j + 1] = p
    return out[np.searchsorted(grid, times)]


def true_values(spec: ScenarioSpec, targets, tgrid, step=None) -> dict:
    """Oracle curve for every target on ``tgrid``."""
    tgrid = np.asarray(tgrid, dtype=float)
    out = {}
    cache = {}
    for tgt in targets:
        if tgt.kind == "cumintensity":
            if (tgt.g, tgt.h) not in spec.hazards:
                raise ValueError(f"{tgt.g}->{tgt.h} is not a transition of the scenario")
            out[tgt] = spec.hazards[(tgt.g, tgt.h)].cumulative(tgrid)
        else:
            ts = tgrid[tgrid >= tgt.s]
            if tgt.s not in cache:
                cache[tgt.s] = oracle_transition_path(spec, tgt.s, ts, step)
            curve = np.full(len(tgrid), np.nan)
            curve[tgrid >= tgt.s] = cache[tgt.s][:, tgt.g - 1, tgt.h - 1]
            out[tgt] = curve
    return out


def fitted_curves(estimate: IntensityEstimate, targets, tgrid) -> dict:
    """Right-continuous step curves of a fitted estimate on ``tgrid``."""
    tgrid = np.asarray(tgrid, dtype=float)
    mats = bin_matrices(estimate, clamp=True)
    out = {}
    cache = {}
    for tgt in targets:
        if tgt.kind == "cumintensity":
            out[tgt] = estimate.cumulative(tgt.g, tgt.h, tgrid)
        else:
            keep = tgrid >= tgt.s
            if tgt.s not in cache:
                cache[tgt.s] = transition_path(estimate, tgt.s, tgrid[keep], mats=mats)
            curve = np.full(len(tgrid), np.nan)
            curve[keep] = cache[tgt.s][:, tgt.g - 1, tgt.h - 1]
            out[tgt] = curve
    return out


@dataclass(frozen=True)
class MetricsSeries:
    tgrid: np.ndarray
    bias: dict
    variance: dict
    rmse: dict
    replicates: int
    targets: tuple = field(default=())


def score(estimates, truth: dict, tgrid) -> MetricsSeries:
    """Bias, variance (divisor ``N - 1``) and RMSE per target and time.

    ``estimates`` is a list of per-replicate ``{target: curve}`` dicts, or a
    dict mapping each target to an ``(N, len(tgrid))`` array.
    """
    tgrid = np.asarray(tgrid, dtype=float)
    if isinstance(estimates, dict):
        stacked = {t: np.asarray(v, dtype=float) for t, v in estimates.items()}
    else:
        estimates = list(estimates)
        if not estimates:
            raise ValueError("no replicates to score")
        keys = list(estimates[0])
        stacked = {}
        for t in keys:
            rows = [np.asarray(e[t], dtype=float) for e in estimates]
            if any(r.shape != (len(tgrid),) for r in rows):
                raise ShapeMismatchError(
                    f"a replicate curve for {t} does not match the {len(tgrid)}-point grid")
            stacked[t] = np.array(rows)
    bias, var, rmse = {}, {}, {}
    N = None
    for tgt, arr in stacked.items():
        if arr.ndim != 2 or arr.shape[1] != len(tgrid):
            raise ShapeMismatchError(
                f"estimates for {tgt} have shape {arr.shape}, grid has {len(tgrid)} points")
        if tgt not in truth:
            raise ShapeMismatchError(f"no oracle curve for {tgt}")
        true = np.asarray(truth[tgt], dtype=float)
        if true.shape != (len(tgrid),):
            raise ShapeMismatchError(
                f"oracle for {tgt} has shape {true.shape}, grid has {len(tgrid)} points")
        if N is None:
            N = arr.shape[0]
        elif arr.shape[0] != N:
            raise ShapeMismatchError("targets have different replicate counts")
        if N < 2:
            raise ValueError("scoring needs at least two replicates")
        err = arr - true
        bias[tgt] = err.mean(axis=0)
        var[tgt] = arr.var(axis=0, ddof=1)
        rmse[tgt] = np.sqrt(var[tgt] + bias[tgt] ** 2)
    return MetricsSeries(tgrid, bias, var, rmse, int(N or 0), tuple(stacked))


def write_metrics_csv(metrics: MetricsSeries, dest=None):
    """``target,from,to,t,bias,variance,rmse`` rows."""
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "from", "to", "t", "bias", "variance", "rmse"])
        for tgt in metrics.targets:
            for j, t in enumerate(metrics.tgrid):
                b = metrics.bias[tgt][j]
                if np.isnan(b):
                    continue
                w.writerow([tgt.kind, tgt.g, tgt.h, format_time(t), repr(float(b)),
                            repr(float(metrics.variance[tgt][j])),
                            repr(float(metrics.rmse[tgt][j]))])
    return _open_out(dest, emit)
