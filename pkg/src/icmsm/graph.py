"""Multi-state model structure: states, allowed direct transitions, exact states.

States are the integers ``1..H`` at the public surface. Array code indexes them
from zero; :attr:`TransitionGraph.allowed` is the ``H x H`` boolean mask of
allowed direct transitions in that zero-based layout.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .errors import (
    CycleError, GraphError, InvalidStateError, SelfLoopError,
    UnreachableObservationError,
)

__all__ = [
    "ReachSets", "TransitionGraph", "build_graph", "validate_observation_sequence",
    "parse_model_spec", "serialize_model_spec", "read_model_spec", "write_model_spec",
    "illness_death", "extended_illness_death", "survival",
]


@dataclass(frozen=True)
class ReachSets:
    predecessors: dict
    successors: dict


@dataclass(frozen=True, eq=False)
class TransitionGraph:
    """Validated acyclic transition graph. Build through :func:`build_graph`."""

    num_states: int
    transitions: tuple
    exact_states: frozenset
    state_labels: tuple | None
    reach: ReachSets
    topological_order: tuple
    allowed: np.ndarray = field(repr=False)
    reachable: np.ndarray = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, TransitionGraph):
            return NotImplemented
        return (self.num_states == other.num_states
                and self.transitions == other.transitions
                and self.exact_states == other.exact_states
                and self.state_labels == other.state_labels)

    def __hash__(self):
        return hash((self.num_states, self.transitions, self.exact_states,
                     self.state_labels))

    @property
    def states(self):
        return range(1, self.num_states + 1)

    @property
    def absorbing_states(self):
        return tuple(g for g in self.states if not self.reach.successors[g])

    def successors(self, g):
        return self.reach.successors[g]

    def predecessors(self, h):
        return self.reach.predecessors[h]

    def is_absorbing(self, g):
        return not self.reach.successors[g]

    def is_exact(self, g):
        return g in self.exact_states

    def has_path(self, g, h):
        """True when ``h`` can be reached from ``g`` in zero or more steps."""
        return bool(self.reachable[g - 1, h - 1])

    def label(self, g):
        if self.state_labels is None:
            return str(g)
        return self.state_labels[g - 1]

    def state_index(self, token):
        """Resolve a 1-based state number or a label to a state number."""
        if isinstance(token, (int, np.integer)):
            g = int(token)
        else:
            text = str(token).strip()
            if self.state_labels is not None and text in self.state_labels:
                return self.state_labels.index(text) + 1
            try:
                g = int(text)
            except ValueError:
                raise InvalidStateError(f"unknown state {token!r}") from None
        if not 1 <= g <= self.num_states:
            raise InvalidStateError(f"state {g} outside 1..{self.num_states}")
        return g

    def with_exact_states(self, exact):
        return build_graph(self.num_states, self.transitions, exact, self.state_labels)


def _find_cycle(num_states, successors):
    # iterative DFS with colouring; returns the first cycle met from the lowest state
    white, grey, black = 0, 1, 2
    colour = {g: white for g in range(1, num_states + 1)}
    for root in range(1, num_states + 1):
        if colour[root] != white:
            continue
        stack = [(root, iter(sorted(successors[root])))]
        path = [root]
        colour[root] = grey
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = black
                stack.pop()
                path.pop()
            elif colour[nxt] == grey:
                return path[path.index(nxt):] + [nxt]
            elif colour[nxt] == white:
                colour[nxt] = grey
                stack.append((nxt, iter(sorted(successors[nxt]))))
                path.append(nxt)
    return None


def build_graph(num_states: int, transitions: Iterable[Sequence[int]],
                exact_states: Iterable[int] = (), state_labels=None) -> TransitionGraph:
    """Validate a model structure and precompute reachability.

    Raises :class:`CycleError` (with one witness cycle), :class:`InvalidStateError`
    or :class:`SelfLoopError`.
    """
    num_states = int(num_states)
    if num_states < 2:
        raise GraphError("a multi-state model needs at least two states")
    pairs = []
    for pair in transitions:
        g, h = (int(x) for x in pair)
        for s in (g, h):
            if not 1 <= s <= num_states:
                raise InvalidStateError(f"transition ({g},{h}) references state {s} "
                                        f"outside 1..{num_states}")
        if g == h:
            raise SelfLoopError(f"self-transition ({g},{g}) is not allowed")
        if (g, h) not in pairs:
            pairs.append((g, h))
    pairs.sort()
    exact = frozenset(int(s) for s in exact_states)
    for s in exact:
        if not 1 <= s <= num_states:
            raise InvalidStateError(f"exact state {s} outside 1..{num_states}")
    if state_labels is not None:
        state_labels = tuple(str(x) for x in state_labels)
        if len(state_labels) != num_states:
            raise GraphError("need exactly one label per state")
        if len(set(state_labels)) != num_states:
            raise GraphError("state labels must be unique")

    succ = {g: [] for g in range(1, num_states + 1)}
    pred = {g: [] for g in range(1, num_states + 1)}
    for g, h in pairs:
        succ[g].append(h)
        pred[h].append(g)
    cycle = _find_cycle(num_states, succ)
    if cycle is not None:
        raise CycleError(cycle)

    # Kahn's algorithm, smallest label first for a deterministic order
    indeg = {g: len(pred[g]) for g in succ}
    ready = sorted(g for g, d in indeg.items() if d == 0)
    order = []
    while ready:
        g = ready.pop(0)
        order.append(g)
        for h in succ[g]:
            indeg[h] -= 1
            if indeg[h] == 0:
                ready.append(h)
                ready.sort()

    allowed = np.zeros((num_states, num_states), dtype=bool)
    for g, h in pairs:
        allowed[g - 1, h - 1] = True
    reachable = np.eye(num_states, dtype=bool)
    for g in reversed(order):
        for h in succ[g]:
            reachable[g - 1] |= reachable[h - 1]
    allowed.setflags(write=False)
    reachable.setflags(write=False)

    reach = ReachSets(
        predecessors={g: frozenset(v) for g, v in pred.items()},
        successors={g: frozenset(v) for g, v in succ.items()},
    )
    return TransitionGraph(num_states, tuple(pairs), exact, state_labels, reach,
                           tuple(order), allowed, reachable)


def validate_observation_sequence(graph: TransitionGraph, states: Sequence[int],
                                  subject=None) -> None:
    """Check that consecutive observed states are joined by a directed path."""
    if len(states) == 0:
        raise ValueError("empty observation sequence")
    for prev, cur in zip(states[:-1], states[1:]):
        if not graph.has_path(prev, cur):
            who = "" if subject is None else f"subject {subject!r}: "
            raise UnreachableObservationError(
                f"{who}state {cur} is not reachable from state {prev}",
                subject=subject, pair=(prev, cur))


def illness_death(exact=()):
    return build_graph(3, [(1, 2), (1, 3), (2, 3)], exact,
                       ("alive", "ill", "dead"))


def extended_illness_death(exact=()):
    return build_graph(4, [(1, 2), (1, 3), (2, 4)], exact,
                       ("alive", "ill", "dead_healthy", "dead_ill"))


def survival():
    return build_graph(2, [(1, 2)], (), ("alive", "dead"))


# -- model spec files ---------------------------------------------------------

def graph_to_dict(graph: TransitionGraph) -> dict:
    out = {
        "states": graph.num_states,
        "transitions": [list(p) for p in graph.transitions],
        "exact": sorted(graph.exact_states),
    }
    if graph.state_labels is not None:
        out["labels"] = list(graph.state_labels)
    return out


def graph_from_dict(data: dict) -> TransitionGraph:
    try:
        states = data["states"]
        transitions = data["transitions"]
    except KeyError as exc:
        raise GraphError(f"model spec is missing key {exc.args[0]!r}") from None
    return build_graph(states, transitions, data.get("exact", []), data.get("labels"))


def serialize_model_spec(graph: TransitionGraph) -> str:
    return tomli_w.dumps(graph_to_dict(graph))


def parse_model_spec(text: str) -> TransitionGraph:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise GraphError(f"cannot parse model spec: {exc}") from None
    return graph_from_dict(data)


def read_model_spec(path) -> TransitionGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model_spec(fh.read())


def write_model_spec(graph: TransitionGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_model_spec(graph))
