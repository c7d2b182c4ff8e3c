import numpy as np

from icmsm.em import prepare
from icmsm.panel import ingest_panel


def panel(graph, subjects):
    """Dataset from ``[(times, states), ...]`` with ids s0, s1, ..."""
    rows = []
    for i, (times, states) in enumerate(subjects):
        rows += [(f"s{i}", t, x) for t, x in zip(times, states)]
    return ingest_panel(rows, graph)


def problem(graph, subjects):
    return prepare(panel(graph, subjects))


def alpha_grid(graph, K, values):
    """``(K, H, H)`` grid with the same jump per transition in every bin."""
    a = np.zeros((K, graph.num_states, graph.num_states))
    for (g, h), v in values.items():
        a[:, g - 1, h - 1] = v
    return a
