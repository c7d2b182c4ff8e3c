import io

import numpy as np
import pytest

from icmsm.errors import InfeasibleEstimateError, ZeroDenominatorError
from icmsm.graph import illness_death, survival
from icmsm.prodint import (
    IntensityEstimate, bin_matrix, build_interval_cache, read_estimate_csv,
    transition_matrix, transition_path, write_estimate_csv, write_probabilities_csv,
)

from helpers import alpha_grid
from oracles import path_sum_transition, random_feasible_alpha

ID = {(1, 2): 0.3, (1, 3): 0.2, (2, 3): 0.5}


def est(graph, alpha, taus=None):
    taus = np.arange(1.0, len(alpha) + 1) if taus is None else taus
    return IntensityEstimate(alpha, taus, graph)


def test_bin_matrix_rows(id_graph):
    e = est(id_graph, alpha_grid(id_graph, 1, ID))
    assert bin_matrix(e, 1).tolist() == [[0.5, 0.3, 0.2], [0, 0.5, 0.5], [0, 0, 1]]
    zero = est(id_graph, np.zeros((2, 3, 3)))
    assert np.array_equal(bin_matrix(zero, 2), np.eye(3))


def test_bin_matrix_infeasible(id_graph):
    e = est(id_graph, alpha_grid(id_graph, 1, {(1, 2): 0.7, (1, 3): 0.5}))
    with pytest.raises(InfeasibleEstimateError):
        bin_matrix(e, 1)


def test_transition_matrix_basics(id_graph):
    e = est(id_graph, alpha_grid(id_graph, 2, ID))
    assert np.array_equal(transition_matrix(e, 1.0, 1.0), np.eye(3))
    s = est(survival(), alpha_grid(survival(), 1, {(1, 2): 0.25}))
    p = transition_matrix(s, 0.0, 1.0)
    assert p[0, 1] == 0.25 and p[0, 0] == 0.75


def test_two_bins_against_path_enumeration(id_graph):
    a = alpha_grid(id_graph, 2, ID)
    p = transition_matrix(est(id_graph, a), 0.0, 2.0)
    # paths 1->1->3, 1->3->3, 1->2->3
    assert p[0, 2] == pytest.approx(0.5 * 0.2 + 0.2 * 1.0 + 0.3 * 0.5, abs=1e-15)
    np.testing.assert_allclose(p, path_sum_transition(a, 0, 2), atol=1e-15)


def test_bins_selected_by_half_open_interval(id_graph):
    rng = np.random.default_rng(3)
    a = random_feasible_alpha(rng, 4, id_graph.allowed)
    e = est(id_graph, a, np.array([1.0, 2.0, 3.0, 4.0]))
    # s < tau_k <= t picks bins 2 and 3 for (1.5, 3]
    np.testing.assert_allclose(transition_matrix(e, 1.5, 3.0), path_sum_transition(a, 1, 3),
                               atol=1e-14)
    path = transition_path(e, 0.0, [0.0, 0.5, 2.0, 4.5])
    np.testing.assert_allclose(path[3], transition_matrix(e, 0.0, 4.5), atol=1e-15)
    assert np.array_equal(path[1], np.eye(3))


def test_cumulative_is_right_continuous(id_graph):
    e = est(id_graph, alpha_grid(id_graph, 3, ID), np.array([1.0, 2.0, 4.0]))
    assert e.cumulative(1, 2, [0.0, 0.99, 1.0, 3.9, 4.0, 10]).tolist() == pytest.approx(
        [0, 0, 0.3, 0.6, 0.9, 0.9])


def test_interval_cache(id_graph):
    rng = np.random.default_rng(5)
    a = random_feasible_alpha(rng, 3, id_graph.allowed)
    e = est(id_graph, a)
    c = build_interval_cache(e, 0.0, 3.0, 1, 3)
    p = transition_matrix(e, 0.0, 3.0)
    assert c.denominator == pytest.approx(p[0, 2], abs=1e-15)
    inner = np.einsum("jh,jh->j", c.forward, c.backward)
    np.testing.assert_allclose(inner, p[0, 2], atol=1e-12)
    np.testing.assert_allclose(c.forward[-1], p[0], atol=1e-15)
    np.testing.assert_allclose(c.backward[0], p[:, 2], atol=1e-15)
    one = build_interval_cache(e, 1.0, 2.0, 1, 2)
    m = bin_matrix(e, 2)
    np.testing.assert_allclose(one.forward[1], m[0])
    np.testing.assert_allclose(one.backward[0], m[:, 1])
    dead = build_interval_cache(e, 0.0, 3.0, 3, 3)
    assert dead.denominator == 1.0 and np.all(dead.forward == [0, 0, 1])


def test_interval_cache_zero_denominator(id_graph):
    e = est(id_graph, alpha_grid(id_graph, 1, {(1, 2): 0.3, (2, 3): 0.5}))
    with pytest.raises(ZeroDenominatorError) as exc:
        build_interval_cache(e, 0.0, 1.0, 1, 3, subject="X")
    assert exc.value.subject == "X"


def test_estimate_csv_roundtrip(id_graph):
    rng = np.random.default_rng(1)
    e = est(id_graph, random_feasible_alpha(rng, 4, id_graph.allowed),
            np.array([0.1, 0.7, 1 / 3, 2.0]).cumsum())
    text = write_estimate_csv(e)
    lines = text.splitlines()
    assert lines[0] == "from,to,bin,tau,alpha"
    assert lines[1].startswith("1,2,1,") and lines[5].startswith("1,3,1,")
    back = read_estimate_csv(io.StringIO(text), id_graph)
    assert np.array_equal(back.alpha, e.alpha) and np.array_equal(back.taus, e.taus)


def test_probability_export_rows_sum_to_one(id_graph):
    rng = np.random.default_rng(2)
    e = est(id_graph, random_feasible_alpha(rng, 5, id_graph.allowed))
    text = write_probabilities_csv(e, 0.0, [0.0, 2.5, 5.0])
    rows = [r.split(",") for r in text.splitlines()[1:]]
    sums = {}
    for g, h, s, t, p in rows:
        sums[(g, t)] = sums.get((g, t), 0.0) + float(p)
    assert all(abs(v - 1) < 1e-10 for v in sums.values())
    assert text.splitlines()[0] == "from,to,s,t,prob"
