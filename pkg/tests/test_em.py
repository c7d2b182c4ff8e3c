import io
import math

import numpy as np
import pytest

from icmsm.em import (
    EMConfig, ExpectedCounts, estep, estep_per_subject, is_local_max, kkt_residual, mstep,
    observed_loglik, prepare, reduced_gradient, run_em, unfortunate_estimate,
    write_trace_csv,
)
from icmsm.errors import ConfigurationError, MaxIterationsError, NonFiniteLoglikError, \
    ZeroDenominatorError
from icmsm.graph import build_graph, illness_death, survival
from icmsm.prodint import IntensityEstimate

from helpers import alpha_grid, problem
from oracles import enumerate_subject, occurrence_exposure

ID = {(1, 2): 0.3, (1, 3): 0.2, (2, 3): 0.5}


def counts(d, y, n=None):
    d = np.asarray(d, float)
    y = np.asarray(y, float)
    return ExpectedCounts(d, y, np.zeros(d.shape[0]) if n is None else n)


# -- E-step -------------------------------------------------------------------------

def test_estep_two_bins_frozen(id_graph):
    # subject seen in 1 at 0 and in 3 at tau_2; the paths 1-1-3, 1-2-3, 1-3-3
    # carry weights 0.1, 0.15, 0.2
    pr = problem(id_graph, [([0, 1, 2], [1, 1, 1]), ([0, 2], [1, 3])])
    e = IntensityEstimate(alpha_grid(id_graph, 2, ID), pr.grid.taus, id_graph)
    psd, psy = estep_per_subject(e, pr)
    d, y = psd[1], psy[1]
    np.testing.assert_allclose(y[0], [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(d[0, 0], [0, 1 / 3, 4 / 9], atol=1e-15)
    np.testing.assert_allclose(y[1], [2 / 9, 1 / 3, 4 / 9], atol=1e-15)
    assert d[1, 0, 2] == pytest.approx(2 / 9, abs=1e-15)
    assert d[1, 1, 2] == pytest.approx(1 / 3, abs=1e-15)
    c = estep(e, pr)
    assert c.loglik == pytest.approx(2 * math.log(0.5) + math.log(0.45), abs=1e-14)


def test_estep_exact_arrival_frozen():
    g = illness_death(exact=(3,))
    pr = problem(g, [([0, 1, 2], [1, 1, 1]), ([0, 2], [1, 3])])
    e = IntensityEstimate(alpha_grid(g, 2, ID), pr.grid.taus, g)
    psd, psy = estep_per_subject(e, pr)
    y = psy[1]
    # Y_2 in the arrival bin: P_12(0,tau1) a23 / (a13 P_11 + a23 P_12)
    assert y[1, 1] == pytest.approx(0.3 * 0.5 / (0.2 * 0.5 + 0.5 * 0.3), abs=1e-15)
    assert y[1].sum() == pytest.approx(1.0, abs=1e-15)
    assert psd[1][1, 0, 2] == pytest.approx(0.4, abs=1e-15)
    assert psd[1][1, 1, 2] == pytest.approx(0.6, abs=1e-15)
    assert estep(e, pr).loglik == pytest.approx(2 * math.log(0.5) + math.log(0.25), abs=1e-14)


def test_estep_observed_stay(id_graph):
    pr = problem(id_graph, [([0, 1, 2], [1, 2, 2])])
    e = IntensityEstimate(alpha_grid(id_graph, 2, ID), pr.grid.taus, id_graph)
    c = estep(e, pr)
    assert c.y[1].tolist() == [0, 1, 0]
    assert np.all(c.d[1] == 0)


def test_estep_matches_enumeration_with_exact_states():
    g = build_graph(4, [(1, 2), (1, 3), (2, 3), (2, 4), (3, 4)], exact_states=(3, 4))
    subjects = [([0, 1, 2, 3, 4], [1, 1, 2, 2, 3]), ([0, 3], [1, 4]),
                ([1, 2, 4], [1, 3, 4]), ([0, 4], [1, 2])]
    pr = problem(g, subjects)
    rng = np.random.default_rng(0)
    a = np.zeros((4, 4, 4))
    a[:, g.allowed] = rng.uniform(0.05, 0.3, (4, int(g.allowed.sum())))
    e = IntensityEstimate(a, pr.grid.taus, g)
    psd, psy = estep_per_subject(e, pr)
    total = 0.0
    for i, (t, s) in enumerate(subjects):
        d, y, ll = enumerate_subject(a, pr.grid.taus, t, s, g.exact_states)
        np.testing.assert_allclose(psd[i], d, atol=1e-12)
        np.testing.assert_allclose(psy[i], y, atol=1e-12)
        total += ll
    assert estep(e, pr).loglik == pytest.approx(total, abs=1e-12)


def test_marking_exact_changes_only_arrival_intervals():
    plain, exact = illness_death(), illness_death(exact=(3,))
    subjects = [([0, 1, 3], [1, 2, 3]), ([0, 2, 3], [1, 1, 2]), ([0, 3], [1, 1])]
    p1, p2 = problem(plain, subjects), problem(exact, subjects)
    a = alpha_grid(plain, 3, ID)
    d1, y1 = estep_per_subject(IntensityEstimate(a, p1.grid.taus, plain), p1)
    d2, y2 = estep_per_subject(IntensityEstimate(a, p2.grid.taus, exact), p2)
    assert np.array_equal(d1[1:], d2[1:]) and np.array_equal(y1[1:], y2[1:])
    # subject 0 only differs in the bins of its interval ending in state 3
    assert np.array_equal(d1[0, :1], d2[0, :1])
    assert not np.allclose(y1[0, 1:], y2[0, 1:])


def test_zero_denominator_names_subject(id_graph):
    pr = problem(id_graph, [([0, 1], [1, 1]), ([0, 1], [1, 3])])
    a = alpha_grid(id_graph, 1, {(1, 2): 0.3, (2, 3): 0.2})
    with pytest.raises(ZeroDenominatorError) as exc:
        estep(IntensityEstimate(a, pr.grid.taus, id_graph), pr)
    assert exc.value.subject == "s1" and exc.value.interval == (0.0, 1.0)
    with pytest.raises(NonFiniteLoglikError):
        observed_loglik(IntensityEstimate(a, pr.grid.taus, id_graph), pr)


# -- observed likelihood ------------------------------------------------------------

def test_loglik_survival():
    g = survival()
    for end, expected in ((2, math.log(0.3)), (1, math.log(0.7))):
        pr = problem(g, [([0, 1], [1, end])])
        e = IntensityEstimate(alpha_grid(g, 1, {(1, 2): 0.3}), pr.grid.taus, g)
        assert observed_loglik(e, pr) == pytest.approx(expected, abs=1e-15)


def test_loglik_exact_single_path():
    g = illness_death(exact=(3,))
    pr = problem(g, [([0, 1], [1, 3])])
    e = IntensityEstimate(alpha_grid(g, 1, ID), pr.grid.taus, g)
    assert observed_loglik(e, pr) == pytest.approx(math.log(0.2), abs=1e-15)


# -- M-step ---------------------------------------------------------------------------

def test_mstep_examples():
    assert mstep(counts(np.zeros((1, 2, 2)), [[3.0, 0]])).tolist() == [[[0, 0], [0, 0]]]
    a = mstep(counts([[[0, 2.0], [0, 0]]], [[4.0, 0]]))
    assert a[0, 0, 1] == 0.5
    a = mstep(counts([[[0, 3.0], [0, 0]]], [[2.0, 0]]))
    assert a[0, 0, 1] == 1.0


def test_mstep_rows_exactly_bounded():
    rng = np.random.default_rng(4)
    for _ in range(200):
        d = np.zeros((3, 3, 3))
        d[:, 0, 1:] = rng.uniform(0, 1, (3, 2))
        y = np.zeros((3, 3))
        y[:, 0] = d[:, 0].sum(axis=-1) * rng.choice([1.0, 1 + 1e-16, 0.7], 3)
        a = mstep(counts(d, y))
        assert np.all(a.sum(axis=-1) <= 1.0) and np.all(a >= 0)


# -- reduced gradient ----------------------------------------------------------------

def test_reduced_gradient_at_fixed_point_and_perturbed():
    d = np.array([[[0, 2.0, 1.0], [0, 0, 0.5], [0, 0, 0]]])
    y = np.array([[10.0, 4.0, 0.0]])
    c = counts(d, y)
    a = mstep(c)
    assert np.max(np.abs(reduced_gradient(a, c))) <= 1e-12
    assert is_local_max(a, c)
    delta = 0.1
    grad = reduced_gradient(a * (1 + delta), c)
    assert grad[0, 0, 1] == pytest.approx(10 * delta / (1 + delta), rel=1e-12)
    assert not is_local_max(a * (1 + delta), c)
    assert not is_local_max(a * (1 - delta), c)


def test_reduced_gradient_zero_cells():
    c = counts([[[0, 0.0], [0, 0]]], [[5.0, 0]])
    assert reduced_gradient(np.zeros((1, 2, 2)), c).tolist() == [[[0, 0], [0, 0]]]


# -- driver ---------------------------------------------------------------------------

def fully_observed(graph, n, K, rng, probs):
    subjects = []
    times = list(range(K + 1))
    for _ in range(n):
        x = [1]
        for _ in range(K):
            row = probs[x[-1]]
            x.append(int(rng.choice(len(row), p=row)) + 1)
        subjects.append((times, x))
    return subjects


def test_fully_observed_closed_form(id_graph):
    rng = np.random.default_rng(8)
    probs = {1: [0.6, 0.25, 0.15], 2: [0, 0.7, 0.3], 3: [0, 0, 1.0]}
    subjects = fully_observed(id_graph, 60, 6, rng, probs)
    pr = problem(id_graph, subjects)
    res = run_em(pr, EMConfig(tolerance=1e-10))
    d, y = occurrence_exposure(subjects, pr.grid.taus, 3)
    expected = np.divide(d, y[..., None], out=np.zeros_like(d), where=y[..., None] > 0)
    assert res.converged and res.iterations <= 2
    np.testing.assert_allclose(res.estimate.alpha, expected, atol=1e-12)


def test_max_iterations_one(id_graph):
    rng = np.random.default_rng(1)
    pr = problem(id_graph, [([0, 1.5, 3], [1, 1, 2]), ([0, 2, 3], [1, 2, 3]),
                            ([0, 1, 2.5], [1, 1, 3])])
    res = run_em(pr, EMConfig(max_iterations=1))
    assert not res.converged and res.stop_reason == "max_iter" and res.iterations == 1
    assert len(res.loglik_trace) == res.iterations
    with pytest.raises(MaxIterationsError) as exc:
        run_em(pr, EMConfig(max_iterations=1, raise_on_max_iter=True))
    assert exc.value.result.iterations == 1


def test_criteria_and_trace(id_graph):
    pr = problem(id_graph, [([0, 1.5, 3], [1, 1, 2]), ([0, 2, 3], [1, 2, 3]),
                            ([0, 1, 2.5], [1, 1, 3]), ([0, 0.5, 3], [1, 1, 1])])
    for crit, reason in (("loglik_change", "loglik_tol"), ("reduced_gradient", "kkt"),
                         ("max_intensity_change", "intensity_tol")):
        res = run_em(pr, EMConfig(tolerance=1e-6, criterion=crit))
        assert res.converged and res.stop_reason == reason
        assert np.all(np.diff(res.loglik_trace) >= -1e-9)
    text = write_trace_csv(res)
    lines = text.splitlines()
    assert lines[0] == "iteration,loglik,max_delta,max_reduced_gradient"
    assert len(lines) == res.iterations + 1


def test_config_validation(id_graph):
    pr = problem(id_graph, [([0, 1], [1, 2])])
    for bad in (dict(tolerance=0), dict(max_iterations=0), dict(criterion="vibes"),
                dict(initial="lucky"), dict(initial=np.zeros((1, 3, 3)))):
        with pytest.raises(ConfigurationError):
            run_em(pr, EMConfig(**bad))


def test_unfortunate_initial(id_graph):
    taus = np.arange(1.0, 41.0)
    e = unfortunate_estimate(id_graph, taus)
    col = e.jumps(1, 2)
    assert col[:4].sum() == pytest.approx(0.9) and col.sum() == pytest.approx(1.0)
    with pytest.raises(ConfigurationError):
        unfortunate_estimate(id_graph, np.arange(1.0, 6.0))


def test_kkt_residual_components():
    alpha = np.array([0.5, 1e-9, 0.2])
    grad = np.array([0.0, 30.0, -0.01])
    assert kkt_residual(alpha, grad) == pytest.approx(0.01)
    assert kkt_residual(alpha, np.array([0.0, 30.0, 0.0])) == pytest.approx(3e-8)


def test_scenario2_fit_to_kkt():
    from icmsm.simulate import builtin_scenario, simulate_panel
    data = simulate_panel(builtin_scenario("scenario2"), 100, seed=11)
    res = run_em(data, EMConfig(tolerance=1e-3, criterion="reduced_gradient"))
    assert res.converged and res.stop_reason == "kkt"
    assert res.kkt_residual <= 1e-3
    c = res.final_counts
    per_bin = c.y.sum(axis=1)
    np.testing.assert_allclose(per_bin, c.at_risk, atol=1e-9)


def test_estep_normalisation_random():
    from oracles import random_subject
    rng = np.random.default_rng(21)
    g = build_graph(4, [(1, 2), (1, 3), (2, 3), (2, 4), (3, 4)], exact_states=(4,))
    taus = np.arange(1.0, 7.0)
    a = np.zeros((6, 4, 4))
    a[:, g.allowed] = rng.uniform(0.02, 0.25, (6, int(g.allowed.sum())))
    # the first subject is seen at every time, which pins the grid to taus
    subjects = [(list(range(7)), [1] * 7)]
    subjects += [random_subject(rng, a, g.allowed, taus, g.exact_states) for _ in range(40)]
    pr = problem(g, subjects)
    _, psy = estep_per_subject(IntensityEstimate(a, pr.grid.taus, g), pr)
    for i, (t, _) in enumerate(subjects):
        lo, hi = int(t[0]), int(t[-1])
        np.testing.assert_allclose(psy[i, lo:hi].sum(axis=1), 1.0, atol=1e-10)
        assert np.all(psy[i, :lo] == 0) and np.all(psy[i, hi:] == 0)
