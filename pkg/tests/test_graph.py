import numpy as np
import pytest

from icmsm.errors import CycleError, GraphError, InvalidStateError, SelfLoopError, \
    UnreachableObservationError
from icmsm.graph import (
    build_graph, extended_illness_death, illness_death, parse_model_spec,
    read_model_spec, serialize_model_spec, survival, validate_observation_sequence,
    write_model_spec,
)


def test_illness_death_structure():
    g = build_graph(3, [(1, 2), (1, 3), (2, 3)], [])
    assert g.absorbing_states == (3,)
    assert g.successors(1) == {2, 3}
    assert g.predecessors(3) == {1, 2}
    assert g.topological_order == (1, 2, 3)


def test_two_state_survival():
    g = build_graph(2, [(1, 2)], [])
    assert g.absorbing_states == (2,)
    assert g.allowed.tolist() == [[False, True], [False, False]]


def test_cycle_names_witness():
    with pytest.raises(CycleError) as exc:
        build_graph(3, [(1, 2), (2, 3), (3, 1)], [])
    assert exc.value.cycle == [1, 2, 3, 1]
    assert "1->2->3->1" in str(exc.value)


def test_invalid_inputs():
    with pytest.raises(InvalidStateError):
        build_graph(3, [(1, 4)])
    with pytest.raises(SelfLoopError):
        build_graph(3, [(2, 2)])
    with pytest.raises(InvalidStateError):
        build_graph(3, [(1, 2)], exact_states=[5])
    with pytest.raises(GraphError):
        build_graph(1, [])


def test_reach_sets_consistent():
    g = extended_illness_death()
    for a in g.states:
        for b in g.successors(a):
            assert a in g.predecessors(b)
    assert g.has_path(1, 4) and not g.has_path(3, 4)


def test_observation_sequences(id_graph):
    validate_observation_sequence(id_graph, [1, 1, 2, 3])
    with pytest.raises(UnreachableObservationError) as exc:
        validate_observation_sequence(id_graph, [2, 1], subject="A")
    assert exc.value.pair == (2, 1) and exc.value.subject == "A"
    validate_observation_sequence(extended_illness_death(), [1, 2, 4])


def test_exact_state_need_not_be_absorbing():
    g = build_graph(3, [(1, 2), (2, 3)], exact_states=[2])
    assert g.is_exact(2) and not g.is_absorbing(2)


def test_model_spec_roundtrip(tmp_path):
    g = extended_illness_death(exact=(3, 4))
    text = serialize_model_spec(g)
    assert parse_model_spec(text) == g
    assert serialize_model_spec(parse_model_spec(text)) == text
    write_model_spec(g, tmp_path / "m.toml")
    assert read_model_spec(tmp_path / "m.toml") == g


def test_model_spec_errors():
    with pytest.raises(GraphError):
        parse_model_spec("states = 3\n")
    with pytest.raises(GraphError):
        parse_model_spec("states = [")


def test_labels_resolve(id_graph):
    assert id_graph.state_index("ill") == 2
    assert id_graph.state_index("3") == 3
    with pytest.raises(InvalidStateError):
        id_graph.state_index("zombie")
    assert survival().label(2) == "dead"
