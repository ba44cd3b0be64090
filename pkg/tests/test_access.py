import itertools

import networkx as nx
import pytest

from kgstream.access import (
    AgentContext,
    Basis,
    accessible,
    accessible_many,
    accessible_streams_for_collaboration,
    accessible_streams_for_role,
    base_streams,
    cache_stats,
    colocated_accessible_sensors,
    collaboration_active,
    load_context,
    register_collaboration,
)
from kgstream.errors import CollaborationError, UnknownResourceError
from kgstream.formats import load_document, load_rules
from kgstream.generator import generate, scale
from kgstream.graphs import (
    CollaborationDescriptor,
    RightScope,
    check_site_tree,
    data_iri,
    fixture_from_document,
    stream_iri,
)

from conftest import PLANT, at, build_store


def context(agent: str, role: str, location: str | None = None, activity: str | None = None, now: int = 0) -> AgentContext:
    return AgentContext(
        data_iri(agent),
        data_iri(role),
        data_iri(location) if location else None,
        data_iri(activity) if activity else None,
        now,
    )


def test_environment_right_covers_contained_sites(plant_store):
    hank = context("hank", "hvac_engineer", "plant", now=at("12:00:00"))
    for source in ("co2_hall_a", "co2_hall_b", "cobot1_torque"):
        decision = accessible(hank, stream_iri(source), plant_store)
        assert decision.granted
        assert decision.basis is Basis.ROLE_RIGHT
        assert decision.witness == (data_iri("hvac_plant"),)


def test_collaboration_grants_only_inside_its_window(plant_store):
    anne_noon = context("anne", "operator", "hall_b", "maintenance", at("12:00:00"))
    decision = accessible(anne_noon, stream_iri("cobot1_torque"), plant_store)
    assert decision.granted
    assert decision.basis is Basis.COLLABORATION
    assert decision.witness == (data_iri("bob_helps_anne"), data_iri("maintainer_cobot1"))

    anne_evening = context("anne", "operator", "hall_b", "maintenance", at("17:00:00"))
    assert not accessible(anne_evening, stream_iri("cobot1_torque"), plant_store).granted
    # the end of the window is exclusive
    anne_end = context("anne", "operator", "hall_b", "maintenance", at("16:00:00"))
    assert not accessible(anne_end, stream_iri("cobot1_torque"), plant_store).granted
    anne_start = context("anne", "operator", "hall_b", "maintenance", at("08:00:00"))
    assert accessible(anne_start, stream_iri("cobot1_torque"), plant_store).granted


def test_collaboration_needs_the_workflow_element(plant_store):
    anne = context("anne", "operator", "hall_b", "inspection", at("12:00:00"))
    assert not accessible(anne, stream_iri("cobot1_torque"), plant_store).granted
    assert accessible(anne, stream_iri("co2_hall_b"), plant_store).basis is Basis.ROLE_RIGHT


def test_derived_stream_needs_every_base(plant_store):
    derived = stream_iri("cobot1_anomalies")
    assert base_streams(plant_store, derived) == sorted(
        [stream_iri("cobot1_torque"), stream_iri("cobot1_thermal")], key=lambda t: str(t.value)
    )
    hank = context("hank", "hvac_engineer", now=at("12:00:00"))
    assert accessible(hank, derived, plant_store).basis is Basis.DERIVED_CLOSURE
    anne = context("anne", "operator", activity="maintenance", now=at("12:00:00"))
    assert accessible(anne, derived, plant_store).basis is Basis.DERIVED_CLOSURE
    anne_late = context("anne", "operator", activity="maintenance", now=at("18:00:00"))
    assert accessible(anne_late, derived, plant_store).basis is Basis.DENIED
    assert derived in accessible_streams_for_role(data_iri("maintainer"), plant_store)
    assert derived not in accessible_streams_for_role(data_iri("operator"), plant_store)


BASES = ("co2_hall_a", "co2_hall_b", "cobot1_thermal")


@pytest.mark.parametrize("held", list(itertools.product([True, False], repeat=3)))
def test_three_input_stream_needs_all_three(held):
    document = load_document(PLANT)
    document["roles"].append({"id": "auditor"})
    document["rights"] += [
        {"id": f"audit_{base}", "role": "auditor", "scope": "system", "target": base}
        for base, granted in zip(BASES, held)
        if granted
    ]
    document["pipelines"].append(
        {
            "id": "three_way",
            "nodes": [{"id": base, "kind": "source", "params": {"stream": base, "time_field": "ts"}} for base in BASES]
            + [{"id": "merged", "kind": "union"}, {"id": "out", "kind": "sink", "params": {"kind": "broker", "stream": "three_way_out"}}],
            "edges": [{"from": base, "to": "merged"} for base in BASES] + [{"from": "merged", "to": "out"}],
        }
    )
    store = build_store(fixture_from_document(document))
    derived = stream_iri("three_way_out")
    assert base_streams(store, derived) == sorted((stream_iri(b) for b in BASES), key=lambda t: str(t.value))

    auditor = context("audrey", "auditor", now=at("12:00:00"))
    for base, granted in zip(BASES, held):
        assert accessible(auditor, stream_iri(base), store).granted is granted
    decision = accessible(auditor, derived, store)
    assert decision.granted is all(held)
    assert decision.basis is (Basis.DERIVED_CLOSURE if all(held) else Basis.DENIED)
    assert (derived in accessible_streams_for_role(data_iri("auditor"), store)) is all(held)


def test_unknown_stream(plant_store):
    with pytest.raises(UnknownResourceError):
        accessible(context("hank", "hvac_engineer"), stream_iri("nothing"), plant_store)


def test_rules_must_run_before_decisions(plant_fixture):
    store = build_store(plant_fixture, materialize=False)
    hank = context("hank", "hvac_engineer", now=at("12:00:00"))
    assert not accessible(hank, stream_iri("co2_hall_a"), store).granted
    store.materialize()
    assert accessible(hank, stream_iri("co2_hall_a"), store).granted


def test_load_context(plant_store):
    ctx = load_context(data_iri("anne"), plant_store, now=5)
    assert ctx.role == data_iri("operator")
    assert ctx.location == data_iri("hall_b")
    assert ctx.activity == data_iri("maintenance")
    assert ctx.now == 5


def test_colocated_sensors(plant_store):
    anne = context("anne", "operator", "hall_b", "maintenance", at("12:00:00"))
    assert colocated_accessible_sensors(anne, plant_store) == {(data_iri("co2_hall_b"), "hall_b.co2_hall_b")}
    bob = context("bob", "maintainer", "line1", now=at("12:00:00"))
    assert colocated_accessible_sensors(bob, plant_store) == {
        (data_iri("cobot1_torque"), "line1.cobot1_torque"),
        (data_iri("cobot1_thermal"), "line1.cobot1_thermal"),
    }
    hank = context("hank", "hvac_engineer", "plant", now=at("12:00:00"))
    assert len(colocated_accessible_sensors(hank, plant_store)) == 4
    assert colocated_accessible_sensors(context("x", "operator"), plant_store) == set()


def test_register_collaboration(plant_store):
    late = CollaborationDescriptor("late_shift", "bob", "anne", "maintenance", ["maintainer_cobot1"], at("16:00:00"), at("22:00:00"))
    assert register_collaboration(late, plant_store) > 0
    plant_store.materialize()
    anne = context("anne", "operator", "hall_b", "maintenance", at("17:00:00"))
    assert accessible(anne, stream_iri("cobot1_torque"), plant_store).witness[0] == data_iri("late_shift")

    with pytest.raises(CollaborationError):
        register_collaboration(
            CollaborationDescriptor("grab", "anne", "bob", "maintenance", ["hvac_plant"], 0, 1), plant_store
        )


def test_collaboration_on_a_process_covers_its_activities(plant_store):
    register_collaboration(
        CollaborationDescriptor("upkeep", "hank", "anne", "line1_upkeep", ["hvac_plant"], at("00:00:00"), at("23:00:00")),
        plant_store,
    )
    anne = context("anne", "operator", "hall_b", "maintenance", at("20:00:00"))
    decision = accessible(anne, stream_iri("co2_hall_a"), plant_store)
    assert decision.basis is Basis.COLLABORATION
    assert collaboration_active(plant_store, data_iri("upkeep"), at("20:00:00"))


def test_accessible_many_and_cache(plant_store):
    before = cache_stats()
    hank = context("hank", "hvac_engineer", now=at("12:00:00"))
    streams = [stream_iri("co2_hall_a"), stream_iri("co2_hall_b")]
    decisions = accessible_many(hank, streams, plant_store)
    assert all(d.granted for d in decisions.values())
    accessible(hank, streams[0], plant_store)
    after = cache_stats()
    assert after["hits"] > before["hits"]


# -- brute force on a generated graph ------------------------------------------

def _covered_systems(fixture) -> dict[str, set[str]]:
    """System ids each right reaches, computed straight from the descriptors."""
    tree = check_site_tree(fixture.sites)
    so_location = {so.id: so.location for so in fixture.smart_objects}
    out = {}
    for right in fixture.rights:
        if right.scope is RightScope.SYSTEM:
            covered = {right.target}
        elif right.scope is RightScope.SMART_OBJECT:
            covered = {s.id for s in fixture.systems if s.smart_object == right.target}
        else:
            zones = {right.target} | nx.descendants(tree, right.target)
            covered = {
                s.id for s in fixture.systems if (s.location or so_location.get(s.smart_object)) in zones
            }
        out[right.id] = covered
    return out


@pytest.fixture(scope="module")
def g1():
    generated = generate(scale("G1", seed=3))
    store = generated.store()
    load_rules().install(store)
    store.materialize()
    return generated, store


def test_role_access_matches_brute_force(g1):
    generated, store = g1
    fixture = generated.fixture
    covered = _covered_systems(fixture)
    sources = {s.id for s in fixture.sources}
    for role in fixture.roles:
        expected = set()
        for right in fixture.rights:
            if right.role == role.id:
                expected |= {stream_iri(s) for s in covered[right.id] if s in sources}
        assert accessible_streams_for_role(data_iri(role.id), store) == expected
        ctx = context("outsider", role.id)
        decisions = accessible_many(ctx, [s.stream for s in fixture.sources], store)
        assert {s for s, d in decisions.items() if d.granted} == expected


def test_collaboration_access_matches_brute_force(g1):
    generated, store = g1
    fixture = generated.fixture
    covered = _covered_systems(fixture)
    assert fixture.collaborations
    for collab in fixture.collaborations:
        inside = (collab.start + collab.end) // 2
        expected, anytime = set(), set()
        for other in fixture.collaborations:
            if other.to_agent == collab.to_agent and other.workflow_element == collab.workflow_element:
                granted = {stream_iri(s) for right in other.rights for s in covered[right]}
                anytime |= granted
                if other.start <= inside < other.end:
                    expected |= granted
        agent, activity = data_iri(collab.to_agent), data_iri(collab.workflow_element)
        assert accessible_streams_for_collaboration(agent, activity, store, inside) == expected
        assert accessible_streams_for_collaboration(agent, activity, store) == anytime
