import copy

import pytest

from kgstream.errors import BuildError, CollaborationError, UnmappedAttributeError
from kgstream.graphs import (
    A,
    BOT,
    IOE,
    PROV,
    MISSING,
    SG,
    AttributeMap,
    CollaborationDescriptor,
    FieldBinding,
    Fixture,
    SiteNode,
    build_all,
    build_domain_graph,
    build_gathering_graph,
    canonicalize,
    check_site_tree,
    collaboration_triples_for_store,
    data_iri,
    fixture_from_document,
    fixture_from_store,
    get_path,
    merge_fixtures,
    resolve_canonical,
    stream_fields,
    stream_iri,
    topic_of,
)
from kgstream.kg import Triple, literal

from conftest import at, build_store


def test_plant_builds(plant_fixture):
    graphs = build_all(plant_fixture)
    assert set(graphs) == {"domain", "gathering", "transformation"}
    domain = set(graphs["domain"])
    assert Triple(data_iri("plant"), BOT.containsZone, data_iri("hall_a")) in domain
    # processes named only through part_of become workflow elements
    assert Triple(data_iri("line1_upkeep"), A, IOE.Process) in domain


def test_site_cycles_are_rejected():
    sites = [SiteNode("a", ["b"]), SiteNode("b", ["c"]), SiteNode("c", ["a"])]
    with pytest.raises(BuildError, match="cyclic"):
        check_site_tree(sites)
    with pytest.raises(BuildError, match="undeclared site"):
        check_site_tree([SiteNode("a", ["ghost"])])


def test_undeclared_references(plant_fixture):
    broken = copy.deepcopy(plant_fixture)
    broken.agents[0].role = "janitor"
    with pytest.raises(BuildError, match="janitor"):
        build_all(broken)

    broken = copy.deepcopy(plant_fixture)
    broken.sources[0].location = "roof"
    with pytest.raises(BuildError, match="roof"):
        build_all(broken)


def test_collaboration_must_use_the_origin_role(plant_fixture):
    broken = copy.deepcopy(plant_fixture)
    broken.collaborations[0].rights = ["hvac_plant"]
    with pytest.raises(CollaborationError):
        build_domain_graph(
            broken.sites, broken.agents, broken.roles, broken.rights, broken.collaborations,
            broken.smart_objects, broken.systems, broken.activities,
        )
    broken.collaborations[0].rights = ["maintainer_cobot1"]
    broken.collaborations[0].end = broken.collaborations[0].start
    with pytest.raises(BuildError, match="start before"):
        build_all(broken)


def test_collaboration_against_a_store(plant_store):
    collab = CollaborationDescriptor("late_shift", "bob", "hank", "inspection", ["maintainer_cobot1"], at("16:00:00"), at("20:00:00"))
    triples = collaboration_triples_for_store(collab, plant_store)
    assert Triple(data_iri("late_shift"), IOE.toAgent, data_iri("hank")) in triples
    with pytest.raises(CollaborationError):
        collaboration_triples_for_store(
            CollaborationDescriptor("bad", "anne", "bob", "inspection", ["maintainer_cobot1"], 0, 10), plant_store
        )
    with pytest.raises(BuildError, match="workflow element"):
        collaboration_triples_for_store(
            CollaborationDescriptor("bad", "bob", "anne", "lunch", ["maintainer_cobot1"], 0, 10), plant_store
        )


def test_gathering_rejects_conflicting_bindings(plant_fixture):
    f = plant_fixture
    bindings = f.bindings + [FieldBinding("co2_hall_b", "co2", "temperature")]
    f.sources[1].schema.append("co2")
    with pytest.raises(BuildError, match="bound to both"):
        build_gathering_graph(f.sources, bindings, f.properties)


def test_gathering_rejects_bad_sources(plant_fixture):
    f = copy.deepcopy(plant_fixture)
    f.sources[1].metadata["topic"] = "hall_a.co2_hall_a"
    with pytest.raises(BuildError, match="more than one stream"):
        build_gathering_graph(f.sources, f.bindings, f.properties)

    f = copy.deepcopy(plant_fixture)
    f.bindings = [b for b in f.bindings if b.source != "co2_hall_a"]
    with pytest.raises(BuildError, match="no field bindings"):
        build_gathering_graph(f.sources, f.bindings, f.properties)

    f = copy.deepcopy(plant_fixture)
    f.bindings[0].field_type = "string"
    with pytest.raises(BuildError, match="expected one of"):
        build_gathering_graph(f.sources, f.bindings, f.properties)

    f = copy.deepcopy(plant_fixture)
    f.storage[0].fields = ["humidity"]
    with pytest.raises(BuildError, match="outside the schema"):
        build_gathering_graph(f.sources, f.bindings, f.properties, f.storage)


def test_topics_and_fields(plant_store):
    assert topic_of(plant_store, stream_iri("co2_hall_b")) == "hall_b.co2_hall_b"
    fields = stream_fields(plant_store, stream_iri("cobot1_thermal"))
    assert [f.name for f in fields] == ["ts", "temp_c", "state"]
    assert [f.canonical for f in fields] == [None, "temperature", "status"]
    assert fields[2].field_type == "string"


def test_derived_stream_inherits_bindings(plant_store):
    derived = stream_iri("cobot1_anomalies")
    assert topic_of(plant_store, derived) == "cobot_anomalies.out"
    fields = {f.name: f.canonical for f in stream_fields(plant_store, derived)}
    assert fields == {"ts": None, "torque_nm": "torque", "temp_c": "temperature"}
    assert Triple(derived, PROV.wasDerivedFrom, stream_iri("cobot1_torque")) in plant_store


def test_attribute_map(plant_fixture):
    amap = AttributeMap(plant_fixture.bindings, plant_fixture.properties)
    assert amap.resolve("CO2_level").name == "carbon_dioxide"
    assert resolve_canonical("co2", plant_fixture.bindings).name == "carbon_dioxide"
    with pytest.raises(UnmappedAttributeError):
        amap.resolve("humidity")


def test_canonicalize(plant_store):
    fields = stream_fields(plant_store, stream_iri("cobot1_thermal"))
    doc, unmapped = canonicalize({"ts": 5, "temp_c": 71.5, "extra": True}, fields)
    assert doc == {"ts": 5, "temperature": 71.5, "extra": True}
    assert sorted(unmapped) == ["extra", "ts"]


def test_get_path():
    payload = {"a": {"b": [10, {"c": 3}]}}
    assert get_path(payload, "a.b.1.c") == 3
    assert get_path(payload, "a.b.0") == 10
    assert get_path(payload, "a.x") is MISSING


def test_fixture_round_trips_through_the_store(plant_fixture):
    store = build_store(plant_fixture)
    extracted = fixture_from_store(store)
    assert extracted.pipelines == []
    assert {s.id for s in extracted.sources} == {"co2_hall_a", "co2_hall_b", "cobot1_torque", "cobot1_thermal"}
    original = build_all(plant_fixture)
    rebuilt = build_all(extracted)
    # systems pick up the location their source declares
    assert set(rebuilt["domain"] + rebuilt["gathering"]) == set(original["domain"] + original["gathering"])


def test_merge_fixtures(plant_fixture):
    update = Fixture(sites=[SiteNode("hall_b", ["storeroom"]), SiteNode("storeroom")], credentials={"anne": "new"})
    merged = merge_fixtures(plant_fixture, update)
    sites = {s.id: s for s in merged.sites}
    assert sites["hall_b"].contains == ["storeroom"]
    assert "storeroom" in sites and "plant" in sites
    assert merged.credentials["anne"] == "new"
    assert merged.credentials["hank"] == "hank-secret"
    assert len(merged.sources) == len(plant_fixture.sources)


def test_fixture_from_document_errors():
    with pytest.raises(BuildError, match="unknown descriptor sections"):
        fixture_from_document({"gadgets": []})
    with pytest.raises(BuildError, match="invalid entry"):
        fixture_from_document({"rights": [{"id": "r", "role": "x", "scope": "galaxy", "target": "y"}]})
    with pytest.raises(BuildError, match="list of mappings"):
        fixture_from_document({"sites": "plant"})


def test_stream_metadata_is_asserted(plant_store):
    assert Triple(stream_iri("co2_hall_a"), SG.topic, literal("hall_a.co2_hall_a")) in plant_store.asserted
