import pytest

from kgstream.access import AgentContext
from kgstream.broker import Broker
from kgstream.errors import BadRequestError, UnknownResourceError
from kgstream.graphs import data_iri, stream_iri
from kgstream.monitoring import (
    Feed,
    MonitoringRequest,
    MonitoringService,
    candidate_streams,
    next_boundary,
    open_feed,
    resolve,
    revalidate,
)

from conftest import at


def request(*constraints, token=None) -> MonitoringRequest:
    return MonitoringRequest.from_document({"constraints": list(constraints), "token": token})


def ids(streams) -> set[str]:
    return {s.value.rsplit("/", 1)[-1] for s, _ in streams}


def anne(clock: str) -> AgentContext:
    return AgentContext(data_iri("anne"), data_iri("operator"), data_iri("hall_b"), data_iri("maintenance"), at(clock))


@pytest.fixture
def broker():
    b = Broker()
    yield b
    b.close()


def test_request_documents():
    r = request({"Property": "carbon_dioxide"}, {"Site": ["hall_a", "hall_b"]})
    assert r.constraints == [{"Property": ["carbon_dioxide"]}, {"Site": ["hall_a", "hall_b"]}]
    for bad in ({}, {"constraints": []}, {"constraints": [{}]}, {"constraints": [{"Room": ["x"]}]}):
        with pytest.raises(BadRequestError):
            MonitoringRequest.from_document(bad)


def test_candidates_are_the_conjunction_of_constraints(plant_store):
    assert ids(candidate_streams(request({"Property": ["carbon_dioxide"]}), plant_store)) == {"co2_hall_a", "co2_hall_b"}
    assert ids(candidate_streams(request({"Site": ["hall_a"]}), plant_store)) == {
        "co2_hall_a",
        "cobot1_torque",
        "cobot1_thermal",
    }
    both = request({"Property": ["temperature"]}, {"Site": ["hall_a"]})
    assert candidate_streams(both, plant_store) == {(stream_iri("cobot1_thermal"), "line1.cobot1_thermal")}
    either = request({"Property": ["torque", "temperature"]})
    assert ids(candidate_streams(either, plant_store)) == {"cobot1_torque", "cobot1_thermal"}
    assert ids(candidate_streams(request({"Sensor": ["co2_hall_b"], "Site": ["plant"]}), plant_store)) == {"co2_hall_b"}
    assert candidate_streams(request({"Property": ["torque"]}, {"Site": ["hall_b"]}), plant_store) == set()


@pytest.mark.parametrize(
    "constraint", [{"Property": ["humidity"]}, {"Site": ["attic"]}, {"Sensor": ["hvac_unit"]}]
)
def test_unknown_constraint_ids(plant_store, constraint):
    with pytest.raises(UnknownResourceError):
        candidate_streams(request(constraint), plant_store)


def test_resolve_filters_by_access(plant_store):
    assert ids(resolve(request({"Property": ["carbon_dioxide"]}), anne("12:00:00"), plant_store)) == {"co2_hall_b"}
    line = request({"Site": ["line1"]})
    assert ids(resolve(line, anne("12:00:00"), plant_store)) == {"cobot1_torque", "cobot1_thermal"}
    assert resolve(line, anne("17:00:00"), plant_store) == set()


def test_next_boundary(plant_store):
    assert next_boundary(plant_store, data_iri("anne"), at("07:00:00")) == at("08:00:00")
    assert next_boundary(plant_store, data_iri("anne"), at("12:00:00")) == at("16:00:00")
    assert next_boundary(plant_store, data_iri("anne"), at("16:00:00")) is None
    assert next_boundary(plant_store, data_iri("hank"), 0) is None


def test_feed_delivers_canonical_records(broker, plant_store):
    feed = open_feed(request({"Site": ["line1"]}), anne("12:00:00"), broker, plant_store)
    assert feed.boundary == at("16:00:00")
    assert feed.describe()["topics"] == ["line1.cobot1_thermal", "line1.cobot1_torque"]

    broker.publish("hall_b.co2_hall_b", {"ts": 0, "CO2_level": 500})
    broker.publish("line1.cobot1_torque", {"ts": 1, "torque_nm": 90.0, "extra": True}, event_time=1)
    broker.publish("line1.cobot1_thermal", {"ts": 2, "temp_c": 71.0, "state": "hot"}, event_time=2)

    torque = feed.next(timeout=2)
    assert torque["type"] == "event"
    assert torque["stream"] == stream_iri("cobot1_torque").value
    assert torque["fields"] == {"ts": 1, "torque": 90.0, "extra": True}
    assert torque["unmapped"] == ["ts", "extra"]
    # the monitoring spec of the thermal stream leaves out its state
    thermal = feed.next(timeout=2)
    assert thermal["fields"] == {"ts": 2, "temperature": 71.0}
    assert thermal["event_time"] == 2
    assert feed.next(timeout=0.1) is None
    assert feed.first_event_ms is not None
    feed.close()


def test_revalidation_at_the_collaboration_end(broker, plant_store):
    feed = open_feed(request({"Site": ["line1"]}), anne("12:00:00"), broker, plant_store)
    assert revalidate(feed, plant_store, at("13:00:00")) is feed
    assert feed.drain() == []

    revalidate(feed, plant_store, at("16:00:00"))
    notice = feed.next(timeout=1)
    assert notice["type"] == "notice"
    assert notice["removed"] == sorted([stream_iri("cobot1_torque").value, stream_iri("cobot1_thermal").value])
    assert notice["added"] == []
    assert feed.streams == set()
    broker.publish("line1.cobot1_torque", {"ts": 3, "torque_nm": 99.0})
    assert feed.next(timeout=0.2) is None
    feed.close()


def test_feed_queue_drops_the_oldest(plant_store):
    feed = Feed(request({"Site": ["plant"]}), anne("12:00:00"), plant_store, queue_size=2)
    for i in range(5):
        feed.push({"type": "event", "i": i})
    assert [r["i"] for r in feed.drain()] == [3, 4]
    assert feed.dropped == 3
    feed.push({"type": "event", "i": 5})
    feed.close()
    assert [r["i"] for r in feed] == [5]


def test_service_closes_feeds_with_expired_tokens(broker, plant_store):
    valid = {"t1"}
    service = MonitoringService(broker, plant_store, token_valid=lambda t: t in valid, clock=lambda: at("12:00:00"))
    kept = service.open(request({"Site": ["line1"]}, token="t1"), anne("12:00:00"))
    lapsed = service.open(request({"Site": ["line1"]}, token="t2"), anne("12:00:00"))
    service.check()
    assert list(service.feeds) == [kept.id]
    assert lapsed.next(timeout=1) == {"type": "auth-expired"}
    assert lapsed.next(timeout=0.1) is None
    service.stop()
    assert kept.closed
