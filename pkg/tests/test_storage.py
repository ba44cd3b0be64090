import json
import time

import pytest

from kgstream.broker import DLQ_PREFIX, Broker, Event
from kgstream.errors import BackendWriteError, BadRequestError, NotFoundError
from kgstream.graphs import StorageSpec
from kgstream.storage import (
    BackendKind,
    ColumnarBackend,
    Partial,
    Predicate,
    Storage,
    iter_rows,
    make_backend,
)

KINDS = [k.value for k in BackendKind]


def rows(*times, stream="s", **extra) -> list[dict]:
    return [{"_ts": t, "_stream": stream, "_seq": i + 1, "v": t // 100, **extra} for i, t in enumerate(times)]


@pytest.mark.parametrize("kind", KINDS)
def test_append_and_scan(tmp_path, kind):
    backend = make_backend("b", kind, tmp_path, partition=1000)
    assert backend.append("d", "t", rows(100, 900, 1500, 2500)) == 4
    assert [r["_ts"] for r in backend.scan("d", "t")] == [100, 900, 1500, 2500]
    assert [r["_ts"] for r in backend.scan("d", "t", start=900, end=2000)] == [900, 1500]
    assert [r["v"] for r in backend.scan("d", "t", predicates=[Predicate("v", ">=", 15)])] == [15, 25]
    assert backend.tables() == [("d", "t")]
    assert backend.scan("d", "t", stream="other") == []
    assert backend.scan("d", "t")[0] == {"_ts": 100, "_stream": "s", "_seq": 1, "v": 1}
    assert backend.scan("d", "missing") == []


@pytest.mark.parametrize("kind", KINDS)
def test_manifest_survives_a_reopen(tmp_path, kind):
    backend = make_backend("b", kind, tmp_path, partition=1000)
    backend.append("d", "t", rows(100, 1500))
    backend.flush()
    manifest = json.loads((tmp_path / "b" / "d" / "t" / "manifest.json").read_text())
    assert [(p["start"], p["rows"], p["min_ts"], p["max_ts"]) for p in manifest["partitions"]] == [
        (0, 1, 100, 100),
        (1000, 1, 1500, 1500),
    ]
    reopened = make_backend("b", kind, tmp_path, partition=1000)
    assert reopened.tables() == [("d", "t")]
    assert [r["_ts"] for r in reopened.scan("d", "t")] == [100, 1500]


@pytest.mark.parametrize("kind", KINDS)
def test_sealed_partitions_reject_writes(tmp_path, kind):
    backend = make_backend("b", kind, tmp_path, partition=1000)
    backend.append("d", "t", rows(100, 1500))
    assert backend.seal(before=1000) == 1
    with pytest.raises(BackendWriteError, match="sealed"):
        backend.append("d", "t", rows(200))
    assert backend.append("d", "t", rows(1600)) == 1


@pytest.mark.parametrize("kind", KINDS)
def test_bucketed_aggregates(tmp_path, kind):
    backend = make_backend("b", kind, tmp_path, partition=1000)
    backend.append("d", "t", rows(100, 200, 600, 1200))
    buckets = backend.aggregate("d", "t", "v", bucket=500)
    assert sorted(buckets) == [0, 500, 1000]
    assert buckets[0].result("sum") == 3
    assert buckets[0].result("avg") == 1.5
    assert buckets[500].result("count") == 1
    total = backend.aggregate("d", "t", None, start=0, end=1000)
    assert total[None].result("count") == 3


@pytest.mark.parametrize("kind", KINDS)
def test_compaction_averages_per_stream_and_bucket(tmp_path, kind):
    backend = make_backend("b", kind, tmp_path, partition=1000)
    backend.append("d", "t", rows(100, 200, 600) + rows(200, stream="u") + rows(1500))
    assert backend.compact(before=1000) == 1
    assert backend.scan("d", "t", end=1000) == [
        {"_ts": 0, "_stream": "s", "_seq": 0, "_count": 3, "v": 3.0},
        {"_ts": 0, "_stream": "u", "_seq": 0, "_count": 1, "v": 2.0},
    ]
    assert [r["_ts"] for r in backend.scan("d", "t", start=1000)] == [1500]
    assert backend.compact(before=1000) == 0
    with pytest.raises(BackendWriteError):
        backend.append("d", "t", rows(400))


@pytest.mark.parametrize("kind", KINDS)
def test_aggregates_weigh_compacted_rows(tmp_path, kind):
    backend = make_backend("b", kind, tmp_path, partition=1000)
    backend.append("d", "t", [{"_ts": t, "_stream": "s", "_seq": i + 1, "v": v} for i, (t, v) in enumerate([(100, 1), (200, 2), (600, 6)])])
    backend.append("d", "t", [{"_ts": 1500, "_stream": "s", "_seq": 4, "v": 10}])
    assert backend.compact(before=1000) == 1
    total = backend.aggregate("d", "t", "v")[None]
    assert (total.result("count"), total.result("sum"), total.result("avg")) == (4, 19.0, 4.75)
    assert backend.aggregate("d", "t", None)[None].result("count") == 4


@pytest.mark.parametrize("kind", KINDS)
def test_field_aggregates_skip_rows_without_the_field(tmp_path, kind):
    backend = make_backend("b", kind, tmp_path, partition=1000)
    backend.append("d", "t", [{"_ts": 100, "_stream": "s", "_seq": 1, "v": 400}, {"_ts": 200, "_stream": "s", "_seq": 2},
                              {"_ts": 300, "_stream": "s", "_seq": 3, "v": 600}])
    assert backend.aggregate("d", "t", "v")[None].result("avg") == 500
    assert backend.aggregate("d", "t", "v")[None].result("count") == 2
    assert backend.aggregate("d", "t", None)[None].result("count") == 3


def test_columnar_buffers_until_flush(tmp_path):
    backend = ColumnarBackend("c", tmp_path, partition=1000, flush_rows=3)
    backend.append("d", "t", rows(1, 2))
    segment = tmp_path / "c" / "d" / "t" / "0.seg"
    assert not segment.exists()
    assert len(backend.scan("d", "t")) == 2
    backend.append("d", "t", rows(3))
    assert segment.exists()
    backend.append("d", "t", rows(4))
    assert [r["_ts"] for r in backend.scan("d", "t", predicates=[Predicate("_seq", "=", 1)])] == [1, 3, 4]


def test_columnar_rejects_mixed_column_types(tmp_path):
    backend = ColumnarBackend("c", tmp_path, partition=1000, flush_rows=1)
    backend.append("d", "t", [{"_ts": 1, "_stream": "s", "_seq": 1, "x": 1.5}])
    with pytest.raises(BackendWriteError):
        backend.append("d", "t", [{"_ts": 2, "_stream": "s", "_seq": 2, "x": {"nested": True}}])


def test_predicates_and_partials():
    with pytest.raises(BadRequestError):
        Predicate("x", "~", 1)
    assert Predicate("x", "≥", 2).test({"x": 2})
    assert not Predicate("x", ">", 2).test({"x": "text"})
    assert not Predicate("x", "=", None).test({})
    a, b = Partial(), Partial()
    for v in (1, 5):
        a.add(v)
    b.add(-2)
    b.add("n/a")
    a.merge(b)
    assert (a.result("count"), a.result("sum"), a.result("min"), a.result("max")) == (4, 4.0, -2, 5)
    assert Partial().result("avg") is None
    with pytest.raises(BadRequestError):
        a.result("median")


def test_storage_configuration(tmp_path):
    with pytest.raises(BadRequestError, match="unknown backend kind"):
        make_backend("x", "tape", tmp_path)
    with pytest.raises(BadRequestError, match="declared twice"):
        Storage(tmp_path, [{"id": "a", "kind": "row-log"}, {"id": "a", "kind": "row-log"}])
    with pytest.raises(NotFoundError):
        Storage(tmp_path).backend("tape")


def test_route_projects_stored_fields(tmp_path):
    storage = Storage(tmp_path)
    specs = [
        StorageSpec("co2_hall_a", "timeseries", "plant", "co2", ["co2"]),
        StorageSpec("co2_hall_a", "documents", "plant", "co2", ["co2", "meta.room"]),
    ]
    event = Event("hall_a.co2_hall_a", 5, {"ts": 5, "co2": 400, "meta": {"room": "a"}, "noise": 1}, sequence=9)
    result = storage.route(event, specs)
    assert result.written == [("timeseries", "co2"), ("documents", "co2")]
    assert storage.backend("timeseries").scan("plant", "co2") == [{"_ts": 5, "_stream": "co2_hall_a", "_seq": 9, "co2": 400}]
    assert storage.backend("documents").scan("plant", "co2")[0]["meta.room"] == "a"
    assert storage.route(event, []).written == []
    assert storage.describe()["unrouted"] == 1


def test_failed_writes_are_retried_then_dead_lettered(tmp_path, monkeypatch):
    broker = Broker()
    try:
        storage = Storage(tmp_path, retries=2, broker=broker)
        attempts = []

        def broken(*args):
            attempts.append(args)
            raise OSError("disk full")

        monkeypatch.setattr(storage.backend("relational"), "append", broken)
        dlq = broker.subscribe([DLQ_PREFIX + "t"])
        spec = StorageSpec("s", "relational", "d", "t", ["v"])
        result = storage.route(Event("t", 1, {"v": 1}), [spec])
        assert result.failed == [spec.id]
        assert len(attempts) == 2
        assert dlq.get(timeout=1).payload["spec"] == spec.id
    finally:
        broker.close()


def test_attach_routes_broker_topics(tmp_path, plant_store):
    broker = Broker()
    try:
        storage = Storage(tmp_path)
        routes = storage.refresh_routes(plant_store)
        assert sorted(routes) == ["hall_a.co2_hall_a", "hall_b.co2_hall_b", "line1.cobot1_torque"]
        storage.attach(broker, plant_store)
        broker.publish("hall_a.co2_hall_a", {"ts": 1, "co2": 400}, event_time=1)
        broker.publish("hall_b.co2_hall_b", {"ts": 2, "CO2_level": 500}, event_time=2)
        broker.publish("line1.cobot1_torque", {"ts": 3, "torque_nm": 50.0}, event_time=3)
        broker.publish("line1.cobot1_thermal", {"ts": 4, "temp_c": 30.0}, event_time=4)

        deadline = time.monotonic() + 5
        while sum(b.writes for b in storage.backends.values()) < 4 and time.monotonic() < deadline:
            time.sleep(0.01)
        storage.close()
        stored = sorted((bid, dataset, table, row["_ts"]) for bid, dataset, table, row in iter_rows(storage))
        assert stored == [
            ("documents", "plant", "co2_hall_b", 2),
            ("relational", "plant", "co2_hall_a", 1),
            ("timeseries", "line1", "torque", 3),
            ("timeseries", "plant", "co2_hall_a", 1),
        ]
    finally:
        broker.close()


def test_retention_compacts_old_partitions(tmp_path):
    storage = Storage(tmp_path, [{"id": "r", "kind": "row-log"}], partition=1000, retention=5500)
    storage.backend("r").append("d", "t", rows(100, 1100, 7000))
    assert storage.compact(now=7000) == {"r": 1}
    assert storage.seal() == 2
