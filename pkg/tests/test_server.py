import threading
import time

import pytest

from kgstream.config import parse_config
from kgstream.errors import (
    AccessDeniedError,
    AuthFailedError,
    BadRequestError,
    NotFoundError,
    ServiceForbiddenError,
)
from kgstream.gateway import CredentialStore
from kgstream.server import METADATA_FILE, Services, serve
from kgstream.server_utils import (
    Client,
    create_socket_and_send_request,
    get_active_server,
    ping_server,
    stop_server,
)

from conftest import at
from test_cli import HIGH_CO2


def eventually(check, timeout: float = 10.0, poll: float = 0.05):
    deadline = time.monotonic() + timeout
    while True:
        value = check()
        if value or time.monotonic() > deadline:
            return value
        time.sleep(poll)


@pytest.fixture
def server(tmp_path, monkeypatch, plant_fixture, plant_store):
    monkeypatch.chdir(tmp_path)
    config = parse_config({"data_dir": str(tmp_path / "data")})
    CredentialStore(config.credentials_file).update(plant_fixture.credentials)
    services = Services(config, store=plant_store)
    ready = threading.Event()
    thread = threading.Thread(target=serve, args=(config, services, ready), daemon=True)
    thread.start()
    assert ready.wait(10)
    host, port = get_active_server()
    yield services, port
    if get_active_server() is not None:
        stop_server(port, host)
    thread.join(10)


def client(port: int, agent: str) -> Client:
    c = Client(port)
    c.login(agent, f"{agent}-secret")
    return c


def reading(seq: int, co2: float) -> dict:
    return {"ts": at("10:00:00") + seq * 1000, "co2": co2}


def test_ping_and_unknown_requests(server):
    _, port = server
    assert ping_server(port)
    with pytest.raises(BadRequestError, match="Invalid message type"):
        create_socket_and_send_request(port, {}, "teleport")


def test_login_failures_are_reported(server):
    _, port = server
    with pytest.raises(AuthFailedError):
        Client(port).login("hank", "guess")
    with pytest.raises(AuthFailedError):
        Client(port, token="forged").request("query", sensor="co2_hall_a")


def test_publish_then_query(server):
    services, port = server
    bob, hank = client(port, "bob"), client(port, "hank")
    published = bob.request("publish", source="co2_hall_a", messages=[reading(i, 400 + i) for i in range(5)])
    assert published == {"ingested": 5, "dead_lettered": 0}

    def stored():
        result = hank.request("query", sensor="co2_hall_a")
        return result if len(result["rows"]) == 5 else None

    result = eventually(stored)
    assert result is not None
    assert [r["carbon_dioxide"] for r in result["rows"]] == [400, 401, 402, 403, 404]
    assert result["columns"] == ["stream", "event_time", "carbon_dioxide"]

    failed = bob.request("publish", source="co2_hall_a", messages=["not json"])
    assert failed == {"ingested": 0, "dead_lettered": 1}


def test_query_access_and_services(server):
    _, port = server
    anne, hank = client(port, "anne"), client(port, "hank")
    with pytest.raises(AccessDeniedError):
        anne.request("query", sensor="co2_hall_a")
    with pytest.raises(NotFoundError):
        hank.request("query", sensor="nowhere")
    with pytest.raises(ServiceForbiddenError):
        hank.request("stats")
    with pytest.raises(ServiceForbiddenError):
        hank.request("publish", source="co2_hall_a", messages=[])


def test_monitor_streams_canonical_events(server):
    _, port = server
    hank, bob = client(port, "hank"), client(port, "bob")
    received = []

    def watch():
        received.extend(hank.monitor([{"Sensor": ["co2_hall_a"]}], limit=2))

    watcher = threading.Thread(target=watch, daemon=True)
    watcher.start()
    seq = 0
    while watcher.is_alive() and seq < 200:
        bob.request("publish", source="co2_hall_a", messages=[reading(seq, 600)])
        seq += 1
        watcher.join(0.05)
    assert not watcher.is_alive()

    feed, *events = received
    assert feed["type"] == "feed"
    assert [e["type"] for e in events] == ["event", "event"]
    assert events[0]["message"]["fields"]["carbon_dioxide"] == 600
    assert events[0]["message"]["topic"] == "hall_a.co2_hall_a"


def test_pipeline_lifecycle(server, tmp_path):
    services, port = server
    bob = client(port, "bob")
    started = bob.request("pipeline", action="deploy", spec=HIGH_CO2)
    assert started["emitted"] == 0
    assert (tmp_path / "data" / "pipelines" / "high_co2.yaml").is_file()
    assert bob.request("pipeline", action="list") == ["high_co2"]
    with pytest.raises(BadRequestError, match="already running"):
        bob.request("pipeline", action="deploy", spec=HIGH_CO2)

    bob.request("publish", source="co2_hall_a", messages=[reading(1, 450), reading(2, 650)])
    assert eventually(lambda: bob.request("stats")["pipelines"]["high_co2"]["emitted"] == 1)

    stats = bob.request("stats")
    assert stats["graph"]["asserted"] > 0
    assert "timeseries" in str(stats["storage"])

    stopped = bob.request("pipeline", action="stop", pipeline="high_co2")
    assert stopped["processed"]["src"] == 2
    with pytest.raises(NotFoundError):
        bob.request("pipeline", action="stop", pipeline="high_co2")
    with pytest.raises(BadRequestError):
        bob.request("pipeline", action="promote")


def test_shutdown_saves_the_graph(server, tmp_path):
    _, port = server
    stop_server(port)
    assert eventually(lambda: not METADATA_FILE.exists())
    assert eventually(lambda: (tmp_path / "data" / "graph.nt").is_file())
    assert get_active_server() is None
