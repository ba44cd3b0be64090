import pytest

from kgstream.broker import DLQ_PREFIX, Broker, Stage
from kgstream.errors import BadRequestError, SchemaMismatchError
from kgstream.graphs import SourceType, StreamSourceDescriptor
from kgstream.preprocess import PREPROCESSORS, Ingestor, SyntheticGenerator, preprocessing_chain, register_preprocessor


@pytest.fixture
def broker():
    b = Broker()
    yield b
    b.close()


@pytest.fixture
def ingestor(broker, plant_store):
    return Ingestor.from_store(broker, plant_store, clock=lambda: 999)


def test_ingest_publishes_on_the_declared_topic(broker, ingestor):
    sub = broker.subscribe(["hall_a.co2_hall_a"])
    ingestor.ingest(b'{"ts": 5, "co2": 412.5}', "co2_hall_a", generated_at=1)
    event = sub.get(timeout=1)
    assert event.payload == {"ts": 5, "co2": 412.5}
    assert (event.event_time, event.ingest_time, event.sequence) == (5, 999, 1)
    assert event.stages[Stage.GENERATED.value] == 1
    assert Stage.PREPROCESSED.value in event.stages


def test_iso_event_times(ingestor):
    event = ingestor.ingest('{"ts": "1970-01-01T00:00:01", "co2": 1}', "co2_hall_a")
    assert event.event_time == 1000


def test_unusable_event_time_falls_back_to_the_ingest_clock(broker, ingestor):
    event = ingestor.ingest('{"ts": "yesterday", "co2": 1}', "co2_hall_a")
    assert event.event_time == 999
    ingestor.ingest('{"ts": "later", "co2": 2}', "co2_hall_a")
    assert broker.stats()["event_time_fallbacks"] == 2


@pytest.mark.parametrize(
    "raw,reason",
    [
        ('{"ts": 1}', "missing declared field(s) co2"),
        ("{not json", "preprocessing failed"),
        ("[1, 2]", "payload is not a document"),
    ],
)
def test_bad_messages_are_dead_lettered(broker, ingestor, raw, reason):
    dlq = broker.subscribe([DLQ_PREFIX + "hall_a.co2_hall_a"])
    with pytest.raises(SchemaMismatchError):
        ingestor.ingest(raw, "co2_hall_a")
    letter = dlq.get(timeout=1).payload
    assert letter["reason"].startswith(reason)
    assert letter["source"] == "co2_hall_a"
    assert "hall_a.co2_hall_a" not in broker.stats()["topics"]


def test_ingest_lines(ingestor):
    lines = ['{"ts": 1, "co2": 400}', "", '{"ts": 2}', '{"ts": 3, "co2": 410}']
    assert ingestor.ingest_lines(lines, "co2_hall_a") == (2, 1)


def test_unknown_sources_and_preprocessors(ingestor, monkeypatch):
    with pytest.raises(BadRequestError, match="not registered"):
        ingestor.ingest("{}", "ghost")
    source = StreamSourceDescriptor("vib", SourceType.WEARABLE, ["ts", "g"], "line1", {"preprocess": "json, halve"})
    with pytest.raises(BadRequestError, match="unknown preprocessor halve"):
        preprocessing_chain(source)

    monkeypatch.setattr("kgstream.preprocess.PREPROCESSORS", dict(PREPROCESSORS))
    register_preprocessor("halve", lambda doc: {**doc, "g": doc["g"] / 2})
    event = ingestor.ingest('{"ts": 10, "g": 3}', source)
    assert event.topic == "line1.vib"
    assert event.payload == {"ts": 10, "g": 1.5}
    # no time_field in the metadata
    assert event.event_time == 999


def test_synthetic_messages():
    generator = SyntheticGenerator(["ts", "co2"], rate=100, duration=0.5, message_bytes=125, seed=4, clock=lambda: 7)
    messages = list(generator.messages())
    assert generator.total == len(messages) == 50
    assert all(len(m) == 125 for m in messages)
    again = SyntheticGenerator(["ts", "co2"], rate=100, duration=0.5, seed=4, clock=lambda: 7)
    assert list(again.messages()) == messages
    assert '"ts":7' in messages[0] and '"seq":0' in messages[0]
    with pytest.raises(ValueError):
        SyntheticGenerator(["x"], rate=0, duration=1)


def test_synthetic_run_paces_and_stops():
    sent = []
    generator = SyntheticGenerator(["v"], rate=1000, duration=0.02)
    assert generator.run(lambda message, at: sent.append(at)) == 20
    assert sent == sorted(sent)
    stopped = SyntheticGenerator(["v"], rate=1000, duration=0.02)
    assert stopped.run(lambda m, at: None, stop=lambda: True) == 0
