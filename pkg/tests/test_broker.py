import threading
import time

import pytest

from kgstream.broker import DLQ_PREFIX, Broker, Event, OverflowPolicy, Stage
from kgstream.errors import BadRequestError, OversizeError, PatternError


@pytest.fixture
def broker():
    b = Broker(queue_size=100, retain=5)
    yield b
    b.close()


def test_sequences_are_per_topic(broker):
    assert broker.publish("a", {"x": 1}) == 1
    assert broker.publish("a", {"x": 2}) == 2
    assert broker.publish("b", {"x": 3}) == 1
    assert broker.topics() == ["a", "b"]
    assert broker.stats()["topics"] == {"a": 2, "b": 1}


def test_subscribers_see_events_in_order(broker):
    sub = broker.subscribe(["a"])
    for i in range(20):
        broker.publish("a", {"i": i}, event_time=i)
    events = sub.poll()
    assert [e.payload["i"] for e in events] == list(range(20))
    assert [e.sequence for e in events] == list(range(1, 21))
    assert all(Stage.BROKER_IN.value in e.stages for e in events)
    assert sub.get(timeout=0.01) is None


def test_pattern_subscription_picks_up_new_topics(broker):
    sub = broker.subscribe(pattern=r"hall_a\..*")
    broker.publish("hall_a.co2", 1)
    broker.publish("hall_b.co2", 2)
    broker.publish("hall_a.temp", 3)
    assert [e.topic for e in sub.poll()] == ["hall_a.co2", "hall_a.temp"]


def test_bad_pattern(broker):
    with pytest.raises(PatternError):
        broker.subscribe(pattern="(")


def test_add_and_remove_topics(broker):
    sub = broker.subscribe(["a"])
    broker.publish("a", 1)
    broker.publish("b", 2)
    sub.add_topic("b")
    broker.publish("b", 3)
    sub.remove_topic("a")
    broker.publish("a", 4)
    assert [e.payload for e in sub.poll()] == [3]
    assert sub.pending() == 0


def test_drop_oldest_counts_drops(broker):
    sub = broker.subscribe(["a"], queue_size=3, policy=OverflowPolicy.DROP_OLDEST)
    for i in range(5):
        broker.publish("a", i)
    assert [e.payload for e in sub.poll()] == [2, 3, 4]
    assert sub.dropped == 2
    assert broker.stats()["dropped"] == 2


def test_block_waits_for_the_consumer(broker):
    sub = broker.subscribe(["a"], queue_size=2, policy="block")

    def produce():
        for i in range(6):
            broker.publish("a", i)

    producer = threading.Thread(target=produce)
    producer.start()
    received = []
    while len(received) < 6:
        event = sub.get(timeout=2)
        assert event is not None
        received.append(event.payload)
    producer.join(2)
    assert received == list(range(6))
    assert broker.stats()["dropped"] == 0


def test_callbacks_run_in_order(broker):
    seen = []
    done = threading.Event()

    def on_event(event: Event):
        seen.append(event.payload)
        if len(seen) == 50:
            done.set()

    broker.subscribe(["a"], callback=on_event)
    for i in range(50):
        broker.publish("a", i)
    assert done.wait(5)
    assert seen == list(range(50))


def test_concurrent_consumers_count_every_delivery():
    broker = Broker(queue_size=5000)
    sub = broker.subscribe(["a"])
    for i in range(4000):
        broker.publish("a", i)

    def consume():
        while sub.get(timeout=0.2) is not None:
            pass

    workers = [threading.Thread(target=consume) for _ in range(8)]
    for w in workers:
        w.start()
    for w in workers:
        w.join(10)
    assert sub.delivered == 4000
    assert broker.stats()["delivered"] == 4000
    broker.close()


def test_oversize_payloads_are_rejected():
    broker = Broker(max_payload_bytes=16)
    try:
        with pytest.raises(OversizeError):
            broker.publish("a", {"text": "x" * 32})
        assert broker.publish("a", {"x": 1}) == 1
        assert broker.stats()["oversize"] == 1
    finally:
        broker.close()


def test_retention_and_dead_letters(broker):
    for i in range(8):
        broker.publish("a", i)
    assert [e.payload for e in broker.retained("a")] == [3, 4, 5, 6, 7]
    dlq = broker.subscribe([DLQ_PREFIX + "a"])
    broker.dead_letter("a", {"bad": True}, "schema-mismatch", field="co2")
    event = dlq.get(timeout=1)
    assert event.payload == {"topic": "a", "reason": "schema-mismatch", "payload": {"bad": True}, "field": "co2"}
    assert broker.stats()["dead_lettered"] == 1


def test_close_releases_waiting_consumers():
    broker = Broker()
    sub = broker.subscribe(["a"])
    result = []
    waiter = threading.Thread(target=lambda: result.append(sub.get()))
    waiter.start()
    time.sleep(0.05)
    broker.close()
    waiter.join(2)
    assert result == [None]
    with pytest.raises(BadRequestError):
        broker.publish("a", 1)
