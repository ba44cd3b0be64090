"""In-process publish/subscribe hub.

Topics are created on first publish. Each topic keeps a per-topic sequence and
a bounded ring of recent events; every subscription owns a bounded queue with
a block or drop-oldest overflow policy. Callback subscriptions are drained on
a shared worker pool, one drain at a time per subscription, so callbacks see
events in order.
"""
import json
import logging
import re
import threading
import time
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

from .errors import BadRequestError, OversizeError, PatternError

DLQ_PREFIX = "_dlq."


class Stage(Enum):
    GENERATED = "generated"
    PREPROCESSED = "preprocessed"
    BROKER_IN = "broker-in"
    PIPELINE_IN = "pipeline-in"
    PIPELINE_OUT = "pipeline-out"
    REPUBLISHED = "republished"


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass(slots=True)
class Event:
    topic: str
    event_time: int
    payload: Any
    sequence: int = 0
    ingest_time: int = 0
    # set by key-by operators
    key: Any = None
    # stage name -> time.monotonic_ns()
    stages: dict[str, int] = field(default_factory=dict)

    def stamp(self, stage: Stage, at: int | None = None) -> None:
        self.stages[stage.value] = time.monotonic_ns() if at is None else at

    def to_dict(self) -> dict:
        return {
            "topic": self.topic,
            "event_time": self.event_time,
            "ingest_time": self.ingest_time,
            "sequence": self.sequence,
            "payload": self.payload,
        }


class OverflowPolicy(Enum):
    BLOCK = "block"
    DROP_OLDEST = "drop-oldest"


class Counters:
    """Thread-safe named counters."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: Counter = Counter()

    def add(self, name: str, amount: int = 1) -> None:
        with self._lock:
            self._counts[name] += amount

    def get(self, name: str) -> int:
        with self._lock:
            return self._counts[name]

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)


class Topic:
    def __init__(self, name: str, retain: int):
        self.name = name
        self.lock = threading.Lock()
        self.sequence = 0
        self.retained: deque[Event] = deque(maxlen=retain)
        self.subscribers: list["Subscription"] = []


class Subscription:
    """A consumer handle. Pull with ``poll``/``get`` or pass a callback."""

    def __init__(
        self,
        broker: "Broker",
        topics: Iterable[str],
        pattern: re.Pattern | None,
        queue_size: int,
        policy: OverflowPolicy,
        callback: Callable[[Event], None] | None = None,
    ):
        self.broker = broker
        self.topics: set[str] = set(topics)
        self.pattern = pattern
        self.queue_size = queue_size
        self.policy = policy
        self.callback = callback
        self.closed = False
        self.delivered = 0
        self.dropped = 0
        self._queue: deque[Event] = deque()
        self._cond = threading.Condition()
        self._draining = False

    def matches(self, topic: str) -> bool:
        if topic in self.topics:
            return True
        return self.pattern is not None and self.pattern.fullmatch(topic) is not None

    def offer(self, event: Event) -> None:
        """Enqueue under the caller's topic lock; blocks or drops when full."""
        with self._cond:
            if self.closed:
                return
            while len(self._queue) >= self.queue_size and not self.closed:
                if self.policy is OverflowPolicy.DROP_OLDEST:
                    self._queue.popleft()
                    self.dropped += 1
                    self.broker.counters.add("dropped")
                    break
                self._cond.wait(0.1)
            if self.closed:
                return
            self._queue.append(event)
            self._cond.notify_all()
            schedule = self.callback is not None and not self._draining
            if schedule:
                self._draining = True
        if schedule:
            self.broker._submit(self._drain)

    def _drain(self) -> None:
        while True:
            with self._cond:
                if not self._queue or self.closed:
                    self._draining = False
                    return
                event = self._queue.popleft()
                self.delivered += 1
                self._cond.notify_all()
            self.broker.counters.add("delivered")
            try:
                self.callback(event)
            except Exception:
                logging.exception(f"Subscriber callback failed on {event.topic}#{event.sequence}")

    def get(self, timeout: float | None = None) -> Event | None:
        """Next event, or None after ``timeout`` seconds or when closed."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._queue:
                if self.closed:
                    return None
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)
            event = self._queue.popleft()
            self.delivered += 1
            self._cond.notify_all()
        self.broker.counters.add("delivered")
        return event

    def poll(self, max_events: int | None = None, timeout: float = 0.0) -> list[Event]:
        """Everything queued (up to ``max_events``), waiting up to ``timeout``
        for the first event."""
        first = self.get(timeout)
        if first is None:
            return []
        out = [first]
        with self._cond:
            while self._queue and (max_events is None or len(out) < max_events):
                out.append(self._queue.popleft())
            self.delivered += len(out) - 1
            self._cond.notify_all()
        self.broker.counters.add("delivered", len(out) - 1)
        return out

    def pending(self) -> int:
        with self._cond:
            return len(self._queue)

    def add_topic(self, topic: str) -> None:
        self.topics.add(topic)
        self.broker._attach(self, topic)

    def remove_topic(self, topic: str) -> None:
        self.topics.discard(topic)
        self.broker._detach(self, topic)
        with self._cond:
            self._queue = deque(e for e in self._queue if self.matches(e.topic))
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()
        self.broker._remove(self)

    def __iter__(self):
        while True:
            event = self.get()
            if event is None:
                return
            yield event


class Broker:
    def __init__(
        self,
        queue_size: int = 10000,
        policy: OverflowPolicy | str = OverflowPolicy.BLOCK,
        retain: int = 1000,
        max_payload_bytes: int | None = 65536,
        delivery_workers: int = 4,
    ):
        self.queue_size = queue_size
        self.policy = OverflowPolicy(policy)
        self.retain = retain
        self.max_payload_bytes = max_payload_bytes
        self.counters = Counters()
        self._topics: dict[str, Topic] = {}
        self._subscriptions: list[Subscription] = []
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=delivery_workers, thread_name_prefix="kgstream-delivery")
        self._closed = False

    # -- topics ------------------------------------------------------------

    def topic(self, name: str) -> Topic:
        if not name:
            raise BadRequestError("topic names must be non-empty")
        topic = self._topics.get(name)
        if topic is not None:
            return topic
        with self._lock:
            topic = self._topics.get(name)
            if topic is None:
                topic = Topic(name, self.retain)
                topic.subscribers = [s for s in self._subscriptions if s.matches(name)]
                self._topics[name] = topic
                logging.debug(f"Created topic {name}.")
        return topic

    def topics(self) -> list[str]:
        with self._lock:
            return sorted(self._topics)

    def retained(self, name: str) -> list[Event]:
        topic = self._topics.get(name)
        if topic is None:
            return []
        with topic.lock:
            return list(topic.retained)

    # -- publishing ---------------------------------------------------------

    def _check_size(self, payload: Any) -> None:
        if self.max_payload_bytes is None:
            return
        if isinstance(payload, (bytes, bytearray)):
            size = len(payload)
        elif isinstance(payload, str):
            size = len(payload.encode("utf-8"))
        else:
            size = len(json.dumps(payload, default=str, separators=(",", ":")))
        if size > self.max_payload_bytes:
            self.counters.add("oversize")
            raise OversizeError(f"payload of {size} bytes exceeds the {self.max_payload_bytes} byte limit")

    def publish(self, topic: str, payload: Any, event_time: int | None = None) -> int:
        """Append an event and fan it out; returns its sequence number."""
        now = now_ms()
        event = Event(topic=topic, event_time=now if event_time is None else int(event_time), payload=payload, ingest_time=now)
        return self.publish_event(event).sequence

    def publish_event(self, event: Event) -> Event:
        """Publish a prepared event, keeping its stage stamps."""
        if self._closed:
            raise BadRequestError("broker is closed")
        self._check_size(event.payload)
        topic = self.topic(event.topic)
        if not event.ingest_time:
            event.ingest_time = now_ms()
        with topic.lock:
            topic.sequence += 1
            event.sequence = topic.sequence
            if Stage.BROKER_IN.value not in event.stages:
                event.stamp(Stage.BROKER_IN)
            topic.retained.append(event)
            for sub in topic.subscribers:
                sub.offer(event)
        self.counters.add("published")
        return event

    def dead_letter(self, topic: str, payload: Any, reason: str, **details) -> int:
        document = {"topic": topic, "reason": reason, "payload": payload}
        document.update(details)
        self.counters.add("dead_lettered")
        logging.warning(f"Dead-lettered message for {topic}: {reason}")
        now = now_ms()
        event = Event(topic=DLQ_PREFIX + topic, event_time=now, payload=document, ingest_time=now)
        topic_obj = self.topic(event.topic)
        with topic_obj.lock:
            topic_obj.sequence += 1
            event.sequence = topic_obj.sequence
            topic_obj.retained.append(event)
            for sub in topic_obj.subscribers:
                sub.offer(event)
        return event.sequence

    # -- subscribing --------------------------------------------------------

    def subscribe(
        self,
        topics: Iterable[str] | str = (),
        pattern: str | None = None,
        callback: Callable[[Event], None] | None = None,
        queue_size: int | None = None,
        policy: OverflowPolicy | str | None = None,
    ) -> Subscription:
        if isinstance(topics, str):
            topics = [topics]
        compiled = None
        if pattern is not None:
            try:
                compiled = re.compile(pattern)
            except re.error as e:
                raise PatternError(f"invalid topic pattern {pattern!r}: {e}") from e
        sub = Subscription(
            self,
            topics,
            compiled,
            queue_size or self.queue_size,
            OverflowPolicy(policy) if policy is not None else self.policy,
            callback,
        )
        with self._lock:
            self._subscriptions.append(sub)
            for topic in self._topics.values():
                if sub.matches(topic.name):
                    with topic.lock:
                        topic.subscribers = topic.subscribers + [sub]
        return sub

    def _attach(self, sub: Subscription, name: str) -> None:
        topic = self.topic(name)
        with topic.lock:
            if sub not in topic.subscribers:
                topic.subscribers = topic.subscribers + [sub]

    def _detach(self, sub: Subscription, name: str) -> None:
        topic = self._topics.get(name)
        if topic is None or sub.matches(name):
            return
        with topic.lock:
            topic.subscribers = [s for s in topic.subscribers if s is not sub]

    def _remove(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subscriptions:
                self._subscriptions.remove(sub)
            topics = list(self._topics.values())
        for topic in topics:
            with topic.lock:
                if sub in topic.subscribers:
                    topic.subscribers = [s for s in topic.subscribers if s is not sub]

    def _submit(self, fn: Callable[[], None]) -> None:
        if self._closed:
            return
        self._pool.submit(fn)

    # -- lifecycle ----------------------------------------------------------

    def stats(self) -> dict[str, Any]:
        counts = self.counters.snapshot()
        with self._lock:
            topics = {name: t.sequence for name, t in self._topics.items()}
            subscriptions = len(self._subscriptions)
        return {
            "published": counts.get("published", 0),
            "delivered": counts.get("delivered", 0),
            "dropped": counts.get("dropped", 0),
            "dead_lettered": counts.get("dead_lettered", 0),
            "oversize": counts.get("oversize", 0),
            "event_time_fallbacks": counts.get("event_time_fallbacks", 0),
            "policy": self.policy.value,
            "subscriptions": subscriptions,
            "topics": topics,
        }

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        with self._lock:
            subs = list(self._subscriptions)
        for sub in subs:
            sub.close()
        self._pool.shutdown(wait=True)
        logging.info("Broker closed.")
