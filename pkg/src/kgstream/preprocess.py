"""Ingestion: raw device messages are run through a preprocessing chain,
checked against the source schema, stamped with an event time and republished
on the topic the gathering graph declares for the source."""
import json
import logging
import random
import string
import time
from typing import Any, Callable, Iterable, Iterator, Mapping

from .broker import Broker, Event, Stage, now_ms
from .errors import BadRequestError, SchemaMismatchError
from .graphs import MISSING, StreamSourceDescriptor, extract_sources, get_path, stream_fields
from .kg import GraphStore
from .units import parse_timestamp

Preprocessor = Callable[[Any], Any]


def _identity(raw: Any) -> Any:
    return raw


def _json(raw: Any) -> Any:
    if isinstance(raw, (bytes, bytearray)):
        raw = raw.decode("utf-8")
    if isinstance(raw, str):
        return json.loads(raw)
    return raw


PREPROCESSORS: dict[str, Preprocessor] = {
    "identity": _identity,
    "json": _json,
}


def register_preprocessor(name: str, fn: Preprocessor) -> None:
    """Make ``fn`` selectable through a source's ``preprocess`` metadata."""
    PREPROCESSORS[name] = fn


def preprocessing_chain(source: StreamSourceDescriptor) -> list[Preprocessor]:
    names = [n.strip() for n in source.metadata.get("preprocess", "json").split(",") if n.strip()]
    try:
        return [PREPROCESSORS[n] for n in names]
    except KeyError as e:
        raise BadRequestError(f"source {source.id} selects unknown preprocessor {e.args[0]}") from None


class Ingestor:
    """Turns raw messages of registered sources into broker events."""

    def __init__(self, broker: Broker, sources: Iterable[StreamSourceDescriptor] = (), clock: Callable[[], int] = now_ms):
        self.broker = broker
        self.clock = clock
        self._sources: dict[str, StreamSourceDescriptor] = {}
        self._paths: dict[str, dict[str, str]] = {}
        self._warned: set[str] = set()
        for source in sources:
            self.register(source)

    @classmethod
    def from_store(cls, broker: Broker, store: GraphStore, **kwargs) -> "Ingestor":
        ingestor = cls(broker, **kwargs)
        for source in extract_sources(store):
            paths = {f.name: f.path for f in stream_fields(store, source.stream)}
            ingestor.register(source, paths)
        return ingestor

    def register(self, source: StreamSourceDescriptor, paths: Mapping[str, str] | None = None) -> None:
        self._sources[source.id] = source
        self._paths[source.id] = {name: (paths or {}).get(name, name) for name in source.schema}

    def source(self, source_id: str) -> StreamSourceDescriptor:
        try:
            return self._sources[source_id]
        except KeyError:
            raise BadRequestError(f"source {source_id} is not registered") from None

    def ingest(self, raw: Any, source: StreamSourceDescriptor | str, generated_at: int | None = None) -> Event:
        if isinstance(source, str):
            source = self.source(source)
        elif source.id not in self._sources:
            self.register(source)
        event = Event(topic=source.topic, event_time=0, payload=None)
        if generated_at is not None:
            event.stamp(Stage.GENERATED, generated_at)

        payload = raw
        try:
            for step in preprocessing_chain(source):
                payload = step(payload)
        except (ValueError, UnicodeDecodeError) as e:
            self.broker.dead_letter(source.topic, _printable(raw), f"preprocessing failed: {e}", source=source.id)
            raise SchemaMismatchError(f"message for {source.id} could not be preprocessed: {e}") from e
        if not isinstance(payload, Mapping):
            self.broker.dead_letter(source.topic, _printable(raw), "payload is not a document", source=source.id)
            raise SchemaMismatchError(f"message for {source.id} is not a document")

        paths = self._paths[source.id]
        missing = [name for name, path in paths.items() if get_path(payload, path) is MISSING]
        if missing:
            reason = f"missing declared field(s) {', '.join(missing)}"
            self.broker.dead_letter(source.topic, dict(payload), reason, source=source.id)
            raise SchemaMismatchError(f"message for {source.id} is {reason}")

        ingest_time = self.clock()
        event.payload = dict(payload)
        event.ingest_time = ingest_time
        event.event_time = self._event_time(source, payload, ingest_time)
        event.stamp(Stage.PREPROCESSED)
        return self.broker.publish_event(event)

    def _event_time(self, source: StreamSourceDescriptor, payload: Mapping, ingest_time: int) -> int:
        field_name = source.time_field
        if field_name is not None:
            value = get_path(payload, self._paths[source.id].get(field_name, field_name))
            if value is not MISSING:
                try:
                    return parse_timestamp(value)
                except ValueError:
                    pass
        self.broker.counters.add("event_time_fallbacks")
        if source.id not in self._warned:
            self._warned.add(source.id)
            logging.warning(f"Source {source.id}: no usable event time, using the ingest clock.")
        return ingest_time

    def ingest_lines(self, lines: Iterable[str], source: StreamSourceDescriptor | str) -> tuple[int, int]:
        """Ingest newline-delimited JSON; returns (ingested, dead-lettered)."""
        ok = failed = 0
        for line in lines:
            if not line.strip():
                continue
            try:
                self.ingest(line, source)
                ok += 1
            except SchemaMismatchError:
                failed += 1
        return ok, failed


def _printable(raw: Any) -> Any:
    if isinstance(raw, (bytes, bytearray)):
        return raw.decode("utf-8", errors="replace")
    return raw


class SyntheticGenerator:
    """Raw JSON messages for one source at a target rate.

    Numeric fields get random values, the time field gets the generation
    clock and a filler field pads each message to roughly ``message_bytes``.
    """

    def __init__(
        self,
        schema: Iterable[str],
        rate: float,
        duration: float,
        time_field: str = "ts",
        message_bytes: int = 125,
        seed: int = 0,
        clock: Callable[[], int] = now_ms,
    ):
        if rate <= 0 or duration <= 0:
            raise ValueError("rate and duration must be positive")
        self.schema = [f for f in schema if f != time_field]
        self.rate = rate
        self.duration = duration
        self.time_field = time_field
        self.message_bytes = message_bytes
        self.clock = clock
        self._random = random.Random(seed)

    @property
    def total(self) -> int:
        return int(round(self.rate * self.duration))

    def message(self, index: int) -> str:
        doc: dict[str, Any] = {self.time_field: self.clock()}
        for name in self.schema:
            doc[name] = round(self._random.uniform(0, 1000), 3)
        doc["seq"] = index
        text = json.dumps(doc, separators=(",", ":"))
        room = self.message_bytes - len(text) - len(',"pad":""')
        if room > 0:
            doc["pad"] = "".join(self._random.choices(string.ascii_lowercase, k=room))
            text = json.dumps(doc, separators=(",", ":"))
        return text

    def messages(self) -> Iterator[str]:
        """All messages, unpaced."""
        for i in range(self.total):
            yield self.message(i)

    def run(self, sink: Callable[[str, int], None], stop: Callable[[], bool] | None = None) -> int:
        """Call ``sink(message, generated_at_ns)`` on an absolute schedule of
        ``1/rate`` seconds; returns the number of messages sent."""
        start = time.monotonic()
        sent = 0
        for i in range(self.total):
            if stop is not None and stop():
                break
            due = start + i / self.rate
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            sink(self.message(i), time.monotonic_ns())
            sent += 1
        return sent
