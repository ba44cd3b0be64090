"""Semantic monitoring: constraint-based stream discovery, access filtering and
per-client event feeds.

A request is a conjunctive list of constraints; each constraint names one or
more of ``Property``, ``Site`` and ``Sensor`` with a list of ids whose entries
are alternatives. Matching streams the agent may read are subscribed on the
broker and delivered as feed records with canonical field names.
"""
import itertools
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping

from .access import AgentContext, accessible_many, load_context
from .broker import Broker, Event, OverflowPolicy, Subscription
from .errors import BadRequestError, KGStreamError, ServiceError, UnknownResourceError
from .graphs import (
    A,
    BOT,
    IOE,
    PROV,
    SG,
    SOSA,
    canonicalize,
    data_iri,
    extract_monitoring_specs,
    stream_fields,
    stream_id,
)
from .kg import GraphStore, Term, term_key

CONSTRAINT_KEYS = ("Property", "Site", "Sensor")


@dataclass
class MonitoringRequest:
    constraints: list[dict[str, list[str]]]
    token: str | None = None

    @classmethod
    def from_document(cls, document: Mapping) -> "MonitoringRequest":
        raw = document.get("constraints")
        if not isinstance(raw, list) or not raw:
            raise BadRequestError("a monitoring request needs at least one constraint")
        constraints = []
        for item in raw:
            if not isinstance(item, Mapping) or not item:
                raise BadRequestError("each constraint must map Property, Site or Sensor to ids")
            unknown = set(item) - set(CONSTRAINT_KEYS)
            if unknown:
                raise BadRequestError(f"unknown constraint key(s): {', '.join(sorted(unknown))}")
            constraints.append({k: [str(v) for v in (item[k] if isinstance(item[k], list) else [item[k]])] for k in item})
        return cls(constraints=constraints, token=document.get("token"))


def _sites_within(store: GraphStore, site: Term) -> set[Term]:
    out = {site}
    stack = [site]
    while stack:
        for child in store.objects(stack.pop(), BOT.containsZone):
            if child not in out:
                out.add(child)
                stack.append(child)
    return out


def _properties_of(store: GraphStore, sensor: Term, stream: Term) -> set[Term]:
    props = set(store.objects(sensor, SOSA.observes))
    schema = store.value(stream, SG.hasSchema)
    if schema is not None:
        for f in store.objects(schema, SG.hasField):
            props.update(store.objects(f, SG.hasProperty))
    return props


def _require(store: GraphStore, term: Term, cls: Term | None, what: str) -> None:
    if cls is not None and store.triples(term, A, cls):
        return
    if cls is None and store.has_resource(term):
        return
    raise UnknownResourceError(f"unknown {what} {term.value}")


def candidate_streams(request: MonitoringRequest, store: GraphStore) -> set[tuple[Term, str]]:
    """Streams matching every constraint, before access filtering."""
    resolved = []
    for constraint in request.constraints:
        props = [data_iri(p) for p in constraint.get("Property", [])]
        sites = [data_iri(s) for s in constraint.get("Site", [])]
        sensors = [data_iri(s) for s in constraint.get("Sensor", [])]
        for p in props:
            _require(store, p, SOSA.Property, "property")
        for s in sites:
            _require(store, s, None, "site")
        for s in sensors:
            _require(store, s, IOE.System, "sensor")
        zones = set().union(*(_sites_within(store, s) for s in sites)) if sites else None
        resolved.append((set(props), zones, set(sensors)))

    out = set()
    for t in store.triples(None, PROV.wasAttributedTo, None):
        stream, sensor = t.subject, t.object
        topic = store.value(stream, SG.topic)
        if topic is None:
            continue
        provided = None
        located = None
        matches = True
        for props, zones, sensors in resolved:
            if sensors and sensor not in sensors:
                matches = False
            if matches and props:
                provided = _properties_of(store, sensor, stream) if provided is None else provided
                if not provided & props:
                    matches = False
            if matches and zones is not None:
                located = set(store.objects(sensor, IOE.isLocatedIn)) if located is None else located
                if not located & zones:
                    matches = False
            if not matches:
                break
        if matches:
            out.add((stream, str(topic)))
    return out


def resolve(request: MonitoringRequest, ctx: AgentContext, store: GraphStore) -> set[tuple[Term, str]]:
    """Streams matching the request that ``ctx`` may read, with their topics."""
    with store.lock.read():
        candidates = candidate_streams(request, store)
        if not candidates:
            return set()
        decisions = accessible_many(ctx, sorted({s for s, _ in candidates}, key=term_key), store)
    return {(s, topic) for s, topic in candidates if decisions[s].granted}


def next_boundary(store: GraphStore, agent: Term, now: int) -> int | None:
    """Earliest collaboration start or end after ``now`` for ``agent``."""
    times = []
    for c in store.subjects(IOE.toAgent, agent):
        for prop in (IOE.startTime, IOE.endTime):
            value = store.value(c, prop)
            if value is not None and int(value.value) > now:
                times.append(int(value.value))
    return min(times) if times else None


_feed_ids = itertools.count(1)


class Feed:
    """A monitoring subscription: the matched streams and a bounded record
    queue. Records are dictionaries of ``type`` event, notice or
    auth-expired."""

    def __init__(
        self,
        request: MonitoringRequest,
        ctx: AgentContext,
        store: GraphStore,
        queue_size: int = 10000,
        received_at: float | None = None,
    ):
        self.id = f"feed-{next(_feed_ids)}"
        self.request = request
        self.ctx = ctx
        self.agent = ctx.agent
        self.store = store
        self.queue_size = queue_size
        self.received_at = time.monotonic() if received_at is None else received_at
        self.streams: set[tuple[Term, str]] = set()
        self.epoch = store.epoch
        self.version = store.version
        self.boundary: int | None = None
        self.resolve_ms = 0.0
        self.first_event_ms: float | None = None
        self.dropped = 0
        self.closed = False
        self.subscription: Subscription | None = None
        self._records: deque[dict] = deque()
        self._cond = threading.Condition()
        self._lock = threading.Lock()
        self._by_topic: dict[str, Term] = {}
        self._fields: dict[Term, tuple[list, set[str] | None]] = {}

    # -- records ----------------------------------------------------------------

    def push(self, record: dict) -> None:
        with self._cond:
            if len(self._records) >= self.queue_size:
                self._records.popleft()
                self.dropped += 1
            self._records.append(record)
            self._cond.notify_all()

    def next(self, timeout: float | None = None) -> dict | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._records:
                if self.closed:
                    return None
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)
            return self._records.popleft()

    def drain(self) -> list[dict]:
        with self._cond:
            out = list(self._records)
            self._records.clear()
            return out

    def __iter__(self) -> Iterator[dict]:
        while True:
            record = self.next()
            if record is None:
                return
            yield record

    # -- events -----------------------------------------------------------------

    def _layout(self, stream: Term) -> tuple[list, set[str] | None]:
        layout = self._fields.get(stream)
        if layout is None:
            sid = stream_id(stream)
            selected = [set(s.fields) for s in extract_monitoring_specs(self.store) if s.stream == sid]
            layout = (stream_fields(self.store, stream), set().union(*selected) if selected else None)
            self._fields[stream] = layout
        return layout

    def on_event(self, event: Event) -> None:
        with self._lock:
            stream = self._by_topic.get(event.topic)
        if stream is None or self.closed:
            return
        fields, selected = self._layout(stream)
        payload = event.payload if isinstance(event.payload, Mapping) else {"value": event.payload}
        if selected is not None:
            fields = [f for f in fields if f.name in selected]
            roots = {f.path.split(".")[0] for f in fields}
            payload = {k: v for k, v in payload.items() if k in roots}
        doc, unmapped = canonicalize(payload, fields)
        if self.first_event_ms is None:
            self.first_event_ms = (time.monotonic() - self.received_at) * 1000
        self.push(
            {
                "type": "event",
                "stream": stream.value,
                "topic": event.topic,
                "event_time": event.event_time,
                "fields": doc,
                "unmapped": unmapped,
            }
        )

    def set_streams(self, streams: set[tuple[Term, str]]) -> tuple[set, set]:
        with self._lock:
            removed = self.streams - streams
            added = streams - self.streams
            self.streams = set(streams)
            self._by_topic = {topic: s for s, topic in streams}
        return removed, added

    def close(self, reason: str | None = None) -> None:
        if reason is not None:
            self.push({"type": reason})
        if self.subscription is not None:
            self.subscription.close()
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def describe(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "agent": self.agent.value,
            "streams": sorted(s.value for s, _ in self.streams),
            "topics": sorted(t for _, t in self.streams),
            "resolve_ms": round(self.resolve_ms, 3),
        }


def open_feed(
    request: MonitoringRequest,
    ctx: AgentContext,
    broker: Broker,
    store: GraphStore,
    queue_size: int = 10000,
    received_at: float | None = None,
) -> Feed:
    feed = Feed(request, ctx, store, queue_size, received_at)
    started = time.monotonic()
    streams = resolve(request, ctx, store)
    feed.resolve_ms = (time.monotonic() - started) * 1000
    feed.set_streams(streams)
    feed.boundary = next_boundary(store, ctx.agent, ctx.now)
    try:
        feed.subscription = broker.subscribe(
            sorted({t for _, t in streams}),
            callback=feed.on_event,
            queue_size=queue_size,
            policy=OverflowPolicy.DROP_OLDEST,
        )
    except KGStreamError:
        raise
    except Exception as e:
        raise ServiceError(f"broker unavailable: {e}") from e
    logging.info(f"Opened {feed.id} for {ctx.agent.value}: {len(streams)} stream(s) in {feed.resolve_ms:.2f} ms.")
    return feed


def revalidate(feed: Feed, store: GraphStore, now: int | None = None) -> Feed:
    """Re-resolve after a graph change or a collaboration boundary; dropped
    streams are unsubscribed and announced with a notice record."""
    now = int(time.time() * 1000) if now is None else now
    changed = store.epoch != feed.epoch or store.version != feed.version
    crossed = feed.boundary is not None and now >= feed.boundary
    if not (changed or crossed) or feed.closed:
        return feed
    if store.has_resource(feed.agent):
        ctx = load_context(feed.agent, store, now)
    else:
        ctx = AgentContext(feed.agent, feed.ctx.role, feed.ctx.location, feed.ctx.activity, now)
    streams = resolve(feed.request, ctx, store)
    feed.ctx = ctx
    feed.epoch, feed.version = store.epoch, store.version
    feed.boundary = next_boundary(store, feed.agent, now)
    feed._fields.clear()
    removed, added = feed.set_streams(streams)
    if feed.subscription is not None:
        keep = {t for _, t in streams}
        for _, topic in removed:
            if topic not in keep:
                feed.subscription.remove_topic(topic)
        for _, topic in added:
            feed.subscription.add_topic(topic)
    if removed or added:
        feed.push(
            {
                "type": "notice",
                "removed": sorted(s.value for s, _ in removed),
                "added": sorted(s.value for s, _ in added),
            }
        )
        logging.info(f"Revalidated {feed.id}: -{len(removed)} +{len(added)} stream(s).")
    return feed


class MonitoringService:
    """Owns open feeds and revalidates them on a polling thread.

    ``token_valid`` is asked on every pass whether a feed's token still holds;
    feeds whose token lapsed are closed with an auth-expired record.
    """

    def __init__(
        self,
        broker: Broker,
        store: GraphStore,
        interval: float = 1.0,
        queue_size: int = 10000,
        token_valid: Callable[[str], bool] | None = None,
        clock: Callable[[], int] | None = None,
    ):
        self.broker = broker
        self.store = store
        self.interval = interval
        self.queue_size = queue_size
        self.token_valid = token_valid
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.feeds: dict[str, Feed] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def open(self, request: MonitoringRequest, ctx: AgentContext, received_at: float | None = None) -> Feed:
        feed = open_feed(request, ctx, self.broker, self.store, self.queue_size, received_at)
        with self._lock:
            self.feeds[feed.id] = feed
        return feed

    def close(self, feed_id: str) -> None:
        with self._lock:
            feed = self.feeds.pop(feed_id, None)
        if feed is not None:
            feed.close()

    def check(self) -> None:
        """One revalidation pass over every open feed."""
        now = self.clock()
        with self._lock:
            feeds = list(self.feeds.values())
        for feed in feeds:
            if feed.closed:
                self.close(feed.id)
                continue
            token = feed.request.token
            if token is not None and self.token_valid is not None and not self.token_valid(token):
                logging.info(f"Closing {feed.id}: token expired.")
                feed.close("auth-expired")
                self.close(feed.id)
                continue
            try:
                revalidate(feed, self.store, now)
            except KGStreamError as e:
                logging.warning(f"Revalidation of {feed.id} failed: {e.describe()}")

    def _loop(self) -> None:
        while not self._stop.wait(self.interval):
            self.check()

    def start(self) -> "MonitoringService":
        if self._thread is None:
            self._thread = threading.Thread(target=self._loop, name="monitoring-revalidate", daemon=True)
            self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        with self._lock:
            feeds = list(self.feeds.values())
            self.feeds.clear()
        for feed in feeds:
            feed.close()
