"""Event-time execution of pipeline specs.

Every node owns one operator and a mailbox. Items flowing between nodes are
events, watermarks and an end-of-stream marker. A node's watermark is the
minimum over its inputs; sources derive theirs from the largest event time
seen minus the allowed lateness. Aggregations fire a time window once the
watermark reaches its end.

``replay`` pushes a finite input through the same operators synchronously;
``RunningPipeline`` runs them on a thread pool against the broker.
"""
import json
import logging
import queue
import sys
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple

from rich.console import Console

from .broker import Broker, Counters, Event, Stage
from .errors import PipelineError
from .graphs import MISSING, build_transformation_graph, get_path, register_derived_stream, stream_iri, topic_of
from .kg import GraphStore
from .pipeline import (
    ARITHMETIC,
    COMPARISONS,
    NodeKind,
    NodeSpec,
    PipelineSpec,
    StreamKind,
    WindowKind,
    aggregate_value_field,
    field_domains,
    infer_stream_kinds,
    validate,
)
from .units import parse_duration, parse_timestamp
from .windows import Accumulator, KeyState, Window, aggregate_fire, close_session, session_candidate, window_assign

MIN_WATERMARK = -sys.maxsize
MAX_WATERMARK = sys.maxsize


class Watermark(NamedTuple):
    time: int


class EndOfStream(NamedTuple):
    # False on a graceful stop: unfired time windows are dropped
    final: bool = True


FEED = "<feed>"


@dataclass
class PipelineContext:
    pipeline: str
    broker: Broker | None = None
    counters: Counters = field(default_factory=Counters)
    collect: bool = False
    collected: dict[str, list[Event]] = field(default_factory=dict)
    dead_letters: list[dict] = field(default_factory=list)
    console: Console | None = None

    def dead_letter(self, node: str, event: Event, reason: str) -> None:
        self.counters.add("dead_lettered")
        document = {"node": node, "reason": reason, "payload": event.payload, "event_time": event.event_time}
        self.dead_letters.append(document)
        if self.broker is not None:
            self.broker.dead_letter(f"pipeline.{self.pipeline}", event.payload, reason, node=node)


def _derive(event: Event, payload: Any, key: Any = None) -> Event:
    return Event(
        topic=event.topic,
        event_time=event.event_time,
        payload=payload,
        sequence=event.sequence,
        ingest_time=event.ingest_time,
        key=key,
        stages=dict(event.stages),
    )


def _field(event: Event, name: str, node: NodeSpec) -> Any:
    value = get_path(event.payload, name) if isinstance(event.payload, Mapping) else MISSING
    if value is MISSING:
        raise PipelineError(f"{node.kind.value} {node.id}: payload has no field {name}")
    return value


class Operator:
    def __init__(self, node: NodeSpec, ctx: PipelineContext):
        self.node = node
        self.ctx = ctx

    def process(self, event: Event) -> list:
        return [event]

    def on_watermark(self, watermark: int) -> list:
        return []

    def on_end(self, final: bool) -> list:
        return []


class SourceOperator(Operator):
    def __init__(self, node: NodeSpec, ctx: PipelineContext, lateness: int = 0):
        super().__init__(node, ctx)
        self.lateness = parse_duration(node.params["lateness"]) if node.params.get("lateness") is not None else lateness
        self.time_field = node.params.get("time_field")
        self.max_seen = MIN_WATERMARK
        self.watermark = MIN_WATERMARK

    def process(self, event: Event) -> list:
        out = _derive(event, event.payload)
        if self.time_field:
            try:
                out.event_time = parse_timestamp(_field(event, self.time_field, self.node))
            except ValueError as e:
                raise PipelineError(f"source {self.node.id}: bad event time: {e}") from e
        out.stamp(Stage.PIPELINE_IN)
        self.max_seen = max(self.max_seen, out.event_time)
        items: list = [out]
        watermark = self.max_seen - self.lateness
        if watermark > self.watermark:
            self.watermark = watermark
            items.append(Watermark(watermark))
        return items

    def on_end(self, final: bool) -> list:
        return [Watermark(MAX_WATERMARK)] if final else []


class MapOperator(Operator):
    def process(self, event: Event) -> list:
        p = self.node.params
        if not isinstance(event.payload, Mapping):
            raise PipelineError(f"map {self.node.id}: payload is not a document")
        if "select" in p:
            doc = {name: _field(event, name, self.node) for name in p["select"]}
        else:
            doc = dict(event.payload)
        for old, new in (p.get("rename") or {}).items():
            if old in doc:
                doc[new] = doc.pop(old)
        for name, (source, op, constant) in (p.get("compute") or {}).items():
            value = _field(event, source, self.node)
            try:
                doc[name] = ARITHMETIC[op](value, constant)
            except (TypeError, ZeroDivisionError) as e:
                raise PipelineError(f"map {self.node.id}: cannot compute {name}: {e}") from e
        return [_derive(event, doc, event.key)]


class FilterOperator(Operator):
    def __init__(self, node: NodeSpec, ctx: PipelineContext):
        super().__init__(node, ctx)
        self.compare = COMPARISONS[node.params["op"]]

    def process(self, event: Event) -> list:
        value = _field(event, self.node.params["field"], self.node)
        try:
            keep = self.compare(value, self.node.params["value"])
        except TypeError as e:
            raise PipelineError(f"filter {self.node.id}: {e}") from e
        return [event] if keep else []


class KeyByOperator(Operator):
    def process(self, event: Event) -> list:
        key = _field(event, self.node.params["field"], self.node)
        return [_derive(event, event.payload, key)]


class AggregateOperator(Operator):
    def __init__(self, node: NodeSpec, ctx: PipelineContext, keyed: bool = False):
        super().__init__(node, ctx)
        self.config = node.window
        self.function = node.params["function"]
        self.field = node.params.get("field")
        self.time_field = node.params.get("time_field")
        self.round = node.params.get("round")
        self.value_field = aggregate_value_field(node)
        self.keyed = keyed
        self.states: dict[Any, KeyState] = {}
        self.watermark = MIN_WATERMARK
        self._seq = 0

    @property
    def positional(self) -> bool:
        return self.config.kind is WindowKind.COUNT

    def process(self, event: Event) -> list:
        value = None
        if self.function != "count":
            value = _field(event, self.field, self.node)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise PipelineError(f"aggregate {self.node.id}: field {self.field} is not numeric")
        t = event.event_time
        if self.time_field:
            try:
                t = parse_timestamp(_field(event, self.time_field, self.node))
            except ValueError as e:
                raise PipelineError(f"aggregate {self.node.id}: bad event time: {e}") from e
        key = event.key if self.keyed else None
        state = self.states.setdefault(key, KeyState())

        if self.config.kind is WindowKind.SESSION:
            if session_candidate(t, self.config.gap, state).end <= self.watermark:
                return self._late()
            windows = window_assign(t, self.config, state)
        elif self.positional:
            windows = window_assign(t, self.config, state)
        else:
            windows = [w for w in window_assign(t, self.config, state) if w.end > self.watermark]
            if not windows:
                return self._late()

        self._seq += 1
        out = []
        for w in windows:
            acc = state.windows.get(w)
            if acc is None:
                acc = state.windows[w] = Accumulator(self._seq)
            acc.add(t, value)
            if self.positional and acc.count >= self.config.size:
                del state.windows[w]
                out += self._emit([(key, w, acc)])
        return out

    def _late(self) -> list:
        self.ctx.counters.add("late")
        return []

    def on_watermark(self, watermark: int) -> list:
        self.watermark = watermark
        if self.positional:
            return []
        due = []
        for key, state in self.states.items():
            for w, acc in list(state.windows.items()):
                if w.end <= watermark:
                    due.append((key, w, acc))
                    del state.windows[w]
                    close_session(state, w)
        due.sort(key=lambda item: (item[1].start, item[1].end, item[2].first_seq))
        return self._emit(due)

    def on_end(self, final: bool) -> list:
        if final:
            return []
        if self.positional:
            pending = [(key, w, acc) for key, state in self.states.items() for w, acc in state.windows.items()]
            pending.sort(key=lambda item: item[2].first_seq)
            for state in self.states.values():
                state.windows.clear()
            return self._emit(pending)
        dropped = sum(len(s.windows) for s in self.states.values())
        if dropped:
            logging.info(f"Pipeline {self.ctx.pipeline}: dropped {dropped} unfired window(s) of {self.node.id} on stop.")
        return []

    def _emit(self, fired: list[tuple[Any, Window, Accumulator]]) -> list:
        out = []
        for key, w, acc in fired:
            doc = aggregate_fire(
                w,
                acc,
                self.function,
                key=key,
                keyed=self.keyed,
                value_field=self.value_field,
                round_digits=self.round,
                positional=self.positional,
            )
            if doc is None:
                continue
            event_time = acc.last_time if self.positional else w.end - 1
            out.append(Event(topic="", event_time=event_time, payload=doc))
        self.ctx.counters.add("windows_fired", len(out))
        return out


class SinkOperator(Operator):
    def __init__(self, node: NodeSpec, ctx: PipelineContext, pipeline: str):
        super().__init__(node, ctx)
        self.kind = node.params.get("kind", "console")
        self.topic = node.params.get("topic") or f"{pipeline}.{node.id}".lower()
        self._file = None
        if self.kind == "file":
            path = Path(node.params["path"])
            path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(path, "a", encoding="utf-8")
        self._console = ctx.console

    def process(self, event: Event) -> list:
        event.stamp(Stage.PIPELINE_OUT)
        if self.ctx.collect:
            self.ctx.collected.setdefault(self.node.id, []).append(event)
        if self.kind == "broker":
            if self.ctx.broker is not None:
                out = Event(
                    topic=self.topic,
                    event_time=event.event_time,
                    payload=event.payload,
                    ingest_time=event.ingest_time,
                    stages=dict(event.stages),
                )
                out.stamp(Stage.REPUBLISHED)
                self.ctx.broker.publish_event(out)
        elif self.kind == "file":
            self._file.write(json.dumps(event.payload, default=str) + "\n")
        elif not self.ctx.collect:
            if self._console is None:
                self._console = self.ctx.console = Console()
            self._console.print_json(json.dumps(event.payload, default=str))
        self.ctx.counters.add("emitted")
        return []

    def flush(self) -> None:
        if self._file is not None:
            self._file.flush()

    def on_end(self, final: bool) -> list:
        if self._file is not None:
            self._file.close()
            self._file = None
        return []


class Node:
    """One operator plus its watermark bookkeeping."""

    def __init__(self, spec: NodeSpec, operator: Operator, inputs: list[str], children: list[str]):
        self.spec = spec
        self.operator = operator
        self.inputs = inputs or [FEED]
        self.children = children
        self.input_watermarks = {i: MIN_WATERMARK for i in self.inputs}
        self.watermark = MIN_WATERMARK
        self.ended: set[str] = set()
        self.finished = False
        self.processed = 0

    def handle(self, input_id: str, item: Any, ctx: PipelineContext) -> list:
        if isinstance(item, Watermark):
            if self.spec.kind is NodeKind.SOURCE:
                return []
            self.input_watermarks[input_id] = max(self.input_watermarks.get(input_id, MIN_WATERMARK), item.time)
            watermark = min(self.input_watermarks.values())
            if watermark <= self.watermark:
                return []
            self.watermark = watermark
            return self.operator.on_watermark(watermark) + [Watermark(watermark)]
        if isinstance(item, EndOfStream):
            self.ended.add(input_id)
            if not self.ended.issuperset(self.inputs):
                return []
            self.finished = True
            return self.operator.on_end(item.final) + [item]
        self.processed += 1
        try:
            return self.operator.process(item)
        except PipelineError as e:
            ctx.dead_letter(self.spec.id, item, e.message)
            return []


def _operator(node: NodeSpec, spec: PipelineSpec, ctx: PipelineContext, lateness: int, kinds: dict) -> Operator:
    if node.kind is NodeKind.SOURCE:
        return SourceOperator(node, ctx, lateness)
    if node.kind is NodeKind.MAP:
        return MapOperator(node, ctx)
    if node.kind is NodeKind.FILTER:
        return FilterOperator(node, ctx)
    if node.kind is NodeKind.KEY_BY:
        return KeyByOperator(node, ctx)
    if node.kind is NodeKind.AGGREGATE:
        keyed = any(kinds.get(e.source) is StreamKind.KEYED for e in spec.inputs(node.id))
        return AggregateOperator(node, ctx, keyed)
    if node.kind is NodeKind.SINK:
        return SinkOperator(node, ctx, spec.id)
    return Operator(node, ctx)


class Dag:
    def __init__(self, spec: PipelineSpec, ctx: PipelineContext, lateness: int = 0):
        report = validate(spec)
        if not report.ok:
            raise PipelineError(f"pipeline {spec.id} is invalid: " + "; ".join(str(v) for v in report.violations))
        self.spec = spec
        self.ctx = ctx
        kinds = infer_stream_kinds(spec)
        self.order = spec.topological_order()
        self.nodes: dict[str, Node] = {}
        for node_id in self.order:
            node = spec.node(node_id)
            self.nodes[node_id] = Node(
                node,
                _operator(node, spec, ctx, lateness, kinds),
                [e.source for e in spec.inputs(node_id)],
                [e.target for e in spec.outputs(node_id)],
            )

    def sources(self) -> list[Node]:
        return [n for n in self.nodes.values() if n.spec.kind is NodeKind.SOURCE]

    def push(self, node_id: str, input_id: str, item: Any) -> None:
        node = self.nodes[node_id]
        for out in node.handle(input_id, item, self.ctx):
            for child in node.children:
                self.push(child, node_id, out)

    def source_topic(self, node: Node) -> str | None:
        return node.spec.params.get("topic")


# -- synchronous replay -----------------------------------------------------

@dataclass
class ReplayResult:
    outputs: dict[str, list[dict]]
    events: dict[str, list[Event]]
    dead_letters: list[dict]
    late: int


def as_event(item: Event | Mapping, index: int = 0, topic: str = "") -> Event:
    if isinstance(item, Event):
        return item
    return Event(topic=topic, event_time=index, payload=dict(item))


def replay(
    spec: PipelineSpec,
    events: Iterable[Event | Mapping],
    lateness: int = 0,
    broker: Broker | None = None,
    final: bool = True,
) -> ReplayResult:
    """Run ``spec`` over a finite input and collect what reaches each sink.

    Events go to every source whose topic they carry; an event with no topic
    goes to every source. Plain documents become events timed by their
    position unless a source names a ``time_field``.
    """
    ctx = PipelineContext(spec.id, broker=broker, collect=True)
    dag = Dag(spec, ctx, lateness)
    sources = dag.sources()
    for i, item in enumerate(events):
        event = as_event(item, i)
        targets = [s for s in sources if event.topic and dag.source_topic(s) == event.topic] or (
            sources if not event.topic or len(sources) == 1 else []
        )
        for source in targets:
            dag.push(source.spec.id, FEED, event)
    for source in sources:
        dag.push(source.spec.id, FEED, EndOfStream(final))
    collected = {n.id: ctx.collected.get(n.id, []) for n in spec.sinks()}
    return ReplayResult(
        outputs={k: [e.payload for e in v] for k, v in collected.items()},
        events=collected,
        dead_letters=ctx.dead_letters,
        late=ctx.counters.get("late"),
    )


# -- threaded runner ----------------------------------------------------------

class RunningPipeline:
    """A deployed pipeline fed from broker subscriptions.

    Each node drains its mailbox in bundles: a bundle closes when it holds
    ``bundle_size`` items, when ``bundle_time`` ms have passed since its first
    item, or when the mailbox runs dry. Outputs of a bundle are handed
    downstream together.
    """

    def __init__(
        self,
        spec: PipelineSpec,
        broker: Broker,
        lateness: int = 0,
        bundle_size: int = 10,
        bundle_time: int = 10,
        mailbox_size: int = 10000,
        console: Console | None = None,
    ):
        self.spec = spec
        self.broker = broker
        self.bundle_size = max(1, bundle_size)
        self.bundle_time = bundle_time / 1000
        self.ctx = PipelineContext(spec.id, broker=broker, console=console)
        self.dag = Dag(spec, self.ctx, lateness)
        self.mailboxes = {node_id: queue.Queue(maxsize=mailbox_size) for node_id in self.dag.order}
        self._subscriptions = []
        self._feeders: list[threading.Thread] = []
        self._pool: ThreadPoolExecutor | None = None
        self._futures: list[Future] = []
        self._halt = threading.Event()
        self._final = True
        self.started = False

    def start(self) -> "RunningPipeline":
        if self.started:
            return self
        self.started = True
        self._pool = ThreadPoolExecutor(max_workers=len(self.dag.nodes), thread_name_prefix=f"pipeline-{self.spec.id}")
        self._futures = [self._pool.submit(self._node_loop, node_id) for node_id in self.dag.order]
        for source in self.dag.sources():
            topic = self.dag.source_topic(source)
            if not topic:
                raise PipelineError(f"source {source.spec.id} of {self.spec.id} has no topic")
            sub = self.broker.subscribe([topic])
            self._subscriptions.append(sub)
            thread = threading.Thread(
                target=self._feed, args=(source.spec.id, sub), name=f"feed-{self.spec.id}-{source.spec.id}", daemon=True
            )
            thread.start()
            self._feeders.append(thread)
        logging.info(f"Pipeline {self.spec.id} started with {len(self.dag.nodes)} nodes.")
        return self

    def _feed(self, node_id: str, sub) -> None:
        box = self.mailboxes[node_id]
        while not self._halt.is_set():
            for event in sub.poll(self.bundle_size, timeout=0.05):
                box.put((FEED, event))
        if self._final:
            for event in sub.poll():
                box.put((FEED, event))
        box.put((FEED, EndOfStream(self._final)))

    def _node_loop(self, node_id: str) -> None:
        node = self.dag.nodes[node_id]
        box = self.mailboxes[node_id]
        while not node.finished:
            bundle = [box.get()]
            deadline = time.monotonic() + self.bundle_time
            while len(bundle) < self.bundle_size and time.monotonic() < deadline:
                try:
                    bundle.append(box.get_nowait())
                except queue.Empty:
                    break
            outputs = []
            for input_id, item in bundle:
                try:
                    outputs += node.handle(input_id, item, self.ctx)
                except Exception:
                    logging.exception(f"Pipeline {self.spec.id}: node {node_id} failed")
            for out in outputs:
                for child in node.children:
                    self.mailboxes[child].put((node_id, out))
            if isinstance(node.operator, SinkOperator):
                node.operator.flush()

    def _shutdown(self, final: bool, timeout: float | None) -> bool:
        if not self.started:
            return True
        self._final = final
        self._halt.set()
        for thread in self._feeders:
            thread.join(timeout)
        deadline = None if timeout is None else time.monotonic() + timeout
        done = True
        for future in self._futures:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                future.result(remaining)
            except Exception:
                done = False
        for sub in self._subscriptions:
            sub.close()
        self._pool.shutdown(wait=done)
        logging.info(f"Pipeline {self.spec.id} {'finished' if final else 'stopped'}: {self.stats()}.")
        return done

    def finish(self, timeout: float | None = None) -> bool:
        """Drain what the sources have received, fire every window and stop."""
        return self._shutdown(True, timeout)

    def stop(self, timeout: float | None = None) -> bool:
        """Stop now; partial count windows are emitted, time windows dropped."""
        return self._shutdown(False, timeout)

    def stats(self) -> dict[str, Any]:
        counts = self.ctx.counters.snapshot()
        return {
            "pipeline": self.spec.id,
            "processed": {node_id: node.processed for node_id, node in self.dag.nodes.items()},
            "emitted": counts.get("emitted", 0),
            "late": counts.get("late", 0),
            "dead_lettered": counts.get("dead_lettered", 0),
            "windows_fired": counts.get("windows_fired", 0),
        }


def bind_topics(spec: PipelineSpec, store: GraphStore) -> None:
    """Fill in the broker topic of every source node that names only a stream."""
    for node in spec.sources():
        if node.params.get("topic") or not node.params.get("stream"):
            continue
        topic = topic_of(store, stream_iri(node.params["stream"]))
        if topic is None:
            raise PipelineError(f"source {node.id} of {spec.id} reads stream {node.params['stream']}, which has no topic")
        node.params["topic"] = topic


def deploy(
    spec: PipelineSpec,
    store: GraphStore,
    broker: Broker,
    start: bool = True,
    **options,
) -> RunningPipeline:
    """Validate ``spec`` against the graph, record it in the transformation
    graph, register its output streams and start it."""
    report = validate(spec, field_domains(spec, store))
    if not report.ok:
        raise PipelineError(f"pipeline {spec.id} is invalid: " + "; ".join(str(v) for v in report.violations))
    bind_topics(spec, store)
    store.insert(build_transformation_graph([spec]))
    register_derived_stream(spec, store)
    if store.rules or store.transitive:
        store.materialize()
    running = RunningPipeline(spec, broker, **options)
    logging.info(f"Deployed pipeline {spec.id}.")
    return running.start() if start else running
