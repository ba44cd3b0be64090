"""Evaluation harness: graph scaling, the discovery and access queries,
monitoring latency, federated historical queries and end-to-end stage latency.

Every suite returns a ``LatencyReport``; ``write_report`` appends it as one
JSON line to the results directory and ``render`` prints it as a table.
"""
import json
import logging
import random
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
from rich.console import Console
from rich.table import Table

from .access import accessible_streams_for_role, colocated_accessible_sensors, load_context, role_streams_query
from .broker import Broker, Stage
from .executor import RunningPipeline
from .federation import Aggregate, HistoricalQuery, execute, plan
from .formats import load_rules
from .generator import TARGET_TRIPLES, TOLERANCE, GeneratedGraph, deviation, generate, scale
from .graphs import (
    A,
    PROV,
    SG,
    AgentDescriptor,
    CanonicalProperty,
    FieldBinding,
    Fixture,
    RightDescriptor,
    RightScope,
    RoleDescriptor,
    SiteNode,
    SourceType,
    StorageSpec,
    StreamSourceDescriptor,
    SystemDescriptor,
    build_all,
    data_iri,
)
from .kg import GraphStore, Query, Term, pattern, term_key
from .monitoring import MonitoringRequest, open_feed
from .pipeline import EdgeSpec, NodeKind, NodeSpec, PipelineSpec
from .preprocess import Ingestor, SyntheticGenerator
from .storage import HOUR, Predicate, Storage

E2E_STAGES = (
    ("preprocessing", Stage.GENERATED, Stage.PREPROCESSED),
    ("broker ingestion", Stage.PREPROCESSED, Stage.BROKER_IN),
    ("pipeline ingestion", Stage.BROKER_IN, Stage.PIPELINE_IN),
    ("pipeline processing", Stage.PIPELINE_IN, Stage.PIPELINE_OUT),
    ("republishing", Stage.PIPELINE_OUT, Stage.REPUBLISHED),
)


@dataclass
class StageStats:
    mean: float
    stdev: float
    min: float
    max: float
    samples: int

    @classmethod
    def of(cls, runs: list[list[float]]) -> "StageStats":
        """Mean and deviation over per-run means; extremes over all samples."""
        runs = [r for r in runs if r]
        if not runs:
            return cls(float("nan"), float("nan"), float("nan"), float("nan"), 0)
        means = np.array([np.mean(r) for r in runs])
        flat = np.concatenate([np.asarray(r, dtype=float) for r in runs])
        return cls(
            mean=float(means.mean()),
            stdev=float(means.std(ddof=1)) if len(means) > 1 else 0.0,
            min=float(flat.min()),
            max=float(flat.max()),
            samples=int(flat.size),
        )


@dataclass
class LatencyReport:
    name: str
    # stage name -> statistics in milliseconds
    stages: dict[str, StageStats]
    runs: int
    config: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "runs": self.runs,
            "config": self.config,
            "stages": {k: vars(v) for k, v in self.stages.items()},
            "extra": self.extra,
        }


def render(report: LatencyReport, console: Console | None = None) -> None:
    console = console or Console()
    table = Table(title=f"{report.name} ({report.runs} runs)")
    table.add_column("stage")
    for column in ("mean ms", "stdev ms", "min ms", "max ms", "samples"):
        table.add_column(column, justify="right")
    for name, s in report.stages.items():
        table.add_row(name, f"{s.mean:.3f}", f"{s.stdev:.3f}", f"{s.min:.3f}", f"{s.max:.3f}", str(s.samples))
    console.print(table)
    if report.extra:
        console.print_json(json.dumps(report.extra, default=str))


def write_report(report: LatencyReport, results_dir: Path | str) -> Path:
    results_dir = Path(results_dir)
    results_dir.mkdir(parents=True, exist_ok=True)
    path = results_dir / f"{report.name.split()[0]}.jsonl"
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(report.to_dict(), default=str) + "\n")
    return path


def _timed(fn: Callable[[], Any]) -> tuple[float, Any]:
    started = time.perf_counter()
    result = fn()
    return (time.perf_counter() - started) * 1000, result


def prepare(generated: GeneratedGraph, rules_file: Path | str | None = None) -> GraphStore:
    """Load a generated graph with the rules installed and materialize it."""
    store = generated.store()
    load_rules(rules_file).install(store)
    store.materialize()
    return store


# -- graph scaling -------------------------------------------------------------

def run_kg_bench(scales: Iterable[str] = ("G1", "G2"), seed: int = 0) -> LatencyReport:
    stages: dict[str, list[list[float]]] = {"generate": [], "materialize": []}
    extra = {}
    for name in scales:
        gen_ms, generated = _timed(lambda: generate(scale(name, seed)))
        store = generated.store()
        load_rules().install(store)
        mat_ms, inferred = _timed(store.materialize)
        stages["generate"].append([gen_ms])
        stages["materialize"].append([mat_ms])
        dev = deviation(generated, name)
        extra[name] = {
            "triples": len(generated.triples),
            "target": TARGET_TRIPLES[name.upper()],
            "deviation": round(dev, 4),
            "within_tolerance": abs(dev) <= TOLERANCE,
            "inferred": sum(inferred.values()),
        }
    return LatencyReport("kg", {k: StageStats.of(v) for k, v in stages.items()}, len(extra), {"scales": list(scales), "seed": seed}, extra)


# -- discovery and access queries ------------------------------------------------

def topic_by_sensor(store: GraphStore, sensor: Term) -> list[str]:
    q = Query(
        select=("topic",),
        bindings={"s": sensor},
        body=(pattern("?stream", PROV.wasAttributedTo, "?s"), pattern("?stream", SG.topic, "?topic")),
    )
    return sorted(str(r["topic"]) for r in store.query(q))


def sensors_by_property(store: GraphStore, prop: Term) -> set[Term]:
    q = Query(
        select=("s",),
        bindings={"p": prop},
        body=(
            pattern("?stream", PROV.wasAttributedTo, "?s"),
            pattern("?stream", SG.hasSchema, "?schema"),
            pattern("?schema", SG.hasField, "?f"),
            pattern("?f", SG.hasProperty, "?p"),
        ),
    )
    return {r["s"] for r in store.query(q)}


def stream_accessible_by_role(store: GraphStore, stream: Term, role: Term) -> bool:
    base = role_streams_query(role)
    return store.ask(replace(base, bindings={**base.bindings, "stream": stream}))


def run_query_suite(
    generated: GeneratedGraph,
    repetitions: int = 10,
    seed: int = 0,
    store: GraphStore | None = None,
) -> LatencyReport:
    """Time the five discovery and access queries with random parameters."""
    store = store or prepare(generated)
    rnd = random.Random(seed)
    fixture = generated.fixture
    sensors = [data_iri(s.id) for s in fixture.systems]
    props = [p.iri for p in fixture.properties]
    roles = [data_iri(r.id) for r in fixture.roles]
    agents = [data_iri(a.id) for a in fixture.agents]
    streams = sorted((t.subject for t in store.triples(None, A, SG.Stream)), key=term_key)

    samples: dict[str, list[list[float]]] = {q: [] for q in ("Q1", "Q2", "Q3", "Q4", "Q5")}
    sizes: dict[str, list[int]] = {q: [] for q in samples}
    for _ in range(repetitions):
        sensor, prop, role, agent = rnd.choice(sensors), rnd.choice(props), rnd.choice(roles), rnd.choice(agents)
        stream = rnd.choice(streams)
        ctx = load_context(agent, store)
        runs = {
            "Q1": lambda: topic_by_sensor(store, sensor),
            "Q2": lambda: sensors_by_property(store, prop),
            "Q3": lambda: [stream] if stream_accessible_by_role(store, stream, role) else [],
            "Q4": lambda: accessible_streams_for_role(role, store),
            "Q5": lambda: colocated_accessible_sensors(ctx, store),
        }
        for name, fn in runs.items():
            ms, result = _timed(fn)
            samples[name].append([ms])
            sizes[name].append(len(result))
    extra = {"triples": len(store), "mean_result_size": {k: float(np.mean(v)) if v else 0.0 for k, v in sizes.items()}}
    config = {"repetitions": repetitions, "seed": seed, "generator": generated.config.to_dict()}
    return LatencyReport("queries", {k: StageStats.of(v) for k, v in samples.items()}, repetitions, config, extra)


# -- monitoring ----------------------------------------------------------------

def _readable_sensor(store: GraphStore, fixture: Fixture, rnd: random.Random, attempts: int = 50):
    for _ in range(attempts):
        agent = rnd.choice(fixture.agents)
        ctx = load_context(data_iri(agent.id), store)
        if ctx.role is None:
            continue
        readable = sorted(accessible_streams_for_role(ctx.role, store), key=term_key)
        attributed = [(s, store.value(s, PROV.wasAttributedTo)) for s in readable]
        attributed = [(s, sensor) for s, sensor in attributed if sensor is not None]
        if attributed:
            return ctx, rnd.choice(attributed)
    return None, (None, None)


def run_monitoring_bench(
    scales: Iterable[str] = ("G1",),
    sensors: int = 10,
    rate: float = 10.0,
    seed: int = 0,
    timeout: float = 5.0,
) -> LatencyReport:
    """Request-to-first-event latency of monitoring feeds over sensors with a
    publisher running, and the share of it spent resolving on the graph."""
    rnd = random.Random(seed)
    stages: dict[str, list[list[float]]] = {"kg resolve": [], "first event": []}
    extra: dict[str, Any] = {"timeouts": 0}
    for name in scales:
        generated = generate(scale(name, seed))
        store = prepare(generated)
        broker = Broker()
        resolve_ms, first_ms = [], []
        try:
            for _ in range(sensors):
                ctx, (stream, sensor) = _readable_sensor(store, generated.fixture, rnd)
                if ctx is None:
                    continue
                topic = str(store.value(stream, SG.topic))
                stop = threading.Event()

                def publish():
                    while not stop.wait(1 / rate):
                        broker.publish(topic, {"ts": int(time.time() * 1000), "value": random.random()})

                publisher = threading.Thread(target=publish, daemon=True)
                publisher.start()
                received = time.monotonic()
                feed = open_feed(MonitoringRequest([{"Sensor": [sensor.value]}]), ctx, broker, store, received_at=received)
                record = feed.next(timeout)
                stop.set()
                publisher.join()
                feed.close()
                if record is None or feed.first_event_ms is None:
                    extra["timeouts"] += 1
                    continue
                resolve_ms.append(feed.resolve_ms)
                first_ms.append(feed.first_event_ms)
        finally:
            broker.close()
        stages["kg resolve"].append(resolve_ms)
        stages["first event"].append(first_ms)
        share = float(np.sum(resolve_ms) / np.sum(first_ms)) if first_ms else float("nan")
        extra[name] = {"triples": len(store), "resolve_share": round(share, 4), "samples": len(first_ms)}
    config = {"scales": list(scales), "sensors": sensors, "rate": rate, "seed": seed}
    return LatencyReport("monitor", {k: StageStats.of(v) for k, v in stages.items()}, len(stages["first event"]), config, extra)


# -- federated historical queries -------------------------------------------------

FEDERATION_EPOCH = 1_700_000_000_000


def federation_fixture() -> Fixture:
    """One press with a torque/temperature stream stored on two backends."""
    return Fixture(
        sites=[SiteNode("plant")],
        roles=[RoleDescriptor("operator")],
        agents=[AgentDescriptor("op1", role="operator", location="plant")],
        systems=[SystemDescriptor("press1", location="plant")],
        rights=[RightDescriptor("op_press1", "operator", RightScope.SYSTEM, "press1")],
        properties=[CanonicalProperty("torque"), CanonicalProperty("temperature_C")],
        sources=[StreamSourceDescriptor("press1", SourceType.SENSOR, ["ts", "torque", "temp"], "plant")],
        bindings=[FieldBinding("press1", "torque", "torque"), FieldBinding("press1", "temp", "temperature_C")],
        storage=[StorageSpec("press1", "timeseries", "plant", "press1", ["torque", "temp"])],
    )


def load_federation_rows(storage: Storage, rows: int, seed: int = 0, batch: int = 3600) -> None:
    """``rows`` readings at 1 Hz written straight to the press table."""
    rnd = random.Random(seed)
    backend = storage.backend("timeseries")
    for offset in range(0, rows, batch):
        chunk = [
            {
                "_ts": FEDERATION_EPOCH + i * 1000,
                "_stream": "press1",
                "_seq": i + 1,
                "torque": round(rnd.uniform(0, 1000), 3),
                "temp": round(rnd.uniform(20, 90), 3),
            }
            for i in range(offset, min(rows, offset + batch))
        ]
        backend.append("plant", "press1", chunk)
    storage.seal()


def run_federation_bench(
    sizes: Iterable[int] = (3_600, 36_000, 360_000),
    repetitions: int = 10,
    root: Path | str | None = None,
    seed: int = 0,
) -> LatencyReport:
    """Filter, filter-with-predicate and bucketed aggregation over the last
    hour of datasets of growing size."""
    store = GraphStore()
    for triples in build_all(federation_fixture()).values():
        store.insert(triples)
    load_rules().install(store)
    store.materialize()
    ctx = load_context(data_iri("op1"), store)
    stages: dict[str, list[list[float]]] = {"filter1": [], "filter2": [], "aggregation": [], "kg resolve": []}
    extra = {}
    with tempfile.TemporaryDirectory(dir=root) as tmp:
        for size in sizes:
            storage = Storage(Path(tmp) / str(size), partition=HOUR)
            load_federation_rows(storage, size, seed)
            end = FEDERATION_EPOCH + size * 1000
            start = end - HOUR
            shapes = {
                "filter1": HistoricalQuery("press1", start, end),
                "filter2": HistoricalQuery("press1", start, end, [Predicate("torque", ">", 500.0)]),
                "aggregation": HistoricalQuery("press1", end - 24 * HOUR, end, aggregate=Aggregate("avg", "torque", HOUR)),
            }
            per_shape: dict[str, list[float]] = {k: [] for k in stages}
            for _ in range(repetitions):
                for name, q in shapes.items():
                    ms, result = _timed(lambda: execute(plan(q, ctx, store, storage), storage))
                    per_shape[name].append(ms)
                    per_shape["kg resolve"].append(result.stats.get("kg_resolve_ms", 0.0))
            for name, values in per_shape.items():
                stages[name].append(values)
            extra[str(size)] = {k: round(float(np.mean(v)), 3) for k, v in per_shape.items()}
            storage.close()
    config = {"sizes": list(sizes), "repetitions": repetitions, "seed": seed}
    return LatencyReport("federation", {k: StageStats.of(v) for k, v in stages.items()}, repetitions, config, extra)


# -- end to end ---------------------------------------------------------------

E2E_SOURCE = StreamSourceDescriptor(
    "bench_machine", SourceType.SENSOR, ["ts", "torque", "temp"], "bench", {"topic": "bench.machine", "time_field": "ts"}
)
E2E_OUT = "bench.machine.out"


def e2e_pipeline() -> PipelineSpec:
    """Filter then map, republished on the broker."""
    nodes = [
        NodeSpec("src", NodeKind.SOURCE, {"topic": E2E_SOURCE.topic, "time_field": "ts"}),
        NodeSpec("keep", NodeKind.FILTER, {"field": "torque", "op": ">=", "value": 0}),
        NodeSpec("shape", NodeKind.MAP, {"select": ["ts", "torque", "temp"], "compute": {"temp_f": ["temp", "*", 1.8]}}),
        NodeSpec("out", NodeKind.SINK, {"kind": "broker", "topic": E2E_OUT}),
    ]
    edges = [EdgeSpec("src", "keep"), EdgeSpec("keep", "shape"), EdgeSpec("shape", "out")]
    return PipelineSpec("bench_e2e", nodes, edges)


def _e2e_run(rate: float, duration: float, bundle_size: int, bundle_time: int, seed: int) -> tuple[dict[str, list[float]], int, int]:
    broker = Broker(queue_size=max(10_000, int(rate * duration) + 1))
    ingestor = Ingestor(broker, [E2E_SOURCE])
    received: list = []
    done = threading.Event()
    generator = SyntheticGenerator(E2E_SOURCE.schema, rate, duration, seed=seed)
    expected = generator.total

    def collect(event):
        received.append(event.stages)
        if len(received) >= expected:
            done.set()

    out = broker.subscribe([E2E_OUT], callback=collect)
    running = RunningPipeline(e2e_pipeline(), broker, bundle_size=bundle_size, bundle_time=bundle_time).start()
    try:
        sent = generator.run(lambda message, at: ingestor.ingest(message, E2E_SOURCE, generated_at=at))
        done.wait(timeout=max(5.0, duration))
        running.finish(timeout=10)
    finally:
        out.close()
        broker.close()
    stages: dict[str, list[float]] = {name: [] for name, _, _ in E2E_STAGES}
    stages["total"] = []
    for stamps in received:
        for name, a, b in E2E_STAGES:
            if a.value in stamps and b.value in stamps:
                stages[name].append((stamps[b.value] - stamps[a.value]) / 1e6)
        first, last = E2E_STAGES[0][1].value, E2E_STAGES[-1][2].value
        if first in stamps and last in stamps:
            stages["total"].append((stamps[last] - stamps[first]) / 1e6)
    return stages, sent, len(received)


def run_e2e_bench(
    rates: Iterable[float] = (100, 500, 1000),
    durations: Iterable[float] = (30,),
    runs: int = 10,
    bundle_size: int = 10,
    bundle_time: int = 10,
    seed: int = 0,
) -> list[LatencyReport]:
    """Per-stage latency from generation to republishing, one report per
    (rate, duration) pair."""
    reports = []
    for duration in durations:
        for rate in rates:
            per_stage: dict[str, list[list[float]]] = {}
            sent_total = received_total = 0
            for run in range(runs):
                stages, sent, received = _e2e_run(rate, duration, bundle_size, bundle_time, seed + run)
                sent_total += sent
                received_total += received
                for name, values in stages.items():
                    per_stage.setdefault(name, []).append(values)
            config = {"rate": rate, "duration": duration, "bundle_size": bundle_size, "bundle_time": bundle_time, "seed": seed}
            extra = {"sent": sent_total, "received": received_total, "lost": sent_total - received_total}
            report = LatencyReport(
                f"e2e rate={rate:g} duration={duration:g}",
                {k: StageStats.of(v) for k, v in per_stage.items()},
                runs,
                config,
                extra,
            )
            logging.info(f"E2E bench at {rate:g} msg/s for {duration:g} s: {extra}.")
            reports.append(report)
    return reports
