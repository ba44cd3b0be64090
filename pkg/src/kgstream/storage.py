"""Append-only storage backends and the routing service.

Every backend lays its tables out as
``<root>/<backend>/<dataset>/<table>/<partition-start>.seg`` with a
``manifest.json`` per table recording each partition's row count, min/max
event time and whether it is sealed or compacted. The three kinds differ only
in segment layout:

- ``columnar-file``: Parquet segments written with pyarrow; the active
  partition is buffered and rewritten on flush.
- ``row-log``: one flat JSON row per line.
- ``document-log``: one JSON document per line, stored fields nested under
  ``doc``.

Rows carry ``_ts`` (event time, ms), ``_stream`` (stream id) and ``_seq``
(broker sequence) next to the stored fields.
"""
import json
import logging
import math
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import pyarrow as pa
import pyarrow.parquet as pq

from .broker import Broker, Event, Subscription
from .errors import BackendWriteError, BadRequestError, NotFoundError
from .graphs import MISSING, StorageSpec, extract_storage_specs, get_path, stream_iri, topic_of
from .kg import GraphStore

HOUR = 3_600_000
DAY = 24 * HOUR

OPERATORS = {
    "=": lambda a, b: a == b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
    "≤": lambda a, b: a <= b,
    "≥": lambda a, b: a >= b,
}

_ARROW_OPS = {"=": "==", "==": "==", "!=": "!=", "<": "<", ">": ">", "<=": "<=", ">=": ">=", "≤": "<=", "≥": ">="}

META_COLUMNS = ("_ts", "_stream", "_seq")


class BackendKind(Enum):
    COLUMNAR = "columnar-file"
    ROW_LOG = "row-log"
    DOCUMENT_LOG = "document-log"


@dataclass(frozen=True)
class Predicate:
    field: str
    op: str
    value: Any

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise BadRequestError(f"unknown predicate operator {self.op}")

    def test(self, row: Mapping) -> bool:
        value = row.get(self.field, MISSING)
        if value is MISSING or value is None:
            return False
        try:
            return OPERATORS[self.op](value, self.value)
        except TypeError:
            return False


def _numeric(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass
class Partial:
    """Decomposable aggregate state of one bucket."""

    count: int = 0
    total: float = 0.0
    minimum: Any = None
    maximum: Any = None

    def add(self, value: Any, weight: int = 1) -> None:
        self.count += weight
        if not _numeric(value):
            return
        self.total += value * weight
        if self.minimum is None or value < self.minimum:
            self.minimum = value
        if self.maximum is None or value > self.maximum:
            self.maximum = value

    def add_row(self, row: Mapping, field: str | None) -> None:
        """Fold one stored row in. Compacted rows weigh ``_count`` readings;
        with a ``field``, rows without a numeric value are skipped."""
        weight = row.get("_count", 1)
        if field is None:
            self.add(None, weight)
        elif _numeric(row.get(field)):
            self.add(row[field], weight)

    def merge(self, other: "Partial") -> None:
        self.count += other.count
        self.total += other.total
        if other.minimum is not None and (self.minimum is None or other.minimum < self.minimum):
            self.minimum = other.minimum
        if other.maximum is not None and (self.maximum is None or other.maximum > self.maximum):
            self.maximum = other.maximum

    def result(self, function: str) -> Any:
        if function == "count":
            return self.count
        if function == "sum":
            return self.total
        if function == "avg":
            return self.total / self.count if self.count else None
        if function == "min":
            return self.minimum
        if function == "max":
            return self.maximum
        raise BadRequestError(f"unknown aggregate function {function}")


@dataclass
class PartitionInfo:
    start: int
    rows: int = 0
    min_ts: int | None = None
    max_ts: int | None = None
    sealed: bool = False
    compacted: bool = False

    def overlaps(self, start: int | None, end: int | None) -> bool:
        if self.min_ts is None:
            return False
        if start is not None and self.max_ts < start:
            return False
        if end is not None and self.min_ts >= end:
            return False
        return True


class Table:
    """Manifest and partition bookkeeping of one ``dataset/table``."""

    def __init__(self, path: Path, partition: int):
        self.path = path
        self.partition = partition
        self.partitions: dict[int, PartitionInfo] = {}
        manifest = path / "manifest.json"
        if manifest.exists():
            data = json.loads(manifest.read_text())
            self.partition = data.get("partition", partition)
            for item in data.get("partitions", []):
                info = PartitionInfo(**item)
                self.partitions[info.start] = info

    def segment(self, start: int) -> Path:
        return self.path / f"{start}.seg"

    def partition_start(self, ts: int) -> int:
        return (ts // self.partition) * self.partition

    def save(self) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        data = {
            "partition": self.partition,
            "partitions": [vars(p) for p in sorted(self.partitions.values(), key=lambda p: p.start)],
        }
        tmp = self.path / "manifest.json.tmp"
        tmp.write_text(json.dumps(data, indent=1))
        tmp.replace(self.path / "manifest.json")


class Backend:
    kind: BackendKind

    def __init__(self, id: str, root: str | Path, partition: int = HOUR):
        self.id = id
        self.root = Path(root) / id
        self.partition = partition
        self.lock = threading.RLock()
        self._tables: dict[tuple[str, str], Table] = {}
        self.writes = 0

    def table(self, dataset: str, table: str) -> Table:
        key = (dataset, table)
        if key not in self._tables:
            self._tables[key] = Table(self.root / dataset / table, self.partition)
        return self._tables[key]

    def tables(self) -> list[tuple[str, str]]:
        found = set(self._tables)
        if self.root.exists():
            for manifest in self.root.glob("*/*/manifest.json"):
                found.add((manifest.parent.parent.name, manifest.parent.name))
        return sorted(found)

    # -- writing ----------------------------------------------------------------

    def append(self, dataset: str, table: str, rows: list[dict]) -> int:
        if not rows:
            return 0
        with self.lock:
            t = self.table(dataset, table)
            by_partition: dict[int, list[dict]] = defaultdict(list)
            for row in rows:
                by_partition[t.partition_start(row["_ts"])].append(row)
            for start, part_rows in sorted(by_partition.items()):
                info = t.partitions.get(start)
                if info is None:
                    info = t.partitions[start] = PartitionInfo(start)
                if info.sealed:
                    raise BackendWriteError(f"{self.id}: partition {start} of {dataset}/{table} is sealed")
                t.path.mkdir(parents=True, exist_ok=True)
                self._write(t, start, part_rows)
                info.rows += len(part_rows)
                times = [r["_ts"] for r in part_rows]
                info.min_ts = min(times + ([info.min_ts] if info.min_ts is not None else []))
                info.max_ts = max(times + ([info.max_ts] if info.max_ts is not None else []))
            t.save()
            self.writes += len(rows)
        return len(rows)

    def _write(self, table: Table, start: int, rows: list[dict]) -> None:
        raise NotImplementedError

    def _read(self, table: Table, start: int) -> list[dict]:
        raise NotImplementedError

    def _replace(self, table: Table, start: int, rows: list[dict]) -> None:
        raise NotImplementedError

    def flush(self) -> None:
        pass

    def seal(self, before: int | None = None) -> int:
        """Seal partitions ending at or before ``before`` (all when None)."""
        sealed = 0
        with self.lock:
            self.flush()
            for (dataset, name) in self.tables():
                t = self.table(dataset, name)
                for info in t.partitions.values():
                    if not info.sealed and (before is None or info.start + t.partition <= before):
                        info.sealed = True
                        sealed += 1
                t.save()
        return sealed

    # -- reading ----------------------------------------------------------------

    def scan(
        self,
        dataset: str,
        table: str,
        start: int | None = None,
        end: int | None = None,
        predicates: Iterable[Predicate] = (),
        stream: str | None = None,
    ) -> list[dict]:
        """Rows in ``[start, end)`` satisfying every predicate, pruning
        partitions by their min/max index."""
        predicates = list(predicates)
        with self.lock:
            t = self.table(dataset, table)
            parts = sorted(p.start for p in t.partitions.values() if p.overlaps(start, end))
            if not parts:
                return []
            out = []
            for p in parts:
                out += self._read_filtered(t, p, start, end, predicates)
        return [
            r
            for r in out
            if (stream is None or r.get("_stream") == stream)
            and (start is None or r["_ts"] >= start)
            and (end is None or r["_ts"] < end)
            and all(pred.test(r) for pred in predicates)
        ]

    def _read_filtered(self, table: Table, start: int, lo, hi, predicates: list[Predicate]) -> list[dict]:
        return self._read(table, start)

    def aggregate(
        self,
        dataset: str,
        table: str,
        field: str | None,
        start: int | None = None,
        end: int | None = None,
        predicates: Iterable[Predicate] = (),
        stream: str | None = None,
        bucket: int | None = None,
    ) -> dict[int | None, Partial]:
        """Per-bucket partial aggregates of ``field`` (rows counted when None)."""
        out: dict[int | None, Partial] = {}
        for row in self.scan(dataset, table, start, end, predicates, stream):
            key = (row["_ts"] // bucket) * bucket if bucket else None
            out.setdefault(key, Partial()).add_row(row, field)
        return out

    # -- retention ----------------------------------------------------------------

    def compact(self, before: int, bucket: int = HOUR) -> int:
        """Replace raw partitions ending before ``before`` by per-stream
        aggregate rows of ``bucket`` width; returns partitions compacted.

        Aggregate rows hold the average of every numeric field and carry
        ``_count`` with the number of raw rows they stand for.
        """
        done = 0
        with self.lock:
            self.flush()
            for (dataset, name) in self.tables():
                t = self.table(dataset, name)
                for info in sorted(t.partitions.values(), key=lambda p: p.start):
                    if info.compacted or info.start + t.partition > before:
                        continue
                    rows = self._read(t, info.start)
                    groups: dict[tuple, list[dict]] = defaultdict(list)
                    for r in rows:
                        groups[(r.get("_stream"), (r["_ts"] // bucket) * bucket)].append(r)
                    compacted = []
                    for (stream, ts), members in sorted(groups.items(), key=lambda g: (str(g[0][0]), g[0][1])):
                        row: dict[str, Any] = {"_ts": ts, "_stream": stream, "_seq": 0, "_count": len(members)}
                        fields = {k for m in members for k in m if k not in META_COLUMNS and k != "_count"}
                        for f in sorted(fields):
                            values = [m[f] for m in members if isinstance(m.get(f), (int, float)) and not isinstance(m.get(f), bool)]
                            if values:
                                row[f] = math.fsum(values) / len(values)
                        compacted.append(row)
                    self._replace(t, info.start, compacted)
                    info.rows = len(compacted)
                    info.compacted = True
                    info.sealed = True
                    done += 1
                t.save()
        if done:
            logging.info(f"Backend {self.id}: compacted {done} partition(s).")
        return done


class RowLogBackend(Backend):
    kind = BackendKind.ROW_LOG

    def _write(self, table: Table, start: int, rows: list[dict]) -> None:
        with open(table.segment(start), "a", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, default=str) + "\n")

    def _read(self, table: Table, start: int) -> list[dict]:
        path = table.segment(start)
        if not path.exists():
            return []
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def _replace(self, table: Table, start: int, rows: list[dict]) -> None:
        path = table.segment(start)
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, default=str) + "\n")
        tmp.replace(path)


class DocumentLogBackend(RowLogBackend):
    kind = BackendKind.DOCUMENT_LOG

    @staticmethod
    def _nest(row: dict) -> dict:
        return {
            "ts": row["_ts"],
            "stream": row.get("_stream"),
            "seq": row.get("_seq", 0),
            "doc": {k: v for k, v in row.items() if k not in META_COLUMNS},
        }

    @staticmethod
    def _flatten(doc: dict) -> dict:
        row = {"_ts": doc["ts"], "_stream": doc.get("stream"), "_seq": doc.get("seq", 0)}
        row.update(doc.get("doc") or {})
        return row

    def _write(self, table: Table, start: int, rows: list[dict]) -> None:
        super()._write(table, start, [self._nest(r) for r in rows])

    def _read(self, table: Table, start: int) -> list[dict]:
        return [self._flatten(d) for d in super()._read(table, start)]

    def _replace(self, table: Table, start: int, rows: list[dict]) -> None:
        super()._replace(table, start, [self._nest(r) for r in rows])


class ColumnarBackend(Backend):
    """Parquet segments; rows of the active partitions stay buffered until
    ``flush_rows`` accumulate or the backend flushes."""

    kind = BackendKind.COLUMNAR

    def __init__(self, id: str, root: str | Path, partition: int = HOUR, flush_rows: int = 1000):
        super().__init__(id, root, partition)
        self.flush_rows = flush_rows
        self._buffers: dict[tuple[Path, int], list[dict]] = defaultdict(list)

    def _write(self, table: Table, start: int, rows: list[dict]) -> None:
        buffer = self._buffers[(table.path, start)]
        buffer += rows
        if len(buffer) >= self.flush_rows:
            self._flush_one(table.path, start)

    def _flush_one(self, path: Path, start: int) -> None:
        rows = self._buffers.pop((path, start), [])
        if not rows:
            return
        segment = path / f"{start}.seg"
        existing = _rows(pq.read_table(segment)) if segment.exists() else []
        self._write_segment(segment, existing + rows)

    def _write_segment(self, segment: Path, rows: list[dict]) -> None:
        columns: dict[str, None] = {}
        for row in rows:
            columns.update(dict.fromkeys(row))
        try:
            table = pa.table({name: [row.get(name) for row in rows] for name in columns})
        except (pa.ArrowInvalid, pa.ArrowTypeError) as e:
            raise BackendWriteError(f"{self.id}: rows do not fit a columnar segment: {e}") from e
        tmp = segment.with_suffix(".tmp")
        pq.write_table(table, tmp)
        tmp.replace(segment)

    def flush(self) -> None:
        with self.lock:
            for path, start in list(self._buffers):
                self._flush_one(path, start)

    def _read(self, table: Table, start: int) -> list[dict]:
        segment = table.segment(start)
        rows = _rows(pq.read_table(segment)) if segment.exists() else []
        return rows + list(self._buffers.get((table.path, start), []))

    def _read_filtered(self, table: Table, start: int, lo, hi, predicates: list[Predicate]) -> list[dict]:
        segment = table.segment(start)
        buffered = list(self._buffers.get((table.path, start), []))
        if not segment.exists():
            return buffered
        filters = []
        if lo is not None:
            filters.append(("_ts", ">=", lo))
        if hi is not None:
            filters.append(("_ts", "<", hi))
        filters += [(p.field, _ARROW_OPS[p.op], p.value) for p in predicates]
        try:
            rows = _rows(pq.read_table(segment, filters=filters or None))
        except (pa.ArrowInvalid, pa.ArrowNotImplementedError, pa.ArrowTypeError, KeyError):
            rows = _rows(pq.read_table(segment))
        return rows + buffered

    def _replace(self, table: Table, start: int, rows: list[dict]) -> None:
        self._buffers.pop((table.path, start), None)
        if rows:
            self._write_segment(table.segment(start), rows)
        elif table.segment(start).exists():
            table.segment(start).unlink()


def _rows(table: pa.Table) -> list[dict]:
    # absent fields come back as nulls
    return [{k: v for k, v in row.items() if v is not None} for row in table.to_pylist()]


BACKEND_CLASSES = {
    BackendKind.COLUMNAR: ColumnarBackend,
    BackendKind.ROW_LOG: RowLogBackend,
    BackendKind.DOCUMENT_LOG: DocumentLogBackend,
}

DEFAULT_BACKENDS = (
    {"id": "timeseries", "kind": "columnar-file"},
    {"id": "relational", "kind": "row-log"},
    {"id": "documents", "kind": "document-log"},
)


def make_backend(id: str, kind: str | BackendKind, root: str | Path, partition: int = HOUR) -> Backend:
    try:
        cls = BACKEND_CLASSES[BackendKind(kind)]
    except ValueError:
        raise BadRequestError(f"unknown backend kind {kind}") from None
    return cls(id, root, partition)


@dataclass
class RouteResult:
    written: list[tuple[str, str]] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)


class Storage:
    """The set of backends plus routing of events to them."""

    def __init__(
        self,
        root: str | Path,
        backends: Iterable[Mapping] = DEFAULT_BACKENDS,
        partition: int = HOUR,
        retention: int = 30 * DAY,
        retries: int = 3,
        broker: Broker | None = None,
    ):
        self.root = Path(root)
        self.partition = partition
        self.retention = retention
        self.retries = retries
        self.broker = broker
        self.backends: dict[str, Backend] = {}
        for item in backends:
            if item["id"] in self.backends:
                raise BadRequestError(f"backend id {item['id']} is declared twice")
            self.backends[item["id"]] = make_backend(item["id"], item["kind"], self.root, partition)
        self.unrouted = 0
        self._subscription: Subscription | None = None
        self._routes: dict[str, list[StorageSpec]] = {}

    def backend(self, backend_id: str) -> Backend:
        try:
            return self.backends[backend_id]
        except KeyError:
            raise NotFoundError(f"unknown backend {backend_id}") from None

    def route(self, event: Event, specs: Iterable[StorageSpec], stream: str | None = None) -> RouteResult:
        """Append the stored-field projection of ``event`` once per spec."""
        result = RouteResult()
        specs = list(specs)
        if not specs:
            self.unrouted += 1
            return result
        payload = event.payload if isinstance(event.payload, Mapping) else {}
        for spec in specs:
            row = {"_ts": event.event_time, "_stream": stream or spec.stream, "_seq": event.sequence}
            for name in spec.fields:
                value = get_path(payload, name)
                if value is not MISSING:
                    row[name] = value
            backend = self.backend(spec.backend)
            for attempt in range(1, self.retries + 1):
                try:
                    backend.append(spec.dataset, spec.table, [row])
                    result.written.append((spec.backend, spec.table))
                    break
                except (OSError, BackendWriteError) as e:
                    if attempt == self.retries:
                        result.failed.append(spec.id)
                        logging.warning(f"Write of {event.topic}#{event.sequence} to {spec.backend} failed: {e}")
                        if self.broker is not None:
                            self.broker.dead_letter(event.topic, payload, f"storage write failed: {e}", spec=spec.id)
                    else:
                        time.sleep(0.01 * attempt)
        return result

    def attach(self, broker: Broker, store: GraphStore) -> Subscription:
        """Subscribe to every topic with storage specs and route its events."""
        self.broker = broker
        self.refresh_routes(store)
        self._subscription = broker.subscribe(sorted(self._routes), callback=self._on_event)
        logging.info(f"Storage routing {len(self._routes)} topic(s) to {len(self.backends)} backend(s).")
        return self._subscription

    def refresh_routes(self, store: GraphStore) -> dict[str, list[StorageSpec]]:
        routes: dict[str, list[StorageSpec]] = defaultdict(list)
        for spec in extract_storage_specs(store):
            topic = topic_of(store, stream_iri(spec.stream))
            if topic is not None:
                routes[topic].append(spec)
        self._routes = dict(routes)
        if self._subscription is not None:
            for topic in self._routes:
                if topic not in self._subscription.topics:
                    self._subscription.add_topic(topic)
        return self._routes

    def _on_event(self, event: Event) -> None:
        self.route(event, self._routes.get(event.topic, []))

    def seal(self, before: int | None = None) -> int:
        return sum(b.seal(before) for b in self.backends.values())

    def compact(self, now: int) -> dict[str, int]:
        """Apply the retention policy at time ``now``."""
        return {bid: b.compact(now - self.retention) for bid, b in self.backends.items()}

    def close(self) -> None:
        if self._subscription is not None:
            self._subscription.close()
            self._subscription = None
        for b in self.backends.values():
            b.flush()

    def describe(self) -> dict[str, Any]:
        return {
            bid: {
                "kind": b.kind.value,
                "rows": b.writes,
                "tables": [f"{d}/{t}" for d, t in b.tables()],
            }
            for bid, b in self.backends.items()
        } | {"unrouted": self.unrouted}


def iter_rows(storage: Storage) -> Iterator[tuple[str, str, str, dict]]:
    """Every stored row as (backend, dataset, table, row)."""
    for bid, backend in storage.backends.items():
        for dataset, table in backend.tables():
            for row in backend.scan(dataset, table):
                yield bid, dataset, table, row
