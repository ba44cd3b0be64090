"""Historical queries over the storage backends.

A query names a sensor; the graph gives the sensor's streams, the agent's
access to each and the storage specs placing them on backends. The planner
emits one subplan per accessible stream and backend, pushing the time range,
field predicates and decomposable aggregates down; the executor runs the
subplans in parallel and merges them deterministically.
"""
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping

from .access import AgentContext, accessible_many
from .errors import AccessDeniedError, BadRequestError, FederationError, NotFoundError
from .graphs import A, IOE, PROV, StorageSpec, data_iri, extract_storage_specs, stream_fields, stream_id
from .kg import GraphStore, term_key
from .storage import Partial, Predicate, Storage
from .units import parse_duration, parse_timestamp

AGGREGATES = ("avg", "min", "max", "count", "sum")

_WHERE = re.compile(r"^\s*([\w.\-]+)\s*(<=|>=|!=|==|=|<|>|≤|≥)\s*(.+?)\s*$")


@dataclass(frozen=True)
class Aggregate:
    function: str
    field: str | None = None
    bucket: int | None = None

    def __post_init__(self):
        if self.function not in AGGREGATES:
            raise BadRequestError(f"aggregate must be one of {', '.join(AGGREGATES)}")
        if self.function != "count" and not self.field:
            raise BadRequestError(f"{self.function} needs a field")


@dataclass
class HistoricalQuery:
    sensor: str
    start: int | None = None
    end: int | None = None
    predicates: list[Predicate] = field(default_factory=list)
    aggregate: Aggregate | None = None
    sort: tuple[str, bool] | None = None
    limit: int | None = None
    token: str | None = None

    @classmethod
    def from_document(cls, document: Mapping) -> "HistoricalQuery":
        """Build a query from its request document.

        ``where`` holds strings like ``"CO2>1000"`` or ``[field, op, value]``
        triples; ``agg`` is ``{function, field, bucket}`` or ``"avg:CO2"``;
        ``sort`` is a field name, prefixed with ``-`` for descending order.
        """
        if not document.get("sensor"):
            raise BadRequestError("a historical query needs a sensor")
        try:
            start = parse_timestamp(document["from"]) if document.get("from") is not None else None
            end = parse_timestamp(document["to"]) if document.get("to") is not None else None
        except ValueError as e:
            raise BadRequestError(f"bad time range: {e}") from e
        where = document.get("where") or []
        if isinstance(where, (str, Mapping)):
            where = [where]
        predicates = [parse_predicate(w) for w in where]
        aggregate = _parse_aggregate(document.get("agg"), document.get("bucket"))
        sort = None
        if document.get("sort"):
            name = str(document["sort"])
            sort = (name.lstrip("-"), name.startswith("-"))
        limit = document.get("limit")
        if limit is not None and (not isinstance(limit, int) or limit < 0):
            raise BadRequestError("limit must be a non-negative integer")
        return cls(
            sensor=str(document["sensor"]),
            start=start,
            end=end,
            predicates=predicates,
            aggregate=aggregate,
            sort=sort,
            limit=limit,
            token=document.get("token"),
        )


def _literal(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return text


def parse_predicate(item: Any) -> Predicate:
    if isinstance(item, Predicate):
        return item
    if isinstance(item, (list, tuple)) and len(item) == 3:
        return Predicate(str(item[0]), str(item[1]), item[2])
    if isinstance(item, Mapping):
        return Predicate(str(item["field"]), str(item["op"]), item["value"])
    match = _WHERE.match(str(item))
    if match is None:
        raise BadRequestError(f"cannot read predicate {item!r}")
    return Predicate(match[1], match[2], _literal(match[3]))


def _parse_aggregate(agg: Any, bucket: Any) -> Aggregate | None:
    if not agg:
        return None
    try:
        bucket_ms = parse_duration(bucket) if bucket else None
        if isinstance(agg, Mapping):
            b = agg.get("bucket")
            return Aggregate(agg["function"], agg.get("field"), parse_duration(b) if b else bucket_ms)
        function, _, name = str(agg).partition(":")
        return Aggregate(function, name or None, bucket_ms)
    except (KeyError, ValueError) as e:
        raise BadRequestError(f"bad aggregate: {e}") from e


@dataclass
class Subplan:
    id: str
    stream: str
    backend: str
    dataset: str
    table: str
    predicates: list[Predicate]
    field: str | None
    # local field name -> output column name
    columns: dict[str, str]


@dataclass
class FederatedPlan:
    query: HistoricalQuery
    shape: str
    subplans: list[Subplan]
    denied: list[str]
    # aggregate pushed down per subplan; otherwise computed at merge
    pushdown: bool
    stats: dict[str, float] = field(default_factory=dict)


@dataclass
class ResultSet:
    columns: list[str]
    rows: list[dict]
    provenance: list[str]
    stats: dict[str, float]

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": self.rows, "provenance": self.provenance, "stats": self.stats}


def _resolve_name(name: str, local_names: set[str], canonical: dict[str, str], stream: str) -> str:
    if name in local_names:
        return name
    if name in canonical:
        return canonical[name]
    raise BadRequestError(f"field {name} is not in the schema of stream {stream}")


def plan(q: HistoricalQuery, ctx: AgentContext, store: GraphStore, storage: Storage | None = None) -> FederatedPlan:
    started = time.perf_counter()
    sensor = data_iri(q.sensor)
    with store.lock.read():
        if not store.triples(sensor, A, IOE.System):
            raise NotFoundError(f"unknown sensor {sensor.value}")
        streams = sorted(store.subjects(PROV.wasAttributedTo, sensor), key=term_key)
        if not streams:
            raise NotFoundError(f"sensor {sensor.value} has no streams")
        decisions = accessible_many(ctx, streams, store)
        granted = [s for s in streams if decisions[s].granted]
        denied = [s.value for s in streams if not decisions[s].granted]
        if not granted:
            raise AccessDeniedError(f"no stream of {sensor.value} is accessible", denied)
        resolved_at = time.perf_counter()

        specs: dict[str, list[StorageSpec]] = {}
        for spec in extract_storage_specs(store):
            specs.setdefault(spec.stream, []).append(spec)
        layouts = {s: stream_fields(store, s) for s in granted}

    subplans = []
    per_stream: dict[str, int] = {}
    for stream in granted:
        sid = stream_id(stream)
        fields = layouts[stream]
        local_names = {f.name for f in fields}
        canonical = {f.canonical: f.name for f in fields if f.canonical}
        output = {f.name: f.canonical or f.name for f in fields}
        predicates = [
            Predicate(_resolve_name(p.field, local_names, canonical, sid), p.op, p.value) for p in q.predicates
        ]
        agg_field = None
        if q.aggregate is not None and q.aggregate.field:
            agg_field = _resolve_name(q.aggregate.field, local_names, canonical, sid)
        needed = {p.field for p in predicates} | ({agg_field} if agg_field else set())
        candidates = [s for s in specs.get(sid, []) if needed <= set(s.fields)]
        if specs.get(sid) and not candidates:
            raise BadRequestError(f"no storage of stream {sid} keeps {', '.join(sorted(needed))}")
        for spec in sorted(candidates, key=lambda s: (s.backend, s.dataset, s.table)):
            if storage is not None and spec.backend not in storage.backends:
                continue
            subplans.append(
                Subplan(
                    id=f"{sid}@{spec.backend}/{spec.dataset}/{spec.table}",
                    stream=sid,
                    backend=spec.backend,
                    dataset=spec.dataset,
                    table=spec.table,
                    predicates=predicates,
                    field=agg_field,
                    columns={name: output.get(name, name) for name in spec.fields},
                )
            )
            per_stream[sid] = per_stream.get(sid, 0) + 1

    if q.aggregate is not None:
        shape = "aggregation"
    elif q.predicates:
        shape = "filter2"
    else:
        shape = "filter1"
    result = FederatedPlan(
        query=q,
        shape=shape,
        subplans=subplans,
        denied=denied,
        pushdown=all(n == 1 for n in per_stream.values()),
    )
    finished = time.perf_counter()
    result.stats = {
        "kg_resolve_ms": (resolved_at - started) * 1000,
        "plan_ms": (finished - resolved_at) * 1000,
    }
    logging.debug(f"Planned {shape} query on {q.sensor}: {len(subplans)} subplan(s), {len(denied)} stream(s) denied.")
    return result


def _run(sub: Subplan, q: HistoricalQuery, storage: Storage, pushdown: bool):
    backend = storage.backend(sub.backend)
    if q.aggregate is not None and pushdown:
        return backend.aggregate(
            sub.dataset,
            sub.table,
            sub.field,
            q.start,
            q.end,
            sub.predicates,
            stream=sub.stream,
            bucket=q.aggregate.bucket,
        )
    return backend.scan(sub.dataset, sub.table, q.start, q.end, sub.predicates, stream=sub.stream)


def _sort_rows(rows: list[dict], provenance: list[str], sort: tuple[str, bool] | None, order_key) -> tuple[list, list]:
    pairs = sorted(zip(rows, provenance), key=lambda pair: order_key(pair[0]))
    if sort is not None:
        name, descending = sort
        present = [p for p in pairs if _column(p[0], name) is not None]
        missing = [p for p in pairs if _column(p[0], name) is None]
        present.sort(key=lambda p: _column(p[0], name), reverse=descending)
        pairs = present + missing
    return [r for r, _ in pairs], [b for _, b in pairs]


def _column(row: dict, name: str) -> Any:
    if name in row:
        return row[name]
    return (row.get("fields") or {}).get(name)


def execute(fplan: FederatedPlan, storage: Storage, parallel: bool = True) -> ResultSet:
    q = fplan.query
    started = time.perf_counter()
    results: list = [None] * len(fplan.subplans)
    if parallel and len(fplan.subplans) > 1:
        with ThreadPoolExecutor(max_workers=min(8, len(fplan.subplans)), thread_name_prefix="federation") as pool:
            futures = [pool.submit(_run, sub, q, storage, fplan.pushdown) for sub in fplan.subplans]
            for i, (sub, future) in enumerate(zip(fplan.subplans, futures)):
                try:
                    results[i] = future.result()
                except Exception as e:
                    raise FederationError(f"subplan {sub.id} failed: {e}", sub.id) from e
    else:
        for i, sub in enumerate(fplan.subplans):
            try:
                results[i] = _run(sub, q, storage, fplan.pushdown)
            except Exception as e:
                raise FederationError(f"subplan {sub.id} failed: {e}", sub.id) from e
    scanned = time.perf_counter()

    if q.aggregate is not None:
        columns, rows, provenance = _merge_aggregate(fplan, results)
    else:
        columns, rows, provenance = _merge_rows(fplan, results)
    if q.limit is not None:
        rows, provenance = rows[: q.limit], provenance[: q.limit]
    merged = time.perf_counter()
    stats = dict(fplan.stats)
    stats.update(
        {
            "scan_ms": (scanned - started) * 1000,
            "merge_ms": (merged - scanned) * 1000,
            "subplans": len(fplan.subplans),
        }
    )
    stats["total_ms"] = stats["kg_resolve_ms"] + stats["plan_ms"] + stats["scan_ms"] + stats["merge_ms"]
    return ResultSet(columns=columns, rows=rows, provenance=provenance, stats=stats)


def _merge_rows(fplan: FederatedPlan, results: list) -> tuple[list[str], list[dict], list[str]]:
    rows, provenance = [], []
    seen = set()
    columns = ["stream", "event_time"]
    for sub, raw in zip(fplan.subplans, results):
        for r in raw:
            identity = (sub.stream, r.get("_seq"), r["_ts"])
            if r.get("_seq") and identity in seen:
                continue
            seen.add(identity)
            row = {"stream": sub.stream, "event_time": r["_ts"]}
            for local, out in sub.columns.items():
                if local in r:
                    row[out] = r[local]
                    if out not in columns:
                        columns.append(out)
            rows.append(row)
            provenance.append(sub.backend)
    rows, provenance = _sort_rows(
        rows, provenance, fplan.query.sort, lambda r: (r["stream"], r["event_time"])
    )
    return columns, rows, provenance


def _merge_aggregate(fplan: FederatedPlan, results: list) -> tuple[list[str], list[dict], list[str]]:
    agg = fplan.query.aggregate
    partials: dict[Any, Partial] = {}
    sources: dict[Any, set[str]] = {}
    if fplan.pushdown:
        for sub, parts in zip(fplan.subplans, results):
            for key, partial in parts.items():
                partials.setdefault(key, Partial()).merge(partial)
                sources.setdefault(key, set()).add(sub.backend)
    else:
        seen = set()
        for sub, raw in zip(fplan.subplans, results):
            for r in raw:
                identity = (sub.stream, r.get("_seq"), r["_ts"])
                # compacted rows share _seq 0 but are unique per stream and bucket
                if (r.get("_seq") or "_count" in r) and identity in seen:
                    continue
                seen.add(identity)
                key = (r["_ts"] // agg.bucket) * agg.bucket if agg.bucket else None
                partials.setdefault(key, Partial()).add_row(r, sub.field)
                sources.setdefault(key, set()).add(sub.backend)
    columns = (["bucket"] if agg.bucket else []) + ["value", "count"]
    rows, provenance = [], []
    for key in sorted(partials, key=lambda k: (k is None, k or 0)):
        partial = partials[key]
        if agg.field and partial.minimum is None and agg.function != "count":
            continue
        row = {"bucket": key} if agg.bucket else {}
        row["value"] = partial.result(agg.function)
        row["count"] = partial.count
        rows.append(row)
        provenance.append(",".join(sorted(sources[key])))
    if fplan.query.sort is not None:
        rows, provenance = _sort_rows(rows, provenance, fplan.query.sort, lambda r: r.get("bucket") or 0)
    return columns, rows, provenance


def historical_query(
    q: HistoricalQuery | Mapping, ctx: AgentContext, store: GraphStore, storage: Storage
) -> ResultSet:
    if not isinstance(q, HistoricalQuery):
        q = HistoricalQuery.from_document(q)
    return execute(plan(q, ctx, store, storage), storage)
