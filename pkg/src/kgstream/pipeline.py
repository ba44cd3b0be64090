"""Declarative pipeline model.

A pipeline is a DAG of operator nodes joined by typed stream edges. This
module holds the model, its static validation, reconstruction from the
transformation graph and output-schema inference; ``kgstream.executor`` runs
validated specs.
"""
import json
import logging
import operator
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

import networkx as nx

from .errors import BuildError, ReconstructionError
from .formats import load_document
from .graphs import (
    A,
    KGS,
    NODE_CLASSES,
    ST,
    WINDOW_PROPERTIES,
    ValueDomain,
    data_iri,
    local_id,
    pipeline_iri,
    stream_fields,
    stream_id,
    stream_iri,
    topic_of,
)
from .kg import GraphStore, Term, term_key
from .units import parse_duration


class NodeKind(Enum):
    SOURCE = "source"
    MAP = "map"
    FILTER = "filter"
    KEY_BY = "key-by"
    AGGREGATE = "aggregate"
    UNION = "union"
    SINK = "sink"


class StreamKind(Enum):
    RAW = "raw"
    KEYED = "keyed"
    WINDOWED = "windowed"


class WindowKind(Enum):
    TUMBLING = "tumbling"
    HOPPING = "hopping"
    SESSION = "session"
    COUNT = "count"


AGGREGATE_FUNCTIONS = ("sum", "avg", "min", "max", "count")
NUMERIC_FUNCTIONS = ("sum", "avg", "min", "max")
SINK_KINDS = ("broker", "file", "console")

COMPARISONS = {
    "=": operator.eq,
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    ">": operator.gt,
    "<=": operator.le,
    ">=": operator.ge,
}

ARITHMETIC = {
    "+": operator.add,
    "-": operator.sub,
    "*": operator.mul,
    "/": operator.truediv,
}


@dataclass(frozen=True)
class WindowConfig:
    kind: WindowKind
    duration: int | None = None
    hop: int | None = None
    gap: int | None = None
    size: int | None = None

    @classmethod
    def from_dict(cls, data: Mapping) -> "WindowConfig":
        try:
            kind = WindowKind(data["kind"])
        except (KeyError, ValueError):
            raise BuildError(f"window needs a kind out of {', '.join(k.value for k in WindowKind)}") from None
        unknown = set(data) - {"kind", "duration", "hop", "gap", "size"}
        if unknown:
            raise BuildError(f"unknown window keys: {', '.join(sorted(unknown))}")
        try:
            return cls(
                kind=kind,
                duration=parse_duration(data["duration"]) if data.get("duration") is not None else None,
                hop=parse_duration(data["hop"]) if data.get("hop") is not None else None,
                gap=parse_duration(data["gap"]) if data.get("gap") is not None else None,
                size=int(data["size"]) if data.get("size") is not None else None,
            )
        except ValueError as e:
            raise BuildError(f"invalid window: {e}") from e

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind.value}
        for name in ("duration", "hop", "gap", "size"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out


@dataclass
class NodeSpec:
    id: str
    kind: NodeKind
    params: dict[str, Any] = field(default_factory=dict)
    window: WindowConfig | None = None


@dataclass(frozen=True)
class EdgeSpec:
    source: str
    target: str
    kind: StreamKind = StreamKind.RAW


@dataclass
class PipelineSpec:
    id: str
    nodes: list[NodeSpec] = field(default_factory=list)
    edges: list[EdgeSpec] = field(default_factory=list)

    def node(self, node_id: str) -> NodeSpec:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    def inputs(self, node_id: str) -> list[EdgeSpec]:
        return [e for e in self.edges if e.target == node_id]

    def outputs(self, node_id: str) -> list[EdgeSpec]:
        return [e for e in self.edges if e.source == node_id]

    def sources(self) -> list[NodeSpec]:
        return [n for n in self.nodes if n.kind is NodeKind.SOURCE]

    def sinks(self) -> list[NodeSpec]:
        return [n for n in self.nodes if n.kind is NodeKind.SINK]

    def graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(n.id for n in self.nodes)
        graph.add_edges_from((e.source, e.target) for e in self.edges)
        return graph

    def topological_order(self) -> list[str]:
        """Node ids in a topological order that follows declaration order
        where the DAG leaves a choice."""
        return _declaration_order(self, self.graph())


def _declaration_order(spec: "PipelineSpec", graph: nx.DiGraph) -> list[str]:
    position = {n.id: i for i, n in enumerate(spec.nodes)}
    return list(nx.lexicographical_topological_sort(graph, key=position.__getitem__))


# -- validation -------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    rule: str
    node: str | None
    message: str

    def __str__(self) -> str:
        where = f" at {self.node}" if self.node else ""
        return f"{self.rule}{where}: {self.message}"


@dataclass
class ValidationReport:
    pipeline: str
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def add(self, rule: str, node: str | None, message: str) -> None:
        self.violations.append(Violation(rule, node, message))


def validate(spec: PipelineSpec, field_domains: Mapping[str, ValueDomain] | None = None) -> ValidationReport:
    """Static checks over a spec; returns every violation found.

    ``field_domains`` maps field names of the pipeline's input streams to the
    value domain of their canonical property; when given, numeric aggregates
    over non-numeric fields are reported.
    """
    report = ValidationReport(spec.id)
    ids = [n.id for n in spec.nodes]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    for dup in duplicates:
        report.add("reference", dup, "duplicate node id")
    known = set(ids)
    edges = []
    for e in spec.edges:
        missing = [x for x in (e.source, e.target) if x not in known]
        if missing:
            report.add("reference", None, f"edge {e.source} -> {e.target} names unknown node(s) {', '.join(missing)}")
        else:
            edges.append(e)

    graph = nx.DiGraph()
    graph.add_nodes_from(ids)
    graph.add_edges_from((e.source, e.target) for e in edges)
    acyclic = nx.is_directed_acyclic_graph(graph)
    if not acyclic:
        cycle = [u for u, _ in nx.find_cycle(graph)]
        report.add("acyclicity", cycle[0], f"cycle {' -> '.join(cycle + [cycle[0]])}")

    for node in spec.nodes:
        has_in = graph.in_degree(node.id) > 0
        has_out = graph.out_degree(node.id) > 0
        if node.kind is NodeKind.SOURCE and has_in:
            report.add("placement", node.id, "source node has incoming edges")
        elif node.kind is not NodeKind.SOURCE and not has_in:
            report.add("placement", node.id, f"{node.kind.value} node has no input")
        if node.kind is NodeKind.SINK and has_out:
            report.add("placement", node.id, "sink node has outgoing edges")
        elif node.kind is not NodeKind.SINK and not has_out:
            report.add("placement", node.id, f"{node.kind.value} node has no output")
        _check_params(node, report, field_domains)

    if acyclic and not duplicates:
        _check_stream_kinds(spec, graph, edges, report)
    return report


def _check_params(node: NodeSpec, report: ValidationReport, field_domains: Mapping[str, ValueDomain] | None) -> None:
    p = node.params
    kind = node.kind
    if node.window is not None and kind is not NodeKind.AGGREGATE:
        report.add("window", node.id, "only aggregate nodes take a window")
    if kind is NodeKind.SOURCE:
        if not p.get("stream") and not p.get("topic"):
            report.add("params", node.id, "source needs a stream or a topic")
        if p.get("lateness") is not None:
            try:
                if parse_duration(p["lateness"]) < 0:
                    report.add("params", node.id, "lateness must not be negative")
            except ValueError as e:
                report.add("params", node.id, f"lateness: {e}")
    elif kind is NodeKind.MAP:
        if not any(k in p for k in ("select", "rename", "compute")):
            report.add("params", node.id, "map needs select, rename or compute")
        if "select" in p and not isinstance(p["select"], list):
            report.add("params", node.id, "select must be a list of fields")
        if "rename" in p and not isinstance(p["rename"], Mapping):
            report.add("params", node.id, "rename must map old to new names")
        for name, expr in (p.get("compute") or {}).items():
            if not (isinstance(expr, list) and len(expr) == 3 and expr[1] in ARITHMETIC):
                report.add("params", node.id, f"compute {name} must be [field, op, constant] with op in + - * /")
    elif kind is NodeKind.FILTER:
        if not p.get("field"):
            report.add("params", node.id, "filter needs a field")
        if p.get("op") not in COMPARISONS:
            report.add("params", node.id, f"filter op must be one of {' '.join(COMPARISONS)}")
        if "value" not in p:
            report.add("params", node.id, "filter needs a value")
    elif kind is NodeKind.KEY_BY:
        if not p.get("field"):
            report.add("params", node.id, "key-by needs a field")
    elif kind is NodeKind.AGGREGATE:
        function = p.get("function")
        if function not in AGGREGATE_FUNCTIONS:
            report.add("params", node.id, f"aggregate function must be one of {', '.join(AGGREGATE_FUNCTIONS)}")
        if function != "count" and not p.get("field"):
            report.add("params", node.id, f"{function} needs a field")
        if node.window is None:
            report.add("window", node.id, "aggregate needs a window")
        else:
            _check_window(node, report)
        if field_domains is not None and function in NUMERIC_FUNCTIONS and p.get("field"):
            domain = field_domains.get(p["field"])
            if domain is not None and not domain.numeric:
                report.add("typing", node.id, f"{function} over non-numeric field {p['field']} ({domain.value})")
    elif kind is NodeKind.SINK:
        target = p.get("kind", "console")
        if target not in SINK_KINDS:
            report.add("params", node.id, f"sink kind must be one of {', '.join(SINK_KINDS)}")
        if target == "file" and not p.get("path"):
            report.add("params", node.id, "file sink needs a path")


def _check_window(node: NodeSpec, report: ValidationReport) -> None:
    w = node.window
    required = {
        WindowKind.TUMBLING: ("duration",),
        WindowKind.HOPPING: ("duration", "hop"),
        WindowKind.SESSION: ("gap",),
        WindowKind.COUNT: ("size",),
    }[w.kind]
    for name in required:
        value = getattr(w, name)
        if value is None or value <= 0:
            report.add("window", node.id, f"{w.kind.value} window needs {name} > 0")
    # wider hops leave gaps no window covers
    if w.kind is WindowKind.HOPPING and w.hop and w.duration and w.hop > w.duration:
        report.add("window", node.id, f"hopping window hop {w.hop} exceeds its duration {w.duration}")


def _accepts(kind: NodeKind) -> set[StreamKind]:
    if kind in (NodeKind.MAP, NodeKind.FILTER, NodeKind.UNION, NodeKind.SINK):
        return {StreamKind.RAW, StreamKind.KEYED}
    if kind is NodeKind.KEY_BY:
        return {StreamKind.RAW}
    if kind is NodeKind.AGGREGATE:
        return {StreamKind.RAW, StreamKind.KEYED}
    return set()


def _output_kind(node: NodeSpec, input_kinds: list[StreamKind]) -> StreamKind:
    if node.kind is NodeKind.KEY_BY:
        return StreamKind.KEYED
    if node.kind in (NodeKind.SOURCE, NodeKind.AGGREGATE) or not input_kinds:
        return StreamKind.RAW
    return input_kinds[0]


def infer_stream_kinds(spec: PipelineSpec) -> dict[str, StreamKind]:
    """Output stream kind of every node, assuming a valid DAG."""
    kinds: dict[str, StreamKind] = {}
    for node_id in spec.topological_order():
        node = spec.node(node_id)
        ins = [kinds[e.source] for e in spec.inputs(node_id) if e.source in kinds]
        kinds[node_id] = _output_kind(node, ins)
    return kinds


def _check_stream_kinds(spec: PipelineSpec, graph: nx.DiGraph, edges: list[EdgeSpec], report: ValidationReport) -> None:
    produced: dict[str, StreamKind] = {}
    for node_id in _declaration_order(spec, graph):
        node = spec.node(node_id)
        incoming = [e for e in edges if e.target == node_id]
        for e in incoming:
            if e.source in produced and e.kind is not produced[e.source]:
                report.add(
                    "stream-kind",
                    node_id,
                    f"edge {e.source} -> {node_id} is declared {e.kind.value} but carries {produced[e.source].value}",
                )
        ins = [e.kind for e in incoming]
        accepted = _accepts(node.kind)
        for k in ins:
            if k not in accepted:
                report.add("stream-kind", node_id, f"{node.kind.value} does not accept {k.value} streams")
        if node.kind is NodeKind.UNION:
            if len(ins) < 2:
                report.add("stream-kind", node_id, "union needs at least two inputs")
            if len(set(ins)) > 1:
                report.add("stream-kind", node_id, "union inputs must share one stream kind")
        elif node.kind is not NodeKind.SOURCE and len(ins) > 1:
            report.add("stream-kind", node_id, f"{node.kind.value} takes exactly one input")
        produced[node_id] = _output_kind(node, ins)


# -- output schema ----------------------------------------------------------

def aggregate_value_field(node: NodeSpec) -> str:
    return node.params.get("as", "value")


def output_schema(spec: PipelineSpec, source_schemas: Mapping[str, Iterable[str]]) -> dict[str, list[str]]:
    """Field names reaching every sink.

    ``source_schemas`` is keyed by the stream id (or topic) a source node
    reads; unknown sources contribute no fields.
    """
    fields: dict[str, list[str]] = {}
    kinds = infer_stream_kinds(spec)
    for node_id in spec.topological_order():
        node = spec.node(node_id)
        ins = [fields[e.source] for e in spec.inputs(node_id)]
        p = node.params
        if node.kind is NodeKind.SOURCE:
            key = p.get("stream") or p.get("topic")
            out = list(source_schemas.get(key, []))
        elif node.kind is NodeKind.MAP:
            out = list(ins[0]) if ins else []
            if "select" in p:
                out = [f for f in out if f in p["select"]]
            rename = p.get("rename") or {}
            out = [rename.get(f, f) for f in out]
            out += [name for name in (p.get("compute") or {}) if name not in out]
        elif node.kind is NodeKind.AGGREGATE:
            keyed = any(kinds.get(e.source) is StreamKind.KEYED for e in spec.inputs(node_id))
            out = ["window_start", "window_end"] + (["key"] if keyed else []) + ["count", aggregate_value_field(node)]
        elif node.kind is NodeKind.UNION:
            out = []
            for schema in ins:
                out += [f for f in schema if f not in out]
        else:
            out = list(ins[0]) if ins else []
        fields[node_id] = out
    return {n.id: fields[n.id] for n in spec.sinks()}


# -- dictionaries and files -------------------------------------------------

def spec_from_dict(data: Mapping) -> PipelineSpec:
    """Build a spec from its document form.

    Edges may omit ``kind``; the kind the producing node emits is filled in.
    """
    if not isinstance(data, Mapping) or "id" not in data:
        raise BuildError("pipeline document needs an id")
    nodes = []
    for item in data.get("nodes") or []:
        try:
            kind = NodeKind(item["kind"])
        except (KeyError, ValueError, TypeError):
            raise BuildError(f"pipeline {data['id']}: node {item.get('id')} has an unknown kind") from None
        if "id" not in item:
            raise BuildError(f"pipeline {data['id']}: node without id")
        params = dict(item.get("params") or {})
        window = item.get("window") or params.pop("window", None)
        nodes.append(
            NodeSpec(
                id=str(item["id"]),
                kind=kind,
                params=params,
                window=WindowConfig.from_dict(window) if window else None,
            )
        )
    spec = PipelineSpec(id=str(data["id"]), nodes=nodes)
    raw_edges = []
    for item in data.get("edges") or []:
        try:
            raw_edges.append((str(item["from"]), str(item["to"]), item.get("kind")))
        except (KeyError, TypeError):
            raise BuildError(f"pipeline {data['id']}: edges need 'from' and 'to'") from None
    spec.edges = [EdgeSpec(a, b, StreamKind(k) if k else StreamKind.RAW) for a, b, k in raw_edges]
    if any(k is None for _, _, k in raw_edges) and spec.graph().number_of_nodes() == len(nodes):
        try:
            produced = infer_stream_kinds(spec)
        except (nx.NetworkXUnfeasible, KeyError):
            produced = {}
        spec.edges = [
            EdgeSpec(a, b, StreamKind(k) if k else produced.get(a, StreamKind.RAW)) for a, b, k in raw_edges
        ]
    return spec


def spec_to_dict(spec: PipelineSpec) -> dict:
    nodes = []
    for n in spec.nodes:
        item: dict[str, Any] = {"id": n.id, "kind": n.kind.value}
        if n.params:
            item["params"] = dict(n.params)
        if n.window is not None:
            item["window"] = n.window.to_dict()
        nodes.append(item)
    return {
        "id": spec.id,
        "nodes": nodes,
        "edges": [{"from": e.source, "to": e.target, "kind": e.kind.value} for e in spec.edges],
    }


def load_pipeline_file(path: str | Path) -> list[PipelineSpec]:
    """Pipeline specs from a YAML file holding one spec or a ``pipelines`` list."""
    document = load_document(path)
    if "pipelines" in document:
        items = document["pipelines"]
        if not isinstance(items, list):
            raise BuildError(f"{path}: 'pipelines' must be a list")
        return [spec_from_dict(i) for i in items]
    return [spec_from_dict(document)]


# -- reconstruction from the transformation graph -----------------------------

_WINDOW_KINDS = {ST[k.value.capitalize()]: k for k in WindowKind}
_STREAM_KINDS = {ST.RawStream: StreamKind.RAW, ST.KeyedStream: StreamKind.KEYED, ST.WindowedStream: StreamKind.WINDOWED}
_NODE_KINDS = {ST.Source: NodeKind.SOURCE, ST.Sink: NodeKind.SINK} | {
    cls: NodeKind(kind) for kind, cls in NODE_CLASSES.items() if kind != "source"
}


def _position(store: GraphStore, node: Term) -> tuple:
    value = store.value(node, KGS.position)
    return (int(value.value) if value is not None else 1 << 30, term_key(node))


def from_kg(pipeline: Term | str, store: GraphStore) -> PipelineSpec:
    """Rebuild a spec from the transformation graph in ``store``."""
    pnode = pipeline_iri(pipeline) if isinstance(pipeline, str) else pipeline
    if not store.triples(pnode, A, ST.Pipeline):
        raise ReconstructionError(f"{pnode.value} is not a pipeline in the graph")
    pid = local_id(pnode).removeprefix("pipeline/")

    nodes: list[NodeSpec] = []
    by_iri: dict[Term, str] = {}
    for nnode in sorted(store.objects(pnode, ST.hasNode), key=lambda n: _position(store, n)):
        node_id = local_id(nnode).rpartition("/node/")[2]
        kinds = {_NODE_KINDS[t.object] for t in store.triples(nnode, A, None) if t.object in _NODE_KINDS}
        if not node_id or len(kinds) != 1:
            raise ReconstructionError(f"node {nnode.value} of {pid} lacks an id or a single node class")
        node = NodeSpec(id=node_id, kind=kinds.pop())
        raw = store.value(nnode, KGS.params)
        if raw is not None:
            node.params = json.loads(str(raw))
        _reconstruct_node(store, pid, nnode, node)
        by_iri[nnode] = node.id
        nodes.append(node)

    edges = []
    for enode in sorted(store.objects(pnode, KGS.hasEdge), key=lambda n: _position(store, n)):
        a = store.value(enode, KGS.fromNode)
        b = store.value(enode, KGS.toNode)
        if a not in by_iri or b not in by_iri:
            raise ReconstructionError(f"edge {enode.value} of {pid} has a dangling node reference")
        kinds = [_STREAM_KINDS[t.object] for t in store.triples(enode, A, None) if t.object in _STREAM_KINDS]
        edges.append(EdgeSpec(by_iri[a], by_iri[b], kinds[0] if kinds else StreamKind.RAW))
    declared = {(e.source, e.target) for e in edges}
    for t in store.triples(None, ST.hasNext, None):
        if t.subject in by_iri or t.object in by_iri:
            if t.subject not in by_iri or t.object not in by_iri:
                raise ReconstructionError(f"hasNext from {t.subject.value} of {pid} dangles")
            if (by_iri[t.subject], by_iri[t.object]) not in declared:
                edges.append(EdgeSpec(by_iri[t.subject], by_iri[t.object]))
    spec = PipelineSpec(id=pid, nodes=nodes, edges=edges)
    logging.debug(f"Reconstructed pipeline {pid}: {len(nodes)} nodes, {len(edges)} edges.")
    return spec


def _reconstruct_node(store: GraphStore, pid: str, nnode: Term, node: NodeSpec) -> None:
    if node.kind is NodeKind.SOURCE:
        stream = store.value(nnode, ST.readsFrom)
        if stream is None:
            raise ReconstructionError(f"source {node.id} of {pid} reads from no stream")
        node.params["stream"] = stream_id(stream)
        topic = topic_of(store, stream)
        if topic is not None:
            node.params["topic"] = topic
    elif node.kind is NodeKind.SINK:
        stream = store.value(nnode, ST.writesTo)
        if stream is not None:
            node.params["stream"] = stream_id(stream)
            topic = topic_of(store, stream)
            if topic is not None:
                node.params["topic"] = topic
    elif node.kind is NodeKind.AGGREGATE:
        function = store.value(nnode, ST.aggregationFunction)
        if function is not None:
            node.params["function"] = str(function)
        wnode = store.value(nnode, ST.hasWindow)
        if wnode is None:
            raise ReconstructionError(f"aggregation {node.id} of {pid} has no window")
        kinds = [_WINDOW_KINDS[t.object] for t in store.triples(wnode, A, None) if t.object in _WINDOW_KINDS]
        if not kinds:
            raise ReconstructionError(f"window of {node.id} in {pid} has no window class")
        values = {}
        for name, prop in WINDOW_PROPERTIES.items():
            value = store.value(wnode, prop)
            if value is not None:
                values[name] = int(value.value)
        node.window = WindowConfig(kind=kinds[0], **values)


def pipelines_in(store: GraphStore) -> list[str]:
    return sorted(local_id(t.subject).removeprefix("pipeline/") for t in store.triples(None, A, ST.Pipeline))


def derived_stream_schemas(spec: PipelineSpec, store: GraphStore) -> dict[str, list[str]]:
    """Output schema of every broker sink that names a stream, keyed by that
    stream id, with source schemas read from the gathering graph."""
    schemas = {}
    for node in spec.sources():
        key = node.params.get("stream") or node.params.get("topic")
        if node.params.get("stream"):
            schemas[key] = [f.name for f in stream_fields(store, stream_iri(node.params["stream"]))]
    sinks = output_schema(spec, schemas)
    out = {}
    for node in spec.sinks():
        if node.params.get("kind") == "broker" and node.params.get("stream"):
            out[node.params["stream"]] = sinks[node.id]
    return out


def field_domains(spec: PipelineSpec, store: GraphStore) -> dict[str, ValueDomain]:
    """Value domains of the input fields of ``spec`` as bound in the
    gathering graph, keyed by local field name."""
    out: dict[str, ValueDomain] = {}
    for node in spec.sources():
        if not node.params.get("stream"):
            continue
        for f in stream_fields(store, stream_iri(node.params["stream"])):
            if f.canonical is None:
                continue
            domain = store.value(data_iri(f.canonical), KGS.valueDomain)
            if domain is not None:
                try:
                    out[f.name] = ValueDomain(str(domain))
                except ValueError:
                    pass
    return out
