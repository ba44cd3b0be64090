"""Vocabulary and builders for the domain, stream-gathering and
stream-transformation graphs, plus the attribute mapping between local field
names and canonical properties."""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Iterable, Mapping

import networkx as nx

from .errors import BuildError, CollaborationError, UnmappedAttributeError
from .kg import GraphStore, Term, TermKind, Triple, iri, literal

if TYPE_CHECKING:
    from .pipeline import PipelineSpec


class Namespace:
    """Attribute access yields iris: ``IOE.onSensor``."""

    def __init__(self, base: str):
        self.base = base

    def __getattr__(self, name: str) -> Term:
        if name.startswith("__"):
            raise AttributeError(name)
        return iri(self.base + name)

    def __getitem__(self, name: str) -> Term:
        return iri(self.base + name)

    def __contains__(self, term: Term) -> bool:
        return term.kind is TermKind.IRI and str(term.value).startswith(self.base)


IOE = Namespace("https://w3id.org/semioe#")
BOT = Namespace("https://w3id.org/bot#")
PROV = Namespace("http://www.w3.org/ns/prov#")
SOSA = Namespace("http://www.w3.org/ns/sosa/")
RDF = Namespace("http://www.w3.org/1999/02/22-rdf-syntax-ns#")
SG = Namespace("https://w3id.org/kgstream/sg#")
ST = Namespace("https://w3id.org/kgstream/st#")
KGS = Namespace("https://w3id.org/kgstream/kgs#")
META = Namespace("https://w3id.org/kgstream/meta#")
DATA = Namespace("https://w3id.org/kgstream/data/")

A = RDF.type


def data_iri(identifier: str) -> Term:
    """Deterministic iri for a descriptor id; full iris pass through."""
    if "://" in identifier:
        return iri(identifier)
    return DATA[identifier]


def local_id(term: Term) -> str:
    text = str(term.value)
    if text.startswith(DATA.base):
        return text[len(DATA.base):]
    return text


def stream_iri(source_id: str) -> Term:
    return DATA[f"stream/{local_id(data_iri(source_id))}"]


def stream_id(term: Term) -> str:
    return local_id(term).removeprefix("stream/")


class SourceType(Enum):
    SENSOR = "sensor"
    WEARABLE = "wearable"
    SYSTEM = "system"


class ValueDomain(Enum):
    REAL = "real"
    POSITIVE_REAL = "positive-real"
    INTEGER = "integer"
    TEXT = "text"
    BOOLEAN = "boolean"

    @property
    def numeric(self) -> bool:
        return self in (ValueDomain.REAL, ValueDomain.POSITIVE_REAL, ValueDomain.INTEGER)


# primitive field types accepted for each value domain; the first is the default
FIELD_TYPES = {
    ValueDomain.REAL: ("float", "integer"),
    ValueDomain.POSITIVE_REAL: ("float", "integer"),
    ValueDomain.INTEGER: ("integer",),
    ValueDomain.TEXT: ("string",),
    ValueDomain.BOOLEAN: ("boolean",),
}

UNTYPED_FIELD = "any"


class RightScope(Enum):
    SYSTEM = "system"
    SMART_OBJECT = "smart-object"
    ENVIRONMENT = "environment"
    STREAM = "stream"


RIGHT_CLASSES = {
    RightScope.SYSTEM: (IOE.RightOnSystem, IOE.onSystem),
    RightScope.SMART_OBJECT: (IOE.RightOnSmartObject, IOE.onSmartObject),
    RightScope.ENVIRONMENT: (IOE.RightOnEnvironment, IOE.onEnvironment),
    RightScope.STREAM: (IOE.RightOnStream, IOE.onStream),
}


@dataclass
class StreamSourceDescriptor:
    id: str
    source_type: SourceType
    schema: list[str]
    location: str
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def iri(self) -> Term:
        return data_iri(self.id)

    @property
    def stream(self) -> Term:
        return stream_iri(self.id)

    @property
    def topic(self) -> str:
        return self.metadata.get("topic") or f"{self.location}.{self.id}".lower()

    @property
    def time_field(self) -> str | None:
        return self.metadata.get("time_field")


@dataclass
class CanonicalProperty:
    name: str
    domain: ValueDomain = ValueDomain.REAL

    @property
    def iri(self) -> Term:
        return data_iri(self.name)


@dataclass
class FieldBinding:
    source: str
    local_name: str
    canonical: str
    field_path: str | None = None
    field_type: str | None = None

    def __post_init__(self):
        if self.field_path is None:
            self.field_path = self.local_name


@dataclass
class SiteNode:
    id: str
    contains: list[str] = field(default_factory=list)


@dataclass
class RoleDescriptor:
    id: str
    services: list[str] = field(default_factory=list)


@dataclass
class AgentDescriptor:
    id: str
    role: str
    location: str
    activity: str | None = None
    prefs: dict[str, str] = field(default_factory=dict)


@dataclass
class SmartObjectDescriptor:
    id: str
    location: str
    role: str | None = None


@dataclass
class SystemDescriptor:
    id: str
    smart_object: str | None = None
    location: str | None = None
    kind: str = "sensor"
    properties: list[str] = field(default_factory=list)


@dataclass
class ActivityDescriptor:
    id: str
    part_of: str | None = None


@dataclass
class RightDescriptor:
    id: str
    role: str
    scope: RightScope
    target: str
    mode: str = "read"


@dataclass
class CollaborationDescriptor:
    id: str
    from_agent: str
    to_agent: str
    workflow_element: str
    rights: list[str]
    start: int
    end: int


@dataclass
class StorageSpec:
    stream: str
    backend: str
    dataset: str
    table: str
    fields: list[str]
    id: str | None = None

    def __post_init__(self):
        if self.id is None:
            self.id = f"{self.stream}-{self.backend}-{self.table}"


@dataclass
class MonitoringSpec:
    stream: str
    fields: list[str]
    id: str | None = None

    def __post_init__(self):
        if self.id is None:
            self.id = f"{self.stream}-monitoring"


@dataclass
class Fixture:
    sites: list[SiteNode] = field(default_factory=list)
    activities: list[ActivityDescriptor] = field(default_factory=list)
    roles: list[RoleDescriptor] = field(default_factory=list)
    agents: list[AgentDescriptor] = field(default_factory=list)
    smart_objects: list[SmartObjectDescriptor] = field(default_factory=list)
    systems: list[SystemDescriptor] = field(default_factory=list)
    rights: list[RightDescriptor] = field(default_factory=list)
    collaborations: list[CollaborationDescriptor] = field(default_factory=list)
    properties: list[CanonicalProperty] = field(default_factory=list)
    sources: list[StreamSourceDescriptor] = field(default_factory=list)
    bindings: list[FieldBinding] = field(default_factory=list)
    storage: list[StorageSpec] = field(default_factory=list)
    monitoring: list[MonitoringSpec] = field(default_factory=list)
    pipelines: list["PipelineSpec"] = field(default_factory=list)
    credentials: dict[str, str] = field(default_factory=dict)

    def extend(self, other: "Fixture") -> None:
        for name in self.__dataclass_fields__:
            current = getattr(self, name)
            if isinstance(current, dict):
                current.update(getattr(other, name))
            else:
                current.extend(getattr(other, name))


def _require(ids: set[str], ref: str | None, what: str, owner: str) -> None:
    if ref is not None and ref not in ids:
        raise BuildError(f"{owner} refers to undeclared {what} {data_iri(ref).value}")


def check_site_tree(sites: Iterable[SiteNode]) -> nx.DiGraph:
    """Containment graph of the sites; raises on undeclared children or cycles."""
    sites = list(sites)
    ids = {s.id for s in sites}
    graph = nx.DiGraph()
    graph.add_nodes_from(ids)
    for site in sites:
        for child in site.contains:
            _require(ids, child, "site", f"site {site.id}")
            graph.add_edge(site.id, child)
    if not nx.is_directed_acyclic_graph(graph):
        cycle = nx.find_cycle(graph)
        raise BuildError("site containment is cyclic: " + " -> ".join(a for a, _ in cycle) + f" -> {cycle[0][0]}")
    return graph


def build_domain_graph(
    sites: Iterable[SiteNode] = (),
    agents: Iterable[AgentDescriptor] = (),
    roles: Iterable[RoleDescriptor] = (),
    rights: Iterable[RightDescriptor] = (),
    collaborations: Iterable[CollaborationDescriptor] = (),
    smart_objects: Iterable[SmartObjectDescriptor] = (),
    systems: Iterable[SystemDescriptor] = (),
    activities: Iterable[ActivityDescriptor] = (),
) -> list[Triple]:
    sites, agents, roles, rights = list(sites), list(agents), list(roles), list(rights)
    collaborations, smart_objects, systems, activities = list(collaborations), list(smart_objects), list(systems), list(activities)

    site_ids = {s.id for s in sites}
    role_ids = {r.id for r in roles}
    so_ids = {s.id for s in smart_objects}
    system_ids = {s.id for s in systems}
    activity_ids = {a.id for a in activities}
    process_ids = {a.part_of for a in activities if a.part_of}
    workflow_ids = activity_ids | process_ids
    agent_roles = {a.id: a.role for a in agents} | {s.id: s.role for s in smart_objects}
    right_roles = {r.id: r.role for r in rights}

    check_site_tree(sites)
    out: list[Triple] = []

    for site in sites:
        node = data_iri(site.id)
        out += [Triple(node, A, IOE.Site), Triple(node, A, BOT.Site)]
        for child in site.contains:
            out.append(Triple(node, BOT.containsZone, data_iri(child)))

    for activity in activities:
        node = data_iri(activity.id)
        out += [Triple(node, A, IOE.Activity), Triple(node, A, IOE.WorkflowElement)]
        if activity.part_of:
            out.append(Triple(node, IOE.partOf, data_iri(activity.part_of)))
    for process in sorted(process_ids - activity_ids):
        node = data_iri(process)
        out += [Triple(node, A, IOE.Process), Triple(node, A, IOE.WorkflowElement)]

    for role in roles:
        node = data_iri(role.id)
        out.append(Triple(node, A, IOE.Role))
        for service in role.services:
            out.append(Triple(node, KGS.grantsService, literal(service)))

    for agent in agents:
        _require(role_ids, agent.role, "role", f"agent {agent.id}")
        _require(site_ids, agent.location, "site", f"agent {agent.id}")
        _require(workflow_ids, agent.activity, "activity", f"agent {agent.id}")
        node = data_iri(agent.id)
        out += [
            Triple(node, A, IOE.Agent),
            Triple(node, A, IOE.HAgent),
            Triple(node, IOE.hasRole, data_iri(agent.role)),
            Triple(node, IOE.isLocatedIn, data_iri(agent.location)),
        ]
        if agent.activity:
            out.append(Triple(node, IOE.involvedIn, data_iri(agent.activity)))
        for key, value in agent.prefs.items():
            out.append(Triple(node, META[key], literal(value)))

    for so in smart_objects:
        _require(site_ids, so.location, "site", f"smart object {so.id}")
        _require(role_ids, so.role, "role", f"smart object {so.id}")
        node = data_iri(so.id)
        out += [Triple(node, A, IOE.Agent), Triple(node, A, IOE.SmartObject), Triple(node, IOE.isLocatedIn, data_iri(so.location))]
        if so.role:
            out.append(Triple(node, IOE.hasRole, data_iri(so.role)))

    for system in systems:
        _require(so_ids, system.smart_object, "smart object", f"system {system.id}")
        _require(site_ids, system.location, "site", f"system {system.id}")
        node = data_iri(system.id)
        out += [Triple(node, A, IOE.System), Triple(node, KGS.systemKind, literal(system.kind))]
        if system.kind == "sensor":
            out.append(Triple(node, A, SOSA.Sensor))
        if system.smart_object:
            out.append(Triple(node, IOE.includedIn, data_iri(system.smart_object)))
        if system.location:
            out.append(Triple(node, IOE.isLocatedIn, data_iri(system.location)))
        for prop in system.properties:
            out.append(Triple(node, SOSA.observes, data_iri(prop)))

    targets = {
        RightScope.SYSTEM: (system_ids, "system"),
        RightScope.SMART_OBJECT: (so_ids, "smart object"),
        RightScope.ENVIRONMENT: (site_ids, "site"),
    }
    for right in rights:
        _require(role_ids, right.role, "role", f"right {right.id}")
        if right.scope in targets:
            ids, what = targets[right.scope]
            _require(ids, right.target, what, f"right {right.id}")
        cls, prop = RIGHT_CLASSES[right.scope]
        node = data_iri(right.id)
        target = stream_iri(right.target) if right.scope is RightScope.STREAM else data_iri(right.target)
        out += [
            Triple(node, A, IOE.Right),
            Triple(node, A, cls),
            Triple(node, IOE.forRole, data_iri(right.role)),
            Triple(node, prop, target),
            Triple(node, IOE.accessMode, literal(right.mode)),
        ]

    for collab in collaborations:
        out += _collaboration_triples(collab, agent_roles, right_roles, workflow_ids)

    logging.debug(f"Built domain graph: {len(out)} triples.")
    return out


def _collaboration_triples(
    collab: CollaborationDescriptor,
    agent_roles: Mapping[str, str | None],
    right_roles: Mapping[str, str],
    workflow_ids: set[str] | None = None,
) -> list[Triple]:
    owner = f"collaboration {collab.id}"
    _require(set(agent_roles), collab.from_agent, "agent", owner)
    _require(set(agent_roles), collab.to_agent, "agent", owner)
    if workflow_ids is not None:
        _require(workflow_ids, collab.workflow_element, "workflow element", owner)
    if not collab.start < collab.end:
        raise BuildError(f"{owner} must start before it ends")
    if not collab.rights:
        raise BuildError(f"{owner} grants no rights")
    origin_role = agent_roles[collab.from_agent]
    for right in collab.rights:
        _require(set(right_roles), right, "right", owner)
        if right_roles[right] != origin_role:
            raise CollaborationError(
                f"{owner} grants right {right} which the role of {collab.from_agent} does not hold"
            )
    node = data_iri(collab.id)
    out = [
        Triple(node, A, IOE.AgentRelation),
        Triple(node, A, IOE.Collaboration),
        Triple(node, IOE.fromAgent, data_iri(collab.from_agent)),
        Triple(node, IOE.toAgent, data_iri(collab.to_agent)),
        Triple(node, IOE.forWorkflowElement, data_iri(collab.workflow_element)),
        Triple(node, IOE.startTime, literal(int(collab.start))),
        Triple(node, IOE.endTime, literal(int(collab.end))),
    ]
    out += [Triple(node, IOE.forRight, data_iri(r)) for r in collab.rights]
    return out


def collaboration_triples_for_store(collab: CollaborationDescriptor, store: GraphStore) -> list[Triple]:
    """Validate a collaboration against an existing graph and build its triples."""
    agent_roles: dict[str, str | None] = {}
    for agent in (collab.from_agent, collab.to_agent):
        role = store.value(data_iri(agent), IOE.hasRole)
        if role is None and not store.has_resource(data_iri(agent)):
            raise BuildError(f"collaboration {collab.id} refers to undeclared agent {data_iri(agent).value}")
        agent_roles[agent] = local_id(role) if role is not None else None
    right_roles = {}
    for right in collab.rights:
        role = store.value(data_iri(right), IOE.forRole)
        if role is None:
            raise BuildError(f"collaboration {collab.id} refers to undeclared right {data_iri(right).value}")
        right_roles[right] = local_id(role)
    if not store.has_resource(data_iri(collab.workflow_element)):
        raise BuildError(f"collaboration {collab.id} refers to undeclared workflow element {data_iri(collab.workflow_element).value}")
    return _collaboration_triples(collab, agent_roles, right_roles)


def _field_iri(source: str, name: str) -> Term:
    return DATA[f"field/{local_id(data_iri(source))}/{name}"]


def _schema_iri(source: str) -> Term:
    return DATA[f"schema/{local_id(data_iri(source))}"]


def build_gathering_graph(
    sources: Iterable[StreamSourceDescriptor],
    bindings: Iterable[FieldBinding],
    properties: Iterable[CanonicalProperty] = (),
    storage: Iterable[StorageSpec] = (),
    monitoring: Iterable[MonitoringSpec] = (),
) -> list[Triple]:
    sources, bindings, properties = list(sources), list(bindings), list(properties)
    domains = {p.name: p.domain for p in properties}
    by_source: dict[str, dict[str, FieldBinding]] = {}
    mu: dict[str, str] = {}
    for b in bindings:
        if b.canonical not in domains:
            raise BuildError(f"field {b.local_name} of {b.source} is bound to undeclared property {data_iri(b.canonical).value}")
        allowed = FIELD_TYPES[domains[b.canonical]]
        if b.field_type is not None and b.field_type not in allowed:
            raise BuildError(f"field {b.local_name} of {b.source} has type {b.field_type}, expected one of {', '.join(allowed)}")
        if mu.setdefault(b.local_name, b.canonical) != b.canonical:
            raise BuildError(f"local name {b.local_name} is bound to both {mu[b.local_name]} and {b.canonical}")
        per = by_source.setdefault(b.source, {})
        if b.local_name in per:
            raise BuildError(f"field {b.local_name} of {b.source} is bound twice")
        per[b.local_name] = b

    out: list[Triple] = []
    for prop in properties:
        out += [Triple(prop.iri, A, SOSA.Property), Triple(prop.iri, KGS.valueDomain, literal(prop.domain.value))]

    schemas: dict[str, list[str]] = {}
    topics: set[str] = set()
    for source in sources:
        if not source.schema:
            raise BuildError(f"source {source.id} has an empty schema")
        if len(set(source.schema)) != len(source.schema):
            raise BuildError(f"source {source.id} declares a field twice")
        if source.id in schemas:
            raise BuildError(f"source {source.id} is declared twice")
        if source.topic in topics:
            raise BuildError(f"topic {source.topic} is used by more than one stream")
        topics.add(source.topic)
        schemas[source.id] = list(source.schema)
        bound = by_source.get(source.id, {})
        if not bound:
            raise BuildError(f"source {source.id} has no field bindings")
        for name in bound:
            if name not in source.schema:
                raise BuildError(f"binding for {name} does not match a field of {source.id}")

        node, stream, schema = source.iri, source.stream, _schema_iri(source.id)
        out += [
            Triple(node, A, IOE.System),
            Triple(node, KGS.sourceType, literal(source.source_type.value)),
            Triple(node, IOE.isLocatedIn, data_iri(source.location)),
            Triple(stream, A, SG.Stream),
            Triple(stream, A, SG.KafkaStream),
            Triple(stream, SG.topic, literal(source.topic)),
            Triple(stream, SG.hasSchema, schema),
            Triple(stream, PROV.wasAttributedTo, node),
            Triple(schema, A, SG.Schema),
        ]
        for key, value in source.metadata.items():
            out.append(Triple(stream, META[key], literal(str(value))))
        for position, name in enumerate(source.schema):
            out += _field_triples(schema, source.id, name, position, bound.get(name), domains)

    for spec in storage:
        _check_spec_fields(schemas, spec.stream, spec.fields, f"storage spec {spec.id}")
        node = DATA[f"storage/{spec.id}"]
        out += [
            Triple(node, A, SG.StorageSpecs),
            Triple(node, SG.forStream, stream_iri(spec.stream)),
            Triple(node, SG.backend, literal(spec.backend)),
            Triple(node, SG.dataset, literal(spec.dataset)),
            Triple(node, SG.table, literal(spec.table)),
        ]
        out += [Triple(node, SG.storesField, _field_iri(spec.stream, f)) for f in spec.fields]

    for spec in monitoring:
        _check_spec_fields(schemas, spec.stream, spec.fields, f"monitoring spec {spec.id}")
        node = DATA[f"monitoring/{spec.id}"]
        out += [Triple(node, A, SG.MonitoringSpecs), Triple(node, SG.forStream, stream_iri(spec.stream))]
        out += [Triple(node, SG.monitorsField, _field_iri(spec.stream, f)) for f in spec.fields]

    logging.debug(f"Built gathering graph: {len(out)} triples for {len(sources)} sources.")
    return out


def _field_triples(
    schema: Term, source: str, name: str, position: int, binding: FieldBinding | None, domains: Mapping[str, ValueDomain]
) -> list[Triple]:
    node = _field_iri(source, name)
    out = [
        Triple(schema, SG.hasField, node),
        Triple(node, A, SG.Field),
        Triple(node, SG.fieldName, literal(name)),
        Triple(node, KGS.position, literal(position)),
    ]
    if binding is None:
        out += [Triple(node, SG.fieldPath, literal(name)), Triple(node, SG.fieldType, literal(UNTYPED_FIELD))]
    else:
        field_type = binding.field_type or FIELD_TYPES[domains[binding.canonical]][0]
        out += [
            Triple(node, SG.fieldPath, literal(binding.field_path)),
            Triple(node, SG.fieldType, literal(field_type)),
            Triple(node, SG.hasProperty, data_iri(binding.canonical)),
        ]
    return out


def _check_spec_fields(schemas: Mapping[str, list[str]], stream: str, fields: Iterable[str], owner: str) -> None:
    if stream not in schemas:
        raise BuildError(f"{owner} refers to undeclared stream {stream_iri(stream).value}")
    missing = [f for f in fields if f not in schemas[stream]]
    if missing:
        raise BuildError(f"{owner} names fields outside the schema of {stream}: {', '.join(missing)}")


WINDOW_PROPERTIES = {"duration": ST.windowDuration, "hop": ST.windowHop, "gap": ST.windowGap, "size": ST.size}

NODE_CLASSES = {
    "source": ST.KafkaSource,
    "map": ST.Map,
    "filter": ST.Filter,
    "key-by": ST.KeyBy,
    "aggregate": ST.Aggregation,
    "union": ST.Union,
}
SINK_CLASSES = {"broker": ST.KafkaSink, "file": ST.FileSink, "console": ST.PrintSink}
STREAM_KIND_CLASSES = {"raw": ST.RawStream, "keyed": ST.KeyedStream, "windowed": ST.WindowedStream}


def pipeline_iri(pipeline_id: str) -> Term:
    return DATA[f"pipeline/{pipeline_id}"]


def node_iri(pipeline_id: str, node_id: str) -> Term:
    return DATA[f"pipeline/{pipeline_id}/node/{node_id}"]


def build_transformation_graph(pipelines: Iterable["PipelineSpec"]) -> list[Triple]:
    """Triples for validated pipeline specs.

    Source nodes must name the stream they read (``stream`` parameter, a
    source or derived stream id); broker sinks name the stream they write.
    """
    out: list[Triple] = []
    for spec in pipelines:
        graph = nx.DiGraph()
        graph.add_nodes_from(n.id for n in spec.nodes)
        graph.add_edges_from((e.source, e.target) for e in spec.edges)
        if not nx.is_directed_acyclic_graph(graph):
            raise BuildError(f"pipeline {spec.id} has a cyclic hasNext relation")

        pnode = pipeline_iri(spec.id)
        out.append(Triple(pnode, A, ST.Pipeline))
        inputs: list[Term] = []
        outputs: list[Term] = []
        for position, node in enumerate(spec.nodes):
            nnode = node_iri(spec.id, node.id)
            kind = node.kind.value
            params = dict(node.params)
            out += [
                Triple(pnode, ST.hasNode, nnode),
                Triple(nnode, A, ST.Node),
                Triple(nnode, KGS.position, literal(position)),
            ]
            if kind == "source":
                out.append(Triple(nnode, A, ST.Source))
                if not params.get("stream"):
                    raise BuildError(f"source node {node.id} of pipeline {spec.id} names no stream")
                stream = stream_iri(params.pop("stream"))
                params.pop("topic", None)
                inputs.append(stream)
                out.append(Triple(nnode, ST.readsFrom, stream))
            elif kind == "sink":
                target = params.get("kind", "console")
                out += [Triple(nnode, A, ST.Sink), Triple(nnode, A, SINK_CLASSES[target])]
                if target == "broker":
                    if not params.get("stream"):
                        raise BuildError(f"broker sink {node.id} of pipeline {spec.id} names no output stream")
                    stream = stream_iri(params.pop("stream"))
                    outputs.append(stream)
                    out += [
                        Triple(nnode, ST.writesTo, stream),
                        Triple(stream, A, SG.Stream),
                        Triple(stream, A, SG.KafkaStream),
                        Triple(stream, SG.topic, literal(params.pop("topic", None) or f"{spec.id}.{node.id}".lower())),
                        Triple(stream, KGS.generatedBy, pnode),
                    ]
            else:
                out += [Triple(nnode, A, ST.Transformation), Triple(nnode, A, NODE_CLASSES[kind])]
            if node.window is not None:
                wnode = DATA[f"pipeline/{spec.id}/window/{node.id}"]
                out += [
                    Triple(nnode, ST.hasWindow, wnode),
                    Triple(wnode, A, ST.Window),
                    Triple(wnode, A, ST[node.window.kind.value.capitalize()]),
                ]
                for name, prop in WINDOW_PROPERTIES.items():
                    value = getattr(node.window, name)
                    if value is not None:
                        out.append(Triple(wnode, prop, literal(int(value))))
            if kind == "aggregate":
                function = params.pop("function", None)
                if function is not None:
                    out.append(Triple(nnode, ST.aggregationFunction, literal(function)))
            if params.get("field") is not None:
                out.append(Triple(nnode, ST.appliesToField, literal(str(params["field"]))))
            if params:
                out.append(Triple(nnode, KGS.params, literal(json.dumps(params, sort_keys=True))))

        for position, edge in enumerate(spec.edges):
            enode = DATA[f"pipeline/{spec.id}/edge/{edge.source}/{edge.target}"]
            out += [
                Triple(node_iri(spec.id, edge.source), ST.hasNext, node_iri(spec.id, edge.target)),
                Triple(enode, A, ST.ProcessStream),
                Triple(enode, A, STREAM_KIND_CLASSES[edge.kind.value]),
                Triple(enode, KGS.fromNode, node_iri(spec.id, edge.source)),
                Triple(enode, KGS.toNode, node_iri(spec.id, edge.target)),
                Triple(pnode, KGS.hasEdge, enode),
                Triple(enode, KGS.position, literal(position)),
            ]
        for derived in outputs:
            out += [Triple(derived, PROV.wasDerivedFrom, base) for base in inputs]
    logging.debug(f"Built transformation graph: {len(out)} triples.")
    return out


def derived_stream_triples(stream: str, schema: Iterable[str], bindings: Iterable[FieldBinding] = ()) -> list[Triple]:
    """Schema triples for a derived stream registered at deployment."""
    schema_node = _schema_iri(stream)
    out = [Triple(stream_iri(stream), SG.hasSchema, schema_node), Triple(schema_node, A, SG.Schema)]
    bound = {b.local_name: b for b in bindings}
    for position, name in enumerate(schema):
        binding = bound.get(name)
        node = _field_iri(stream, name)
        out += [
            Triple(schema_node, SG.hasField, node),
            Triple(node, A, SG.Field),
            Triple(node, SG.fieldName, literal(name)),
            Triple(node, SG.fieldPath, literal(name)),
            Triple(node, KGS.position, literal(position)),
        ]
        if binding is not None:
            out += [
                Triple(node, SG.fieldType, literal(binding.field_type or "float")),
                Triple(node, SG.hasProperty, data_iri(binding.canonical)),
            ]
        else:
            out.append(Triple(node, SG.fieldType, literal(UNTYPED_FIELD)))
    return out


def register_derived_stream(spec: "PipelineSpec", store: GraphStore) -> list[str]:
    """Insert the schema of every stream ``spec`` writes into the gathering
    graph. Output fields named like a bound input field keep its binding.

    Returns the ids of the registered streams.
    """
    from .pipeline import derived_stream_schemas

    inherited: dict[str, StreamField] = {}
    for node in spec.sources():
        if node.params.get("stream"):
            for f in stream_fields(store, stream_iri(node.params["stream"])):
                if f.canonical is not None:
                    inherited.setdefault(f.name, f)
    registered = []
    for stream, schema in derived_stream_schemas(spec, store).items():
        bindings = [
            FieldBinding(stream, name, inherited[name].canonical, name, inherited[name].field_type)
            for name in schema
            if name in inherited
        ]
        store.insert(derived_stream_triples(stream, schema, bindings))
        registered.append(stream)
        logging.info(f"Registered derived stream {stream} of pipeline {spec.id}: {', '.join(schema)}.")
    return registered


class AttributeMap:
    """The mapping μ from local attribute names to canonical properties, with
    ν giving each canonical property its value domain."""

    def __init__(self, bindings: Iterable[FieldBinding], properties: Iterable[CanonicalProperty] = ()):
        self.properties = {p.name: p for p in properties}
        self.mu: dict[str, str] = {}
        for b in bindings:
            self.mu[b.local_name] = b.canonical

    def resolve(self, local_name: str) -> CanonicalProperty:
        try:
            name = self.mu[local_name]
        except KeyError:
            raise UnmappedAttributeError(f"attribute {local_name} is not mapped to a canonical property") from None
        return self.properties.get(name) or CanonicalProperty(name)


def resolve_canonical(
    local_name: str, bindings: Iterable[FieldBinding] | AttributeMap, properties: Iterable[CanonicalProperty] = ()
) -> CanonicalProperty:
    mapping = bindings if isinstance(bindings, AttributeMap) else AttributeMap(bindings, properties)
    return mapping.resolve(local_name)


MISSING = object()


def get_path(payload: Any, path: str) -> Any:
    """Navigate a dotted path into a nested payload; MISSING when absent."""
    current = payload
    for part in path.split("."):
        if isinstance(current, Mapping) and part in current:
            current = current[part]
        elif isinstance(current, list) and part.isdigit() and int(part) < len(current):
            current = current[int(part)]
        else:
            return MISSING
    return current


@dataclass
class StreamField:
    name: str
    path: str
    field_type: str
    canonical: str | None
    position: int


def stream_fields(store: GraphStore, stream: Term) -> list[StreamField]:
    """Fields of a stream's schema in declaration order."""
    fields = []
    schema = store.value(stream, SG.hasSchema)
    if schema is None:
        return fields
    for node in store.objects(schema, SG.hasField):
        name = store.value(node, SG.fieldName)
        path = store.value(node, SG.fieldPath)
        ftype = store.value(node, SG.fieldType)
        prop = store.value(node, SG.hasProperty)
        position = store.value(node, KGS.position)
        fields.append(
            StreamField(
                name=str(name),
                path=str(path) if path is not None else str(name),
                field_type=str(ftype) if ftype is not None else UNTYPED_FIELD,
                canonical=local_id(prop) if prop is not None else None,
                position=int(position.value) if position is not None else 0,
            )
        )
    return sorted(fields, key=lambda f: (f.position, f.name))


def canonicalize(payload: Mapping, fields: Iterable[StreamField]) -> tuple[dict, list[str]]:
    """Rename payload values to canonical property names.

    Returns the renamed document and the local names that have no canonical
    mapping; those keep their local names.
    """
    out: dict = {}
    unmapped: list[str] = []
    seen_roots = set()
    for f in fields:
        seen_roots.add(f.path.split(".")[0])
        value = get_path(payload, f.path)
        if value is MISSING:
            continue
        if f.canonical is not None:
            out[f.canonical] = value
        else:
            out[f.name] = value
            unmapped.append(f.name)
    for key, value in payload.items():
        if key not in seen_roots and key not in out:
            out[key] = value
            unmapped.append(key)
    return out, unmapped


def topic_of(store: GraphStore, stream: Term) -> str | None:
    topic = store.value(stream, SG.topic, asserted_only=True) or store.value(stream, SG.topic)
    return str(topic) if topic is not None else None


# -- extraction -------------------------------------------------------------

def _ids(store: GraphStore, cls: Term) -> list[Term]:
    return sorted(t.subject for t in store.triples(None, A, cls) if t in store.asserted)


def _str(store: GraphStore, s: Term, p: Term) -> str | None:
    value = store.value(s, p, asserted_only=True)
    return str(value.value) if value is not None else None


def _meta(store: GraphStore, s: Term) -> dict[str, str]:
    out = {}
    for t in store.triples(s):
        if t.predicate in META and t in store.asserted:
            out[str(t.predicate.value)[len(META.base):]] = str(t.object.value)
    return out


def extract_sites(store: GraphStore) -> list[SiteNode]:
    return [
        SiteNode(local_id(s), sorted(local_id(c) for c in store.objects(s, BOT.containsZone, asserted_only=True)))
        for s in _ids(store, IOE.Site)
    ]


def extract_activities(store: GraphStore) -> list[ActivityDescriptor]:
    out = []
    for s in _ids(store, IOE.Activity):
        parent = store.value(s, IOE.partOf, asserted_only=True)
        out.append(ActivityDescriptor(local_id(s), local_id(parent) if parent is not None else None))
    return out


def extract_roles(store: GraphStore) -> list[RoleDescriptor]:
    return [
        RoleDescriptor(local_id(s), sorted(str(o.value) for o in store.objects(s, KGS.grantsService, asserted_only=True)))
        for s in _ids(store, IOE.Role)
    ]


def extract_agents(store: GraphStore) -> list[AgentDescriptor]:
    out = []
    for s in _ids(store, IOE.HAgent):
        activity = store.value(s, IOE.involvedIn, asserted_only=True)
        out.append(
            AgentDescriptor(
                id=local_id(s),
                role=local_id(store.value(s, IOE.hasRole, asserted_only=True)),
                location=local_id(store.value(s, IOE.isLocatedIn, asserted_only=True)),
                activity=local_id(activity) if activity is not None else None,
                prefs=_meta(store, s),
            )
        )
    return out


def extract_smart_objects(store: GraphStore) -> list[SmartObjectDescriptor]:
    out = []
    for s in _ids(store, IOE.SmartObject):
        role = store.value(s, IOE.hasRole, asserted_only=True)
        out.append(
            SmartObjectDescriptor(
                local_id(s), local_id(store.value(s, IOE.isLocatedIn, asserted_only=True)), local_id(role) if role is not None else None
            )
        )
    return out


def extract_systems(store: GraphStore) -> list[SystemDescriptor]:
    out = []
    for s in _ids(store, IOE.System):
        kind = _str(store, s, KGS.systemKind)
        if kind is None:
            # declared only through the gathering graph
            continue
        so = store.value(s, IOE.includedIn, asserted_only=True)
        location = store.value(s, IOE.isLocatedIn, asserted_only=True)
        out.append(
            SystemDescriptor(
                id=local_id(s),
                smart_object=local_id(so) if so is not None else None,
                location=local_id(location) if location is not None else None,
                kind=kind,
                properties=sorted(local_id(p) for p in store.objects(s, SOSA.observes, asserted_only=True)),
            )
        )
    return out


def extract_rights(store: GraphStore) -> list[RightDescriptor]:
    out = []
    for s in _ids(store, IOE.Right):
        for scope, (cls, prop) in RIGHT_CLASSES.items():
            target = store.value(s, prop, asserted_only=True)
            if target is not None and Triple(s, A, cls) in store.asserted:
                break
        else:
            continue
        out.append(
            RightDescriptor(
                id=local_id(s),
                role=local_id(store.value(s, IOE.forRole, asserted_only=True)),
                scope=scope,
                target=stream_id(target) if scope is RightScope.STREAM else local_id(target),
                mode=_str(store, s, IOE.accessMode) or "read",
            )
        )
    return out


def extract_collaborations(store: GraphStore) -> list[CollaborationDescriptor]:
    out = []
    for s in _ids(store, IOE.AgentRelation):
        start = store.value(s, IOE.startTime, asserted_only=True)
        end = store.value(s, IOE.endTime, asserted_only=True)
        out.append(
            CollaborationDescriptor(
                id=local_id(s),
                from_agent=local_id(store.value(s, IOE.fromAgent, asserted_only=True)),
                to_agent=local_id(store.value(s, IOE.toAgent, asserted_only=True)),
                workflow_element=local_id(store.value(s, IOE.forWorkflowElement, asserted_only=True)),
                rights=sorted(local_id(r) for r in store.objects(s, IOE.forRight, asserted_only=True)),
                start=int(start.value),
                end=int(end.value),
            )
        )
    return out


def extract_properties(store: GraphStore) -> list[CanonicalProperty]:
    return [
        CanonicalProperty(local_id(s), ValueDomain(_str(store, s, KGS.valueDomain) or "real"))
        for s in _ids(store, SOSA.Property)
    ]


def extract_sources(store: GraphStore) -> list[StreamSourceDescriptor]:
    out = []
    for stream in _ids(store, SG.Stream):
        source = store.value(stream, PROV.wasAttributedTo, asserted_only=True)
        if source is None:
            continue
        out.append(
            StreamSourceDescriptor(
                id=local_id(source),
                source_type=SourceType(_str(store, source, KGS.sourceType) or "sensor"),
                schema=[f.name for f in stream_fields(store, stream)],
                location=local_id(store.value(source, IOE.isLocatedIn, asserted_only=True)),
                metadata=_meta(store, stream),
            )
        )
    return out


def extract_bindings(store: GraphStore) -> list[FieldBinding]:
    out = []
    for source in extract_sources(store):
        for f in stream_fields(store, source.stream):
            if f.canonical is not None:
                out.append(FieldBinding(source.id, f.name, f.canonical, f.path, f.field_type))
    return out


def _spec_fields(store: GraphStore, node: Term, prop: Term) -> tuple[str, list[str]]:
    stream = store.value(node, SG.forStream, asserted_only=True)
    fields_by_iri = {}
    for f in store.objects(node, prop, asserted_only=True):
        name = store.value(f, SG.fieldName)
        position = store.value(f, KGS.position)
        fields_by_iri[f] = (int(position.value) if position is not None else 0, str(name))
    names = [name for _, name in sorted(fields_by_iri.values())]
    return stream_id(stream), names


def extract_storage_specs(store: GraphStore) -> list[StorageSpec]:
    out = []
    for node in _ids(store, SG.StorageSpecs):
        stream, names = _spec_fields(store, node, SG.storesField)
        out.append(
            StorageSpec(
                stream=stream,
                backend=_str(store, node, SG.backend),
                dataset=_str(store, node, SG.dataset),
                table=_str(store, node, SG.table),
                fields=names,
                id=local_id(node).removeprefix("storage/"),
            )
        )
    return out


def extract_monitoring_specs(store: GraphStore) -> list[MonitoringSpec]:
    out = []
    for node in _ids(store, SG.MonitoringSpecs):
        stream, names = _spec_fields(store, node, SG.monitorsField)
        out.append(MonitoringSpec(stream, names, id=local_id(node).removeprefix("monitoring/")))
    return out


# -- whole fixtures --------------------------------------------------------

def build_all(fixture: Fixture) -> dict[str, list[Triple]]:
    """Build the three graphs of a fixture and check cross-graph references."""
    site_ids = {s.id for s in fixture.sites}
    for source in fixture.sources:
        if source.location not in site_ids:
            raise BuildError(f"source {source.id} is located in undeclared site {data_iri(source.location).value}")
    return {
        "domain": build_domain_graph(
            fixture.sites,
            fixture.agents,
            fixture.roles,
            fixture.rights,
            fixture.collaborations,
            fixture.smart_objects,
            fixture.systems,
            fixture.activities,
        ),
        "gathering": build_gathering_graph(
            fixture.sources, fixture.bindings, fixture.properties, fixture.storage, fixture.monitoring
        ),
        "transformation": build_transformation_graph(fixture.pipelines),
    }


def fixture_from_store(store: GraphStore) -> Fixture:
    """The domain and gathering descriptors already asserted in ``store``.
    Specs over derived streams are left out; deployment registers those."""
    sources = extract_sources(store)
    source_ids = {s.id for s in sources}
    return Fixture(
        sites=extract_sites(store),
        activities=extract_activities(store),
        roles=extract_roles(store),
        agents=extract_agents(store),
        smart_objects=extract_smart_objects(store),
        systems=extract_systems(store),
        rights=extract_rights(store),
        collaborations=extract_collaborations(store),
        properties=extract_properties(store),
        sources=sources,
        bindings=extract_bindings(store),
        storage=[s for s in extract_storage_specs(store) if s.stream in source_ids],
        monitoring=[s for s in extract_monitoring_specs(store) if s.stream in source_ids],
    )


def _descriptor_key(item: Any) -> Any:
    if isinstance(item, FieldBinding):
        return (item.source, item.local_name)
    if isinstance(item, CanonicalProperty):
        return item.name
    return item.id


def merge_fixtures(base: Fixture, update: Fixture) -> Fixture:
    """``base`` overlaid with ``update``; descriptors of ``update`` replace
    those of ``base`` with the same identity."""
    merged = Fixture()
    for name in Fixture.__dataclass_fields__:
        old, new = getattr(base, name), getattr(update, name)
        if isinstance(old, dict):
            setattr(merged, name, {**old, **new})
            continue
        replaced = {_descriptor_key(item) for item in new}
        setattr(merged, name, [item for item in old if _descriptor_key(item) not in replaced] + list(new))
    return merged


def _items(document: Mapping, key: str) -> list[dict]:
    value = document.get(key) or []
    if not isinstance(value, list) or not all(isinstance(v, dict) for v in value):
        raise BuildError(f"'{key}' must be a list of mappings")
    return value


def _construct(cls, item: Mapping, key: str, **conversions):
    data = dict(item)
    try:
        for name, convert in conversions.items():
            if name in data and data[name] is not None:
                data[name] = convert(data[name])
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise BuildError(f"invalid entry in '{key}': {e}") from e


def fixture_from_document(document: Mapping) -> Fixture:
    """Convert a parsed descriptor document into descriptor objects."""
    from .pipeline import spec_from_dict

    known = set(Fixture.__dataclass_fields__)
    unknown = set(document) - known
    if unknown:
        raise BuildError(f"unknown descriptor sections: {', '.join(sorted(unknown))}")
    from .units import parse_timestamp as timestamp

    fixture = Fixture(
        sites=[_construct(SiteNode, i, "sites") for i in _items(document, "sites")],
        activities=[_construct(ActivityDescriptor, i, "activities") for i in _items(document, "activities")],
        roles=[_construct(RoleDescriptor, i, "roles") for i in _items(document, "roles")],
        agents=[_construct(AgentDescriptor, i, "agents") for i in _items(document, "agents")],
        smart_objects=[_construct(SmartObjectDescriptor, i, "smart_objects") for i in _items(document, "smart_objects")],
        systems=[_construct(SystemDescriptor, i, "systems") for i in _items(document, "systems")],
        rights=[_construct(RightDescriptor, i, "rights", scope=RightScope) for i in _items(document, "rights")],
        collaborations=[
            _construct(CollaborationDescriptor, i, "collaborations", start=timestamp, end=timestamp)
            for i in _items(document, "collaborations")
        ],
        properties=[_construct(CanonicalProperty, i, "properties", domain=ValueDomain) for i in _items(document, "properties")],
        sources=[
            _construct(
                StreamSourceDescriptor,
                i,
                "sources",
                source_type=SourceType,
                metadata=lambda m: {str(k): str(v) for k, v in m.items()},
            )
            for i in _items(document, "sources")
        ],
        bindings=[_construct(FieldBinding, i, "bindings") for i in _items(document, "bindings")],
        storage=[_construct(StorageSpec, i, "storage") for i in _items(document, "storage")],
        monitoring=[_construct(MonitoringSpec, i, "monitoring") for i in _items(document, "monitoring")],
        pipelines=[spec_from_dict(i) for i in _items(document, "pipelines")],
    )
    credentials = document.get("credentials") or {}
    if not isinstance(credentials, dict):
        raise BuildError("'credentials' must map agent ids to secrets")
    fixture.credentials = {str(k): str(v) for k, v in credentials.items()}
    return fixture
