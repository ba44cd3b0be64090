"""Synthetic industrial-site fixtures at configurable scale.

Per-entity triple budget of the generated graph (asserted triples, after
de-duplication across the three graphs):

=================  ==========================================================
entity             triples
=================  ==========================================================
site               2, plus 1 ``containsZone`` per child site
canonical property 2
role               1, plus 1 per granted service
activity           3 (process: 2)
agent              5 (type x2, role, location, activity)
smart object       3
right              5
device             12 (domain 5, gathering 7) + 6 for the time field + 7 per
                   bound attribute; schemas hold 2-5 fields, the time field
                   included, so 23.5 field triples on average
pipeline           1 + source 6 + operator 6-7 + console sink 6 + 7 per edge,
                   33.5 on average for three nodes
collaboration      7 + 1 per granted right
=================  ==========================================================

With 70% of streams feeding a pipeline, a device costs about 59 triples, so
the device count dominates at every preset scale.
"""
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

from .formats import dump_ntriples
from .graphs import (
    ActivityDescriptor,
    AgentDescriptor,
    CanonicalProperty,
    CollaborationDescriptor,
    FieldBinding,
    Fixture,
    RightDescriptor,
    RightScope,
    RoleDescriptor,
    SiteNode,
    SmartObjectDescriptor,
    SourceType,
    StreamSourceDescriptor,
    SystemDescriptor,
    ValueDomain,
    build_all,
)
from .kg import GraphStore, Triple
from .pipeline import EdgeSpec, NodeKind, NodeSpec, PipelineSpec

TIME_FIELD = "ts"
SITE_FANOUT = 4
ACTIVITIES = 5
# first ms of the generated collaboration windows
EPOCH = 1_700_000_000_000


@dataclass(frozen=True)
class GraphGenConfig:
    agents: int
    roles: int
    smart_objects: int
    devices: int
    properties: int = 50
    rights_per_role: int = 50
    locations: int = 50
    schema_attrs: tuple[int, int] = (2, 5)
    pipeline_ratio: float = 0.7
    ops_per_pipeline: int = 3
    sensors_per_so: int = 10
    seed: int = 0

    def __post_init__(self):
        counts = {
            "agents": self.agents,
            "roles": self.roles,
            "smart_objects": self.smart_objects,
            "devices": self.devices,
            "properties": self.properties,
            "rights_per_role": self.rights_per_role,
            "locations": self.locations,
            "sensors_per_so": self.sensors_per_so,
        }
        for name, value in counts.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        low, high = self.schema_attrs
        if not 2 <= low <= high:
            raise ValueError(f"schema sizes must satisfy 2 <= low <= high, got {self.schema_attrs}")
        if high - 1 > self.properties:
            raise ValueError("schemas cannot bind more attributes than there are properties")
        if not 0 <= self.pipeline_ratio <= 1:
            raise ValueError("pipeline_ratio must lie in [0, 1]")
        if self.ops_per_pipeline < 2:
            raise ValueError("a pipeline needs at least a source and a sink")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


SCALES = {
    "G1": GraphGenConfig(agents=10, roles=5, smart_objects=10, devices=100),
    "G2": GraphGenConfig(agents=50, roles=15, smart_objects=100, devices=1_000),
    "G3": GraphGenConfig(agents=250, roles=30, smart_objects=1_000, devices=10_000),
    "G4": GraphGenConfig(agents=750, roles=30, smart_objects=10_000, devices=100_000),
}
TARGET_TRIPLES = {"G1": 8_181, "G2": 57_711, "G3": 522_567, "G4": 5_083_016}
TOLERANCE = 0.2


def scale(name: str, seed: int = 0) -> GraphGenConfig:
    try:
        base = SCALES[name.upper()]
    except KeyError:
        raise ValueError(f"unknown scale {name}, expected one of {', '.join(SCALES)}") from None
    return GraphGenConfig(**{**base.to_dict(), "seed": seed})


@dataclass
class GeneratedGraph:
    config: GraphGenConfig
    fixture: Fixture
    graphs: dict[str, list[Triple]] = field(default_factory=dict)

    @property
    def triples(self) -> list[Triple]:
        """All triples once, in generation order."""
        seen: dict[Triple, None] = {}
        for part in ("domain", "gathering", "transformation"):
            for t in self.graphs.get(part, []):
                seen.setdefault(t)
        return list(seen)

    def counts(self) -> dict[str, int]:
        out = {
            "sites": len(self.fixture.sites),
            "agents": len(self.fixture.agents),
            "roles": len(self.fixture.roles),
            "smart_objects": len(self.fixture.smart_objects),
            "devices": len(self.fixture.systems),
            "streams": len(self.fixture.sources),
            "rights": len(self.fixture.rights),
            "pipelines": len(self.fixture.pipelines),
            "collaborations": len(self.fixture.collaborations),
        }
        out["triples"] = len(self.triples)
        return out

    def store(self) -> GraphStore:
        store = GraphStore()
        store.insert(self.triples)
        return store

    def dump(self) -> str:
        return dump_ntriples(self.triples)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")


def _sites(config: GraphGenConfig) -> list[SiteNode]:
    sites = [SiteNode(f"site{i}") for i in range(config.locations)]
    for i in range(1, config.locations):
        sites[(i - 1) // SITE_FANOUT].contains.append(f"site{i}")
    return sites


def _local_name(prop: str, variant: int) -> str:
    # heterogeneous local spellings of one canonical property
    return (prop, f"{prop}_lev", f"{prop}_val")[variant]


def generate(config: GraphGenConfig) -> GeneratedGraph:
    rnd = random.Random(config.seed)
    fixture = Fixture()
    fixture.sites = _sites(config)
    site_ids = [s.id for s in fixture.sites]

    domains = (ValueDomain.REAL, ValueDomain.POSITIVE_REAL)
    fixture.properties = [CanonicalProperty(f"prop{i}", domains[i % 2]) for i in range(config.properties)]

    fixture.roles = [RoleDescriptor(f"role{i}") for i in range(config.roles)]
    fixture.roles[0].services = ["monitor", "query", "pipeline"]

    fixture.activities = [ActivityDescriptor(f"activity{i}", part_of="process0") for i in range(ACTIVITIES)]
    fixture.agents = [
        AgentDescriptor(
            f"agent{i}",
            role=rnd.choice(fixture.roles).id,
            location=rnd.choice(site_ids),
            activity=rnd.choice(fixture.activities).id,
        )
        for i in range(config.agents)
    ]
    fixture.smart_objects = [SmartObjectDescriptor(f"so{i}", location=rnd.choice(site_ids)) for i in range(config.smart_objects)]

    low, high = config.schema_attrs
    for i in range(config.devices):
        so = fixture.smart_objects[(i // config.sensors_per_so) % config.smart_objects]
        device = f"sensor{i}"
        fixture.systems.append(SystemDescriptor(device, smart_object=so.id, location=so.location))
        props = rnd.sample(fixture.properties, rnd.randint(low, high) - 1)
        names = []
        for prop in props:
            name = _local_name(prop.name, rnd.randrange(3))
            names.append(name)
            fixture.bindings.append(FieldBinding(device, name, prop.name))
        fixture.sources.append(
            StreamSourceDescriptor(device, SourceType.SENSOR, [TIME_FIELD] + names, so.location)
        )

    targets = {
        RightScope.SYSTEM: [s.id for s in fixture.systems],
        RightScope.SMART_OBJECT: [s.id for s in fixture.smart_objects],
        RightScope.ENVIRONMENT: site_ids,
    }
    scopes = list(targets)
    for role in fixture.roles:
        for j in range(config.rights_per_role):
            scope = rnd.choice(scopes)
            fixture.rights.append(RightDescriptor(f"right_{role.id}_{j}", role.id, scope, rnd.choice(targets[scope])))

    fixture.collaborations = _collaborations(config, fixture, rnd)
    fixture.pipelines = _pipelines(config, fixture, rnd)

    generated = GeneratedGraph(config, fixture, build_all(fixture))
    logging.info(f"Generated fixture (seed {config.seed}): {generated.counts()}.")
    return generated


def _collaborations(config: GraphGenConfig, fixture: Fixture, rnd: random.Random) -> list[CollaborationDescriptor]:
    if config.agents < 2:
        return []
    by_role: dict[str, list[str]] = {}
    for right in fixture.rights:
        by_role.setdefault(right.role, []).append(right.id)
    out = []
    for i in range(max(1, config.agents // 10)):
        origin, target = rnd.sample(fixture.agents, 2)
        rights = rnd.sample(by_role[origin.role], min(2, len(by_role[origin.role])))
        start = EPOCH + rnd.randrange(24) * 3_600_000
        out.append(
            CollaborationDescriptor(
                f"collab{i}",
                from_agent=origin.id,
                to_agent=target.id,
                workflow_element=rnd.choice(fixture.activities).id,
                rights=rights,
                start=start,
                end=start + 8 * 3_600_000,
            )
        )
    return out


def _pipelines(config: GraphGenConfig, fixture: Fixture, rnd: random.Random) -> list[PipelineSpec]:
    sources = fixture.sources
    chosen = rnd.sample(sources, round(config.pipeline_ratio * len(sources)))
    out = []
    for i, source in enumerate(chosen):
        attrs = [n for n in source.schema if n != TIME_FIELD]
        nodes = [NodeSpec("src", NodeKind.SOURCE, {"stream": source.id, "topic": source.topic, "time_field": TIME_FIELD})]
        for k in range(config.ops_per_pipeline - 2):
            if rnd.random() < 0.5:
                params = {"field": rnd.choice(attrs), "op": ">", "value": round(rnd.uniform(0, 1000), 1)}
                nodes.append(NodeSpec(f"op{k}", NodeKind.FILTER, params))
            else:
                nodes.append(NodeSpec(f"op{k}", NodeKind.MAP, {"select": [TIME_FIELD] + attrs[:1]}))
        nodes.append(NodeSpec("out", NodeKind.SINK, {"kind": "console"}))
        edges = [EdgeSpec(a.id, b.id) for a, b in zip(nodes, nodes[1:])]
        out.append(PipelineSpec(f"p{i}", nodes, edges))
    return out


def deviation(generated: GeneratedGraph, name: str) -> float:
    """Relative distance of the triple count from the preset's target."""
    target = TARGET_TRIPLES[name.upper()]
    return (len(generated.triples) - target) / target
