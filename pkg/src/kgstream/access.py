"""Context-aware access control over the materialized graph.

A stream is accessible to an agent when the agent's role holds a right on the
system the stream is attributed to (or on the stream itself), when an active
collaboration for the agent's current activity grants it, or, for derived
streams, when every base stream it was derived from is accessible.
"""
import logging
import threading
import time
import weakref
from dataclasses import dataclass, field
from enum import Enum

from .errors import UnknownResourceError
from .graphs import (
    A,
    BOT,
    IOE,
    PROV,
    SG,
    CollaborationDescriptor,
    collaboration_triples_for_store,
)
from .kg import GraphStore, Group, Query, Term, pattern, term_key


class Basis(Enum):
    ROLE_RIGHT = "role-right"
    COLLABORATION = "collaboration"
    DERIVED_CLOSURE = "derived-closure"
    DENIED = "denied"


@dataclass(frozen=True)
class AgentContext:
    agent: Term
    role: Term | None
    location: Term | None = None
    activity: Term | None = None
    now: int = field(default_factory=lambda: int(time.time() * 1000))


@dataclass(frozen=True)
class AccessDecision:
    granted: bool
    basis: Basis
    witness: tuple[Term, ...] = ()


DENIED = AccessDecision(False, Basis.DENIED)


def load_context(agent: Term, store: GraphStore, now: int | None = None) -> AgentContext:
    """Read the agent's current role, location and activity from the graph."""
    return AgentContext(
        agent=agent,
        role=store.value(agent, IOE.hasRole, asserted_only=True),
        location=store.value(agent, IOE.isLocatedIn, asserted_only=True),
        activity=store.value(agent, IOE.involvedIn, asserted_only=True),
        now=int(time.time() * 1000) if now is None else now,
    )


def role_streams_query(role: Term) -> Query:
    """Streams accessible to a role: direct rights, plus derived streams whose
    every attributed base stream is covered."""
    return Query(
        select=("stream",),
        bindings={"role": role},
        unions=(
            Group((
                pattern("?right", IOE.forRole, "?role"),
                pattern("?right", IOE.onSystem, "?s"),
                pattern("?stream", PROV.wasAttributedTo, "?s"),
            )),
            Group((
                pattern("?right", IOE.forRole, "?role"),
                pattern("?right", IOE.onStream, "?stream"),
            )),
            Group(
                (
                    pattern("?stream", PROV.wasDerivedFrom, "?b"),
                    pattern("?b", PROV.wasAttributedTo, "?sb"),
                ),
                negations=(
                    Group(
                        (
                            pattern("?stream", PROV.wasDerivedFrom, "?b2"),
                            pattern("?b2", PROV.wasAttributedTo, "?s2"),
                        ),
                        negations=(
                            Group((pattern("?r2", IOE.forRole, "?role"), pattern("?r2", IOE.onSystem, "?s2"))),
                            Group((pattern("?r3", IOE.forRole, "?role"), pattern("?r3", IOE.onStream, "?b2"))),
                        ),
                    ),
                ),
            ),
        ),
    )


def collaboration_streams_query(agent: Term, activity: Term) -> Query:
    return Query(
        select=("stream", "c", "r"),
        bindings={"agent": agent, "w": activity},
        body=(
            pattern("?c", A, IOE.AgentRelation),
            pattern("?c", IOE.forWorkflowElement, "?w"),
            pattern("?c", IOE.toAgent, "?agent"),
            pattern("?c", IOE.forRight, "?r"),
        ),
        unions=(
            Group((pattern("?r", IOE.onSensor, "?s"), pattern("?stream", PROV.wasAttributedTo, "?s"))),
            Group((pattern("?r", IOE.onStream, "?stream"),)),
        ),
    )


def colocated_query(location: Term) -> Query:
    return Query(
        select=("s", "stream", "topic"),
        bindings={"p": location},
        body=(
            pattern("?stream", PROV.wasAttributedTo, "?s"),
            pattern("?stream", SG.topic, "?topic"),
            pattern("?s", A, IOE.System),
        ),
        unions=(
            Group((pattern("?s", IOE.isLocatedIn, "?p"),)),
            Group((pattern("?p", BOT.containsZone, "?z"), pattern("?s", IOE.isLocatedIn, "?z"))),
        ),
    )


class _RoleGrantCache:
    """Direct role grants per store, keyed by (role, epoch, version)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._stores: "weakref.WeakKeyDictionary[GraphStore, dict]" = weakref.WeakKeyDictionary()
        self.hits = 0
        self.misses = 0

    def get(self, store: GraphStore, role: Term) -> dict[Term, tuple[Term, ...]]:
        key = (role, store.epoch, store.version)
        with self._lock:
            entries = self._stores.setdefault(store, {})
            if key in entries:
                self.hits += 1
                return entries[key]
        grants = _direct_role_grants(store, role)
        with self._lock:
            self.misses += 1
            entries = self._stores.setdefault(store, {})
            # older epochs are never read again
            for stale in [k for k in entries if k[1:] != key[1:]]:
                del entries[stale]
            entries[key] = grants
        return grants


_cache = _RoleGrantCache()


def _direct_role_grants(store: GraphStore, role: Term) -> dict[Term, tuple[Term, ...]]:
    q = Query(
        select=("stream", "right"),
        bindings={"role": role},
        body=(pattern("?right", IOE.forRole, "?role"),),
        unions=(
            Group((pattern("?right", IOE.onSystem, "?s"), pattern("?stream", PROV.wasAttributedTo, "?s"))),
            Group((pattern("?right", IOE.onStream, "?stream"),)),
        ),
    )
    grants: dict[Term, set[Term]] = {}
    for row in store.query(q):
        grants.setdefault(row["stream"], set()).add(row["right"])
    return {s: tuple(sorted(r, key=term_key)) for s, r in grants.items()}


def _active_collaboration_grants(ctx: AgentContext, store: GraphStore) -> dict[Term, tuple[Term, ...]]:
    if ctx.activity is None or not store.has_resource(ctx.activity):
        return {}
    # a collaboration bound to a process covers the activities that are part of it
    elements = [ctx.activity] + store.objects(ctx.activity, IOE.partOf)
    grants: dict[Term, tuple[Term, ...]] = {}
    for element in elements:
        for row in store.query(collaboration_streams_query(ctx.agent, element)):
            if not collaboration_active(store, row["c"], ctx.now):
                continue
            grants.setdefault(row["stream"], (row["c"], row["r"]))
    return grants


def collaboration_active(store: GraphStore, collaboration: Term, now: int) -> bool:
    """Active on the closed-open interval [start, end)."""
    start = store.value(collaboration, IOE.startTime)
    end = store.value(collaboration, IOE.endTime)
    if start is None or end is None:
        return False
    return int(start.value) <= now < int(end.value)


def base_streams(store: GraphStore, stream: Term) -> list[Term]:
    """Source-attributed streams reachable through wasDerivedFrom."""
    seen: set[Term] = set()
    stack = list(store.objects(stream, PROV.wasDerivedFrom))
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        stack.extend(store.objects(node, PROV.wasDerivedFrom))
    seen.discard(stream)
    return sorted((s for s in seen if store.objects(s, PROV.wasAttributedTo)), key=term_key)


def _require_stream(store: GraphStore, stream: Term) -> None:
    if not store.triples(stream, A, SG.Stream):
        raise UnknownResourceError(f"unknown stream {stream.value}")


def accessible(ctx: AgentContext, stream: Term, store: GraphStore) -> AccessDecision:
    _require_stream(store, stream)
    role_grants = _cache.get(store, ctx.role) if ctx.role is not None else {}
    collab_grants = _active_collaboration_grants(ctx, store)
    return _decide(stream, store, role_grants, collab_grants)


def _decide(stream: Term, store: GraphStore, role_grants: dict, collab_grants: dict) -> AccessDecision:
    if stream in role_grants:
        return AccessDecision(True, Basis.ROLE_RIGHT, role_grants[stream])
    if stream in collab_grants:
        return AccessDecision(True, Basis.COLLABORATION, collab_grants[stream])
    bases = base_streams(store, stream)
    if bases and all(b in role_grants or b in collab_grants for b in bases):
        return AccessDecision(True, Basis.DERIVED_CLOSURE, tuple(bases))
    return DENIED


def accessible_many(ctx: AgentContext, streams: list[Term], store: GraphStore) -> dict[Term, AccessDecision]:
    """Decisions for several streams, sharing one grant lookup."""
    for stream in streams:
        _require_stream(store, stream)
    role_grants = _cache.get(store, ctx.role) if ctx.role is not None else {}
    collab_grants = _active_collaboration_grants(ctx, store)
    return {s: _decide(s, store, role_grants, collab_grants) for s in streams}


def accessible_streams_for_role(role: Term, store: GraphStore) -> set[Term]:
    return {row["stream"] for row in store.query(role_streams_query(role))}


def accessible_streams_for_collaboration(agent: Term, activity: Term, store: GraphStore, now: int | None = None) -> set[Term]:
    """Streams granted to ``agent`` for ``activity`` through collaborations.

    With ``now`` only collaborations active at that instant count.
    """
    out = set()
    for row in store.query(collaboration_streams_query(agent, activity)):
        if now is None or collaboration_active(store, row["c"], now):
            out.add(row["stream"])
    return out


def colocated_accessible_sensors(ctx: AgentContext, store: GraphStore) -> set[tuple[Term, str]]:
    if ctx.location is None:
        return set()
    rows = store.query(colocated_query(ctx.location))
    if not rows:
        return set()
    decisions = accessible_many(ctx, sorted({r["stream"] for r in rows}, key=term_key), store)
    return {(r["s"], str(r["topic"].value)) for r in rows if decisions[r["stream"]].granted}


def register_collaboration(collab: CollaborationDescriptor, store: GraphStore) -> int:
    """Insert a collaboration after checking the originator's role holds
    every right it grants."""
    triples = collaboration_triples_for_store(collab, store)
    count = store.insert(triples)
    logging.info(f"Registered collaboration {collab.id} ({collab.from_agent} -> {collab.to_agent}).")
    return count


def cache_stats() -> dict[str, int]:
    return {"hits": _cache.hits, "misses": _cache.misses}
