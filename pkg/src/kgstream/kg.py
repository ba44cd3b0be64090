"""Embedded triple store.

The store keeps asserted and inferred triples apart, indexes their union and
answers conjunctive pattern queries with unions, nested NOT-EXISTS groups and
pre-bound variables. Horn rules are forward chained semi-naively and
transitive properties are closed explicitly; every materialization bumps the
store epoch.
"""
import itertools
import logging
import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Iterable, Iterator, Mapping, NamedTuple

from .errors import MalformedQueryError, MalformedTripleError, RuleSafetyError


class TermKind(Enum):
    IRI = auto()
    STRING = auto()
    INTEGER = auto()
    DECIMAL = auto()
    BLANK = auto()


class Term(NamedTuple):
    kind: TermKind
    value: str | int | float

    @property
    def is_resource(self) -> bool:
        return self.kind is TermKind.IRI or self.kind is TermKind.BLANK

    def local_name(self) -> str:
        """The part of an iri after the last ``#`` or ``/``."""
        text = str(self.value)
        cut = max(text.rfind("#"), text.rfind("/"))
        return text[cut + 1:] if cut >= 0 else text

    def __str__(self) -> str:
        return str(self.value)


class Variable(NamedTuple):
    name: str

    def __str__(self) -> str:
        return f"?{self.name}"


def iri(value: str) -> Term:
    if not value:
        raise MalformedTripleError("iri values must be non-empty")
    return Term(TermKind.IRI, value)


def literal(value: str | int | float | bool) -> Term:
    if isinstance(value, bool):
        return Term(TermKind.STRING, "true" if value else "false")
    if isinstance(value, int):
        return Term(TermKind.INTEGER, value)
    if isinstance(value, float):
        return Term(TermKind.DECIMAL, value)
    return Term(TermKind.STRING, str(value))


def blank(label: str) -> Term:
    return Term(TermKind.BLANK, label)


def var(name: str) -> Variable:
    name = name.lstrip("?")
    if not name:
        raise MalformedQueryError("variable names must be non-empty")
    return Variable(name)


class Triple(NamedTuple):
    subject: Term
    predicate: Term
    object: Term


PatternTerm = Term | Variable


class TriplePattern(NamedTuple):
    subject: PatternTerm
    predicate: PatternTerm
    object: PatternTerm

    def variables(self) -> set[str]:
        return {t.name for t in self if isinstance(t, Variable)}


def pattern(s: PatternTerm | str, p: PatternTerm | str, o: PatternTerm | str) -> TriplePattern:
    """Build a pattern; plain strings starting with ``?`` are variables, other
    strings are iris."""

    def convert(x):
        if isinstance(x, str):
            return var(x) if x.startswith("?") else iri(x)
        return x

    return TriplePattern(convert(s), convert(p), convert(o))


@dataclass(frozen=True)
class Group:
    """A conjunction of patterns filtered by NOT-EXISTS groups."""

    patterns: tuple[TriplePattern, ...]
    negations: tuple["Group", ...] = ()

    def variables(self) -> set[str]:
        out: set[str] = set()
        for p in self.patterns:
            out |= p.variables()
        return out


@dataclass(frozen=True)
class Query:
    select: tuple[str, ...]
    body: tuple[TriplePattern, ...] = ()
    unions: tuple[Group, ...] = ()
    negations: tuple[Group, ...] = ()
    bindings: Mapping[str, Term] = field(default_factory=dict)

    def positive_variables(self) -> set[str]:
        out = set(self.bindings)
        for p in self.body:
            out |= p.variables()
        for branch in self.unions:
            out |= branch.variables()
        return out

    def check(self) -> None:
        positive = self.positive_variables()
        for name in self.select:
            if name not in positive:
                raise MalformedQueryError(f"select variable ?{name} is not bound by any pattern")
        base = set(self.bindings)
        for p in self.body:
            base |= p.variables()
        for group in self.negations:
            _check_negation(group, positive)
        for branch in self.unions:
            for group in branch.negations:
                _check_negation(group, base | branch.variables())


def _check_negation(group: Group, scope: set[str]) -> None:
    if not group.patterns:
        raise MalformedQueryError("negation groups must contain at least one pattern")
    if not group.variables() & scope:
        raise MalformedQueryError("negation group shares no variable with its enclosing scope")
    for inner in group.negations:
        _check_negation(inner, scope | group.variables())


@dataclass(frozen=True)
class Rule:
    body: tuple[TriplePattern, ...]
    head: TriplePattern
    name: str = ""

    def check(self) -> None:
        if not self.body:
            raise RuleSafetyError(f"rule {self.name or self.head} has an empty body")
        if isinstance(self.head.predicate, Variable) or self.head.predicate.kind is not TermKind.IRI:
            raise RuleSafetyError(f"rule {self.name or self.head} must have a constant iri head predicate")
        body_vars: set[str] = set()
        for p in self.body:
            body_vars |= p.variables()
        unsafe = self.head.variables() - body_vars
        if unsafe:
            names = ", ".join(sorted(f"?{v}" for v in unsafe))
            raise RuleSafetyError(f"rule {self.name or self.head} is unsafe: {names} not bound in body")


class ReadWriteLock:
    """Many readers or one writer. Read sections are re-entrant per thread."""

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer: int | None = None
        self._waiting_writers = 0
        self._local = threading.local()

    @contextmanager
    def read(self):
        depth = getattr(self._local, "depth", 0)
        me = threading.get_ident()
        if depth == 0 and self._writer != me:
            with self._cond:
                while self._writer is not None or self._waiting_writers:
                    self._cond.wait()
                self._readers += 1
        self._local.depth = depth + 1
        try:
            yield
        finally:
            self._local.depth = depth
            if depth == 0 and self._writer != me:
                with self._cond:
                    self._readers -= 1
                    if self._readers == 0:
                        self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._waiting_writers += 1
            while self._writer is not None or self._readers:
                self._cond.wait()
            self._waiting_writers -= 1
            self._writer = threading.get_ident()
        try:
            yield
        finally:
            with self._cond:
                self._writer = None
                self._cond.notify_all()


_EMPTY: frozenset = frozenset()


def _unify(pat: TriplePattern, triple: Triple, binding: dict) -> dict | None:
    out = binding
    for slot, term in zip(pat, triple):
        if isinstance(slot, Variable):
            bound = out.get(slot.name)
            if bound is None:
                if out is binding:
                    out = dict(binding)
                out[slot.name] = term
            elif bound != term:
                return None
        elif slot != term:
            return None
    return out


def _resolve(slot: PatternTerm, binding: Mapping[str, Term]) -> Term | None:
    if isinstance(slot, Variable):
        return binding.get(slot.name)
    return slot


def instantiate(pat: TriplePattern, binding: Mapping[str, Term]) -> Triple | None:
    """Ground a pattern; None when a variable is unbound or the subject is a literal."""
    terms = [_resolve(slot, binding) for slot in pat]
    if any(t is None for t in terms):
        return None
    s, p, o = terms
    if not s.is_resource or p.kind is not TermKind.IRI:
        return None
    return Triple(s, p, o)


class GraphStore:
    def __init__(self):
        self.asserted: set[Triple] = set()
        self.inferred: set[Triple] = set()
        self.epoch = 0
        # bumped by every change, asserted or inferred
        self.version = 0
        self.transitive: set[Term] = set()
        self.rules: list[Rule] = []
        self.lock = ReadWriteLock()
        self._by_s: dict[Term, set[Triple]] = {}
        self._by_p: dict[Term, set[Triple]] = {}
        self._by_o: dict[Term, set[Triple]] = {}
        self._by_po: dict[tuple[Term, Term], set[Triple]] = {}
        self._by_sp: dict[tuple[Term, Term], set[Triple]] = {}
        self._blank_ids = itertools.count(1)

    def __len__(self) -> int:
        return len(self.asserted) + len(self.inferred)

    def __contains__(self, triple: Triple) -> bool:
        return triple in self.asserted or triple in self.inferred

    # -- writing ---------------------------------------------------------

    def fresh_blank(self) -> Term:
        return blank(f"b{next(self._blank_ids)}")

    def insert(self, triples: Iterable[Triple]) -> int:
        """Assert triples. Re-inserting is a no-op; the epoch does not move."""
        triples = list(triples)
        for t in triples:
            _check_triple(t)
        count = 0
        with self.lock.write():
            for t in triples:
                if t in self.asserted:
                    continue
                self.asserted.add(t)
                if t in self.inferred:
                    self.inferred.discard(t)
                else:
                    self._index(t)
                count += 1
            if count:
                self.version += 1
        logging.debug(f"Inserted {count} of {len(triples)} triples.")
        return count

    def declare_transitive(self, prop: Term) -> None:
        self.transitive.add(prop)

    def register_rule(self, rule: Rule) -> None:
        rule.check()
        self.rules.append(rule)

    def _index(self, t: Triple) -> None:
        self._by_s.setdefault(t.subject, set()).add(t)
        self._by_p.setdefault(t.predicate, set()).add(t)
        self._by_o.setdefault(t.object, set()).add(t)
        self._by_po.setdefault((t.predicate, t.object), set()).add(t)
        self._by_sp.setdefault((t.subject, t.predicate), set()).add(t)

    def _add_inferred(self, triples: Iterable[Triple]) -> int:
        count = 0
        for t in triples:
            if t in self.asserted or t in self.inferred:
                continue
            self.inferred.add(t)
            self._index(t)
            count += 1
        return count

    def insert_inferred(self, triples: Iterable[Triple]) -> int:
        """Restore previously materialized triples, e.g. from a saved graph."""
        triples = list(triples)
        for t in triples:
            _check_triple(t)
        with self.lock.write():
            count = self._add_inferred(triples)
            if count:
                self.version += 1
        return count

    # -- materialization --------------------------------------------------

    def materialize_transitive(self, prop: Term) -> int:
        """Close ``prop`` transitively; returns the number of new inferred triples."""
        self.transitive.add(prop)
        with self.lock.write():
            count = self._close_transitive(prop)
            self.epoch += 1
            self.version += 1
        logging.info(f"Transitive closure of {prop}: {count} inferred (epoch {self.epoch}).")
        return count

    def apply_rules(self, rules: Iterable[Rule] | None = None) -> int:
        rules = list(self.rules if rules is None else rules)
        for rule in rules:
            rule.check()
        with self.lock.write():
            count = self._apply_rules(rules, None)
            self.epoch += 1
            self.version += 1
        logging.info(f"Applied {len(rules)} rules: {count} inferred (epoch {self.epoch}).")
        return count

    def materialize(self, rules: Iterable[Rule] | None = None) -> dict[str, int]:
        """Run rules and transitive closures to a joint fixpoint.

        Returns
        -------
        dict[str, int]
            Inferred triple counts keyed by rule name or transitive property.
        """
        rules = list(self.rules if rules is None else rules)
        for rule in rules:
            rule.check()
        counts: dict[str, int] = defaultdict(int)
        with self.lock.write():
            while True:
                added = self._apply_rules(rules, counts)
                for prop in sorted(self.transitive, key=term_key):
                    n = self._close_transitive(prop)
                    counts[str(prop)] += n
                    added += n
                if added == 0:
                    break
            self.epoch += 1
            self.version += 1
        logging.info(f"Materialized {sum(counts.values())} triples (epoch {self.epoch}).")
        return dict(counts)

    def _close_transitive(self, prop: Term) -> int:
        succ: dict[Term, set[Term]] = defaultdict(set)
        for t in self._by_p.get(prop, _EMPTY):
            succ[t.subject].add(t.object)
        new: set[Triple] = set()
        for start in list(succ):
            seen: set[Term] = set()
            stack = list(succ[start])
            while stack:
                node = stack.pop()
                if node in seen:
                    continue
                seen.add(node)
                stack.extend(succ.get(node, ()))
            for node in seen:
                t = Triple(start, prop, node)
                if t not in self:
                    new.add(t)
        return self._add_inferred(new)

    def _apply_rules(self, rules: list[Rule], counts: dict[str, int] | None) -> int:
        total = 0
        delta = self._fire(rules, None, counts)
        while delta:
            total += self._add_inferred(delta)
            by_predicate: dict[Term, list[Triple]] = defaultdict(list)
            for t in delta:
                by_predicate[t.predicate].append(t)
            delta = self._fire(rules, by_predicate, counts)
        return total

    def _fire(self, rules: list[Rule], delta: dict[Term, list[Triple]] | None, counts: dict[str, int] | None) -> set[Triple]:
        new: set[Triple] = set()

        def emit(rule: Rule, binding: dict) -> None:
            t = instantiate(rule.head, binding)
            if t is None or t in new or t in self:
                return
            new.add(t)
            if counts is not None:
                counts[rule.name or str(rule.head.predicate)] += 1

        for rule in rules:
            if delta is None:
                for binding in self._solve(list(rule.body), {}):
                    emit(rule, binding)
                continue
            for i, pat in enumerate(rule.body):
                if isinstance(pat.predicate, Variable):
                    candidates = itertools.chain.from_iterable(delta.values())
                else:
                    candidates = delta.get(pat.predicate, ())
                rest = list(rule.body[:i]) + list(rule.body[i + 1:])
                for t in candidates:
                    binding = _unify(pat, t, {})
                    if binding is None:
                        continue
                    for full in self._solve(rest, binding):
                        emit(rule, full)
        return new

    # -- reading ----------------------------------------------------------

    def _candidates(self, s: Term | None, p: Term | None, o: Term | None) -> Iterable[Triple]:
        if s is not None and p is not None:
            found = self._by_sp.get((s, p), _EMPTY)
            if o is None:
                return found
            t = Triple(s, p, o)
            return (t,) if t in found else ()
        if p is not None and o is not None:
            return self._by_po.get((p, o), _EMPTY)
        if s is not None and o is not None:
            by_s = self._by_s.get(s, _EMPTY)
            by_o = self._by_o.get(o, _EMPTY)
            if len(by_s) <= len(by_o):
                return [t for t in by_s if t.object == o]
            return [t for t in by_o if t.subject == s]
        if s is not None:
            return self._by_s.get(s, _EMPTY)
        if o is not None:
            return self._by_o.get(o, _EMPTY)
        if p is not None:
            return self._by_p.get(p, _EMPTY)
        return itertools.chain(self.asserted, self.inferred)

    def _estimate(self, pat: TriplePattern, binding: Mapping[str, Term]) -> int:
        s, p, o = (_resolve(slot, binding) for slot in pat)
        if s is not None and p is not None:
            if o is not None:
                return 1 if Triple(s, p, o) in self else 0
            return len(self._by_sp.get((s, p), _EMPTY))
        if p is not None and o is not None:
            return len(self._by_po.get((p, o), _EMPTY))
        if s is not None and o is not None:
            return min(len(self._by_s.get(s, _EMPTY)), len(self._by_o.get(o, _EMPTY)))
        if s is not None:
            return len(self._by_s.get(s, _EMPTY))
        if o is not None:
            return len(self._by_o.get(o, _EMPTY))
        if p is not None:
            return len(self._by_p.get(p, _EMPTY))
        return len(self)

    def _solve(self, patterns: list[TriplePattern], binding: dict) -> Iterator[dict]:
        if not patterns:
            yield binding
            return
        # most selective pattern first, re-evaluated at every join level
        best, best_cost = 0, None
        for i, pat in enumerate(patterns):
            cost = self._estimate(pat, binding)
            if best_cost is None or cost < best_cost:
                best, best_cost = i, cost
                if cost == 0:
                    return
        pat = patterns[best]
        rest = patterns[:best] + patterns[best + 1:]
        s, p, o = (_resolve(slot, binding) for slot in pat)
        for t in self._candidates(s, p, o):
            extended = _unify(pat, t, binding)
            if extended is not None:
                yield from self._solve(rest, extended)

    def _solve_group(self, group: Group, binding: dict) -> Iterator[dict]:
        for row in self._solve(list(group.patterns), binding):
            if not any(self._exists(neg, row) for neg in group.negations):
                yield row

    def _exists(self, group: Group, binding: dict) -> bool:
        for _ in self._solve_group(group, binding):
            return True
        return False

    def _rows(self, q: Query) -> Iterator[dict]:
        branches = q.unions or (Group(()),)
        for row in self._solve(list(q.body), dict(q.bindings)):
            for branch in branches:
                for full in self._solve_group(branch, row):
                    if not any(self._exists(neg, full) for neg in q.negations):
                        yield full

    def query(self, q: Query) -> list[dict[str, Term | None]]:
        """Evaluate a query; rows are distinct over the selected variables."""
        q.check()
        rows: list[dict[str, Term | None]] = []
        seen: set[tuple] = set()
        with self.lock.read():
            for full in self._rows(q):
                key = tuple(full.get(v) for v in q.select)
                if key in seen:
                    continue
                seen.add(key)
                rows.append(dict(zip(q.select, key)))
        return rows

    def ask(self, q: Query) -> bool:
        q.check()
        with self.lock.read():
            for _ in self._rows(q):
                return True
        return False

    def triples(self, s: Term | None = None, p: Term | None = None, o: Term | None = None) -> list[Triple]:
        with self.lock.read():
            return list(self._candidates(s, p, o))

    def objects(self, s: Term, p: Term, asserted_only: bool = False) -> list[Term]:
        with self.lock.read():
            found = self._by_sp.get((s, p), _EMPTY)
            return [t.object for t in found if not asserted_only or t in self.asserted]

    def value(self, s: Term, p: Term, asserted_only: bool = False) -> Term | None:
        found = self.objects(s, p, asserted_only)
        return min(found, key=term_key) if found else None

    def subjects(self, p: Term, o: Term) -> list[Term]:
        with self.lock.read():
            return [t.subject for t in self._by_po.get((p, o), _EMPTY)]

    def has_resource(self, term: Term) -> bool:
        with self.lock.read():
            return bool(self._by_s.get(term) or self._by_o.get(term))


def term_key(term: Term) -> tuple:
    """Total order over terms of mixed kinds."""
    return (term.kind.value, str(term.value))


def _check_triple(t: Triple) -> None:
    if not isinstance(t, tuple) or len(t) != 3 or not all(isinstance(x, Term) for x in t):
        raise MalformedTripleError(f"not a triple of terms: {t!r}")
    s, p, o = t
    if not s.is_resource:
        raise MalformedTripleError(f"literal {s.value!r} cannot be a subject")
    if p.kind is not TermKind.IRI:
        raise MalformedTripleError(f"predicate {p.value!r} must be an iri")
    for term in t:
        if term.kind is TermKind.IRI and not term.value:
            raise MalformedTripleError("iri values must be non-empty")
