import random

import pytest

from kgstream.errors import MalformedQueryError, MalformedTripleError, RuleSafetyError
from kgstream.kg import (
    GraphStore,
    Group,
    Query,
    Rule,
    Term,
    TermKind,
    Triple,
    TriplePattern,
    Variable,
    iri,
    literal,
    pattern,
)

EX = "http://example.org/"


def ex(name: str) -> Term:
    return iri(EX + name)


def t(s: str, p: str, o: str | Term) -> Triple:
    return Triple(ex(s), ex(p), o if isinstance(o, Term) else ex(o))


def test_insert_is_idempotent():
    store = GraphStore()
    assert store.insert([t("a", "knows", "b"), t("b", "knows", "c")]) == 2
    version = store.version
    assert store.insert([t("a", "knows", "b")]) == 0
    assert store.version == version
    assert store.epoch == 0
    assert len(store) == 2


def test_literal_subject_is_rejected():
    store = GraphStore()
    with pytest.raises(MalformedTripleError):
        store.insert([Triple(literal("x"), ex("p"), ex("o"))])
    with pytest.raises(MalformedTripleError):
        store.insert([Triple(ex("s"), literal("p"), ex("o"))])
    with pytest.raises(MalformedTripleError):
        iri("")
    assert len(store) == 0


def test_literals_keep_their_kind():
    assert literal(3).kind is TermKind.INTEGER
    assert literal(2.5).kind is TermKind.DECIMAL
    assert literal(True) == Term(TermKind.STRING, "true")
    assert literal("3") != literal(3)


def test_query_joins_and_binds():
    store = GraphStore()
    store.insert([t("a", "knows", "b"), t("b", "knows", "c"), t("c", "age", literal(40))])
    q = Query(
        select=("x", "z"),
        body=(pattern("?x", EX + "knows", "?y"), pattern("?y", EX + "knows", "?z")),
    )
    assert store.query(q) == [{"x": ex("a"), "z": ex("c")}]

    prebound = Query(select=("y",), body=(pattern("?x", EX + "knows", "?y"),), bindings={"x": ex("b")})
    assert store.query(prebound) == [{"y": ex("c")}]


def test_query_union_and_negation():
    store = GraphStore()
    store.insert(
        [
            t("a", "type", "Sensor"),
            t("b", "type", "Sensor"),
            t("c", "type", "Gateway"),
            t("b", "retired", literal("yes")),
            t("c", "observes", "co2"),
        ]
    )
    q = Query(
        select=("x",),
        unions=(
            Group((pattern("?x", EX + "type", EX + "Sensor"),)),
            Group((pattern("?x", EX + "observes", "?p"),)),
        ),
        negations=(Group((pattern("?x", EX + "retired", "?r"),)),),
    )
    assert sorted(r["x"].value for r in store.query(q)) == [EX + "a", EX + "c"]
    assert store.ask(q)


def test_nested_negation():
    store = GraphStore()
    store.insert([t("s1", "in", "z1"), t("s2", "in", "z2"), t("z2", "closed", "yes")])
    # sensors in a zone that is not closed
    q = Query(
        select=("s",),
        body=(pattern("?s", EX + "in", "?z"),),
        negations=(Group((pattern("?z", EX + "closed", "?c"),)),),
    )
    assert [r["s"] for r in store.query(q)] == [ex("s1")]


def test_malformed_queries():
    store = GraphStore()
    with pytest.raises(MalformedQueryError):
        store.query(Query(select=("missing",), body=(pattern("?x", EX + "p", "?y"),)))
    with pytest.raises(MalformedQueryError):
        store.query(
            Query(
                select=("x",),
                body=(pattern("?x", EX + "p", "?y"),),
                negations=(Group((pattern("?a", EX + "q", "?b"),)),),
            )
        )


def test_unsafe_rules_are_rejected():
    store = GraphStore()
    unsafe = Rule((pattern("?x", EX + "p", "?y"),), pattern("?x", EX + "q", "?z"), "unsafe")
    with pytest.raises(RuleSafetyError):
        store.register_rule(unsafe)
    with pytest.raises(RuleSafetyError):
        store.register_rule(Rule((), pattern(ex("a"), EX + "q", ex("b")), "empty"))
    with pytest.raises(RuleSafetyError):
        store.register_rule(Rule((pattern("?x", "?p", "?y"),), TriplePattern(Variable("x"), Variable("p"), Variable("y"))))


def test_transitive_closure_bumps_epoch():
    store = GraphStore()
    store.insert([t("a", "contains", "b"), t("b", "contains", "c"), t("c", "contains", "d")])
    assert store.materialize_transitive(ex("contains")) == 3
    assert t("a", "contains", "d") in store.inferred
    assert store.epoch == 1
    assert store.materialize_transitive(ex("contains")) == 0
    assert store.epoch == 2


def test_asserting_an_inferred_triple_moves_it():
    store = GraphStore()
    store.insert([t("a", "contains", "b"), t("b", "contains", "c")])
    store.materialize_transitive(ex("contains"))
    store.insert([t("a", "contains", "c")])
    assert t("a", "contains", "c") in store.asserted
    assert t("a", "contains", "c") not in store.inferred
    assert len(store.triples(ex("a"), ex("contains"), None)) == 2


def test_materialize_reports_counts_per_rule():
    store = GraphStore()
    store.insert([t("r1", "onSite", "hall"), t("hall", "contains", "line"), t("sensor", "in", "line")])
    store.declare_transitive(ex("contains"))
    store.register_rule(
        Rule(
            (pattern("?r", EX + "onSite", "?s"), pattern("?s", EX + "contains", "?z"), pattern("?x", EX + "in", "?z")),
            pattern("?r", EX + "onSensor", "?x"),
            "site",
        )
    )
    counts = store.materialize()
    assert counts["site"] == 1
    assert t("r1", "onSensor", "sensor") in store


# -- randomized fixpoint check ---------------------------------------------------

def _unify(pat: TriplePattern, triple: Triple, binding: dict) -> dict | None:
    out = dict(binding)
    for slot, term in zip(pat, triple):
        if isinstance(slot, Variable):
            if out.setdefault(slot.name, term) != term:
                return None
        elif slot != term:
            return None
    return out


def _matches(patterns: list, facts_by_p: dict, binding: dict):
    if not patterns:
        yield binding
        return
    first = patterns[0]
    for fact in facts_by_p.get(first.predicate, ()):
        extended = _unify(first, fact, binding)
        if extended is not None:
            yield from _matches(patterns[1:], facts_by_p, extended)


def naive_fixpoint(triples, rules, transitive) -> set[Triple]:
    facts = set(triples)
    while True:
        by_p: dict = {}
        for f in facts:
            by_p.setdefault(f.predicate, []).append(f)
        new = set()
        for rule in rules:
            for b in _matches(list(rule.body), by_p, {}):
                head = Triple(*(b[s.name] if isinstance(s, Variable) else s for s in rule.head))
                if head not in facts:
                    new.add(head)
        for prop in transitive:
            edges = [(f.subject, f.object) for f in by_p.get(prop, [])]
            for a, b in edges:
                for c, d in edges:
                    if b == c and Triple(a, prop, d) not in facts:
                        new.add(Triple(a, prop, d))
        if not new:
            return facts
        facts |= new


def random_program(rnd: random.Random):
    entities = [ex(f"e{i}") for i in range(8)]
    preds = [ex(f"p{i}") for i in range(4)]
    triples = {Triple(rnd.choice(entities), rnd.choice(preds), rnd.choice(entities)) for _ in range(25)}
    rules = []
    for n in range(rnd.randint(1, 4)):
        size = rnd.randint(1, 3)
        names = [f"v{i}" for i in range(size + 1)]
        body = []
        for i in range(size):
            a, b = Variable(names[i]), Variable(names[i + 1])
            if rnd.random() < 0.5:
                a, b = b, a
            body.append(TriplePattern(a, rnd.choice(preds), b))
        head = TriplePattern(Variable(rnd.choice(names)), rnd.choice(preds), Variable(rnd.choice(names)))
        rules.append(Rule(tuple(body), head, f"r{n}"))
    transitive = rnd.sample(preds, rnd.randint(0, 2))
    return triples, rules, transitive


def test_materialization_matches_naive_fixpoint():
    rnd = random.Random(7)
    for _ in range(50):
        triples, rules, transitive = random_program(rnd)
        store = GraphStore()
        store.insert(triples)
        for prop in transitive:
            store.declare_transitive(prop)
        for rule in rules:
            store.register_rule(rule)
        store.materialize()
        expected = naive_fixpoint(triples, rules, transitive)
        assert store.asserted | store.inferred == expected
        assert not store.asserted & store.inferred


def test_apply_rules_alone_matches_naive_fixpoint():
    rnd = random.Random(11)
    for _ in range(20):
        triples, rules, _ = random_program(rnd)
        store = GraphStore()
        store.insert(triples)
        store.apply_rules(rules)
        assert store.asserted | store.inferred == naive_fixpoint(triples, rules, [])
