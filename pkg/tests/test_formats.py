import pytest

from kgstream.errors import ParseError, RuleSafetyError
from kgstream.formats import (
    RDF_TYPE,
    dump_ntriples,
    load_ntriples,
    load_rules,
    parse_document,
    parse_ntriples,
    parse_rules,
    save_ntriples,
)
from kgstream.kg import GraphStore, Term, TermKind, Triple, Variable, iri, literal


def test_parse_ntriples_terms():
    text = "\n".join(
        [
            "# comment",
            '<http://x/a> <http://x/p> "hello \\"world\\"" .',
            '<http://x/a> <http://x/n> "42"^^integer .',
            '<http://x/a> <http://x/d> "2.5"^^<http://www.w3.org/2001/XMLSchema#decimal> .',
            "_:b1 <http://x/p> <http://x/a> .",
            "",
        ]
    )
    triples = parse_ntriples(text)
    assert triples[0].object == literal('hello "world"')
    assert triples[1].object == Term(TermKind.INTEGER, 42)
    assert triples[2].object == Term(TermKind.DECIMAL, 2.5)
    assert triples[3].subject.kind is TermKind.BLANK


def test_blank_labels_are_scoped_to_one_parse():
    store = GraphStore()
    text = "_:x <http://x/p> <http://x/o> .\n_:x <http://x/q> <http://x/o> .\n"
    first = parse_ntriples(text, store.fresh_blank)
    second = parse_ntriples(text, store.fresh_blank)
    assert first[0].subject == first[1].subject
    assert first[0].subject != second[0].subject


@pytest.mark.parametrize(
    "line",
    [
        '"lit" <http://x/p> <http://x/o> .',
        "<http://x/s> <http://x/p> .",
        "<http://x/s> <http://x/p> <http://x/o>",
        "<> <http://x/p> <http://x/o> .",
        '<http://x/s> "p" <http://x/o> .',
    ],
)
def test_parse_ntriples_rejects_bad_lines(line):
    text = "<http://x/s> <http://x/p> <http://x/o> .\n" + line + "\n"
    with pytest.raises(ParseError) as info:
        parse_ntriples(text, source="bad.nt")
    assert info.value.line == 2
    assert "bad.nt:2" in info.value.message


def test_dump_is_sorted_and_reparses(tmp_path):
    triples = [
        Triple(iri("http://x/b"), iri("http://x/p"), literal("line\nbreak")),
        Triple(iri("http://x/a"), iri("http://x/p"), literal(7)),
    ]
    text = dump_ntriples(triples)
    assert text.startswith("<http://x/a>")
    assert set(parse_ntriples(text)) == set(triples)

    path = tmp_path / "graph" / "g.nt"
    save_ntriples(triples, path)
    store = GraphStore()
    assert load_ntriples(store, path) == 2


def test_parse_rules():
    rules = parse_rules(
        "\n".join(
            [
                "@prefix ex: <http://x/>",
                "@transitive ex:contains",
                "[located] ex:in(?s, ?z) & ex:Sensor(?s) -> ex:locatedIn(?s, ?z)",
                "ex:a(?x, ?y) ^ ex:b(?y, 3) -> ex:c(?x, ?y)  # inline comment",
            ]
        ),
        source="test.rules",
    )
    assert rules.transitive == [iri("http://x/contains")]
    located, anonymous = rules.rules
    assert located.name == "located"
    assert located.body[1].predicate == iri(RDF_TYPE)
    assert located.body[1].object == iri("http://x/Sensor")
    assert located.head.subject == Variable("s")
    assert anonymous.name == "test.rules:4"
    assert anonymous.body[1].object == literal(3)


def test_parse_rules_errors():
    with pytest.raises(ParseError) as info:
        parse_rules("@prefix ex: <http://x/>\nex:a(?x, ?y) ex:b(?y)")
    assert info.value.line == 2
    with pytest.raises(ParseError):
        parse_rules("nope:a(?x) -> nope:b(?x)")
    with pytest.raises(RuleSafetyError):
        parse_rules("@prefix ex: <http://x/>\nex:a(?x, ?y) -> ex:b(?x, ?z)")


def test_default_rules_load():
    rules = load_rules()
    names = {r.name for r in rules.rules}
    assert {"environment", "smart-object", "system", "sensor", "system-location"} <= names
    assert iri("https://w3id.org/bot#containsZone") in rules.transitive
    store = GraphStore()
    rules.install(store)
    assert len(store.rules) == len(rules.rules)


def test_parse_document():
    assert parse_document("") == {}
    assert parse_document("sites: [{id: plant}]") == {"sites": [{"id": "plant"}]}
    with pytest.raises(ParseError):
        parse_document("- just\n- a list\n")
    with pytest.raises(ParseError) as info:
        parse_document("sites:\n  - {id: plant\n")
    assert info.value.line is not None
