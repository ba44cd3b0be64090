"""Text formats: the N-Triples subset used for snapshots, the rules file and
descriptor YAML documents."""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import yaml
from rich.console import Console, Group
from rich.panel import Panel
from rich.style import Style
from rich.syntax import Syntax
from rich.text import Text

from .errors import ParseError
from .kg import (
    GraphStore,
    Rule,
    Term,
    TermKind,
    Triple,
    TriplePattern,
    Variable,
    blank,
    iri,
    literal,
)

DEFAULT_RULES_FILE = Path(__file__).parent / "default.rules"

XSD = "http://www.w3.org/2001/XMLSchema#"
RDF_TYPE = "http://www.w3.org/1999/02/22-rdf-syntax-ns#type"

_console = Console(stderr=True)


def throw_parsing_error(contents: str, line: int, message: str, source: str | None = None, lexer: str = "text"):
    """Show the offending line in a panel and raise a ParseError.

    ``line`` is 1-based.
    """
    lines = contents.split("\n")
    s = Syntax(
        contents,
        lexer,
        line_numbers=True,
        highlight_lines=[line],
        line_range=(max(1, line - 2), min(len(lines), line + 2)),
        theme="nord",
        word_wrap=True,
    )
    if 0 < line <= len(lines):
        s.stylize_range(Style(bgcolor="red", bold=True), (line, 0), (line, len(lines[line - 1])))
    where = source or "<input>"
    t = Text(f"Parsing error in {where} at line {line}: {message}.")
    _console.print(Panel(Group(t, Panel(s, padding=1)), title="Parsing error"))
    logging.error(f"Parsing error in {where} at line {line}: {message}")
    raise ParseError(message, line=line, source=source)


# -- N-Triples subset ------------------------------------------------------

_NT_TOKEN = re.compile(
    r"""\s*(?:
        <(?P<iri>[^<>\s]*)>
      | _:(?P<blank>[A-Za-z0-9_\-]+)
      | "(?P<lit>(?:[^"\\]|\\.)*)"(?:\^\^(?P<dt>integer|decimal|<[^<>\s]*>))?
      | (?P<dot>\.)
    )""",
    re.VERBOSE,
)

_UNESCAPE = {"\\\\": "\\", '\\"': '"', "\\n": "\n", "\\t": "\t", "\\r": "\r"}


def _unescape(text: str) -> str:
    return re.sub(r'\\[\\"ntr]', lambda m: _UNESCAPE[m.group(0)], text)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r")


def _literal_term(text: str, datatype: str | None) -> Term:
    value = _unescape(text)
    if datatype is None:
        return Term(TermKind.STRING, value)
    datatype = datatype.strip("<>").removeprefix(XSD)
    if datatype == "integer":
        return Term(TermKind.INTEGER, int(value))
    if datatype == "decimal":
        return Term(TermKind.DECIMAL, float(value))
    raise ValueError(f"unsupported datatype {datatype}")


def term_to_nt(term: Term) -> str:
    if term.kind is TermKind.IRI:
        return f"<{term.value}>"
    if term.kind is TermKind.BLANK:
        return f"_:{term.value}"
    if term.kind is TermKind.INTEGER:
        return f'"{term.value}"^^integer'
    if term.kind is TermKind.DECIMAL:
        return f'"{term.value!r}"^^decimal'
    return f'"{_escape(str(term.value))}"'


def triple_to_nt(t: Triple) -> str:
    return f"{term_to_nt(t.subject)} {term_to_nt(t.predicate)} {term_to_nt(t.object)} ."


def dump_ntriples(triples: Iterable[Triple]) -> str:
    """Serialize triples, one per line, in a stable order."""
    lines = sorted(triple_to_nt(t) for t in triples)
    return "\n".join(lines) + ("\n" if lines else "")


def parse_ntriples(contents: str, new_blank: Callable[[], Term] | None = None, source: str | None = None) -> list[Triple]:
    """Parse the N-Triples subset.

    Blank node labels are scoped to this call: each label is replaced by
    ``new_blank()`` the first time it is seen.
    """
    labels: dict[str, Term] = {}
    triples = []
    for number, line in enumerate(contents.split("\n"), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        terms: list[Term] = []
        pos = 0
        closed = False
        while pos < len(line):
            if not line[pos:].strip():
                break
            m = _NT_TOKEN.match(line, pos)
            if m is None or closed:
                throw_parsing_error(contents, number, f"unexpected text at column {pos + 1}", source)
            pos = m.end()
            if m.group("dot") is not None:
                closed = True
            elif m.group("iri") is not None:
                if not m.group("iri"):
                    throw_parsing_error(contents, number, "empty iri", source)
                terms.append(iri(m.group("iri")))
            elif m.group("blank") is not None:
                label = m.group("blank")
                if label not in labels:
                    labels[label] = new_blank() if new_blank is not None else blank(label)
                terms.append(labels[label])
            else:
                try:
                    terms.append(_literal_term(m.group("lit"), m.group("dt")))
                except ValueError as e:
                    throw_parsing_error(contents, number, str(e), source)
        if not closed or len(terms) != 3:
            throw_parsing_error(contents, number, "expected three terms followed by '.'", source)
        s, p, o = terms
        if not s.is_resource:
            throw_parsing_error(contents, number, "literal in subject position", source)
        if p.kind is not TermKind.IRI:
            throw_parsing_error(contents, number, "predicate must be an iri", source)
        triples.append(Triple(s, p, o))
    return triples


def load_ntriples(store: GraphStore, path: Path | str) -> int:
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        triples = parse_ntriples(f.read(), store.fresh_blank, source=str(path))
    return store.insert(triples)


def save_ntriples(triples: Iterable[Triple], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        f.write(dump_ntriples(triples))


# -- rules files -----------------------------------------------------------

@dataclass
class RuleSet:
    rules: list[Rule] = field(default_factory=list)
    transitive: list[Term] = field(default_factory=list)
    prefixes: dict[str, str] = field(default_factory=dict)

    def install(self, store: GraphStore) -> None:
        for prop in self.transitive:
            store.declare_transitive(prop)
        for rule in self.rules:
            store.register_rule(rule)


_PREFIX_LINE = re.compile(r"^@prefix\s+(?P<name>[A-Za-z][\w\-]*)?:\s*<(?P<iri>[^<>\s]+)>\s*\.?$")
_TRANSITIVE_LINE = re.compile(r"^@transitive\s+(?P<props>.+?)\s*\.?$")
_RULE_NAME = re.compile(r"^\[(?P<name>[^\]]+)\]\s*")
_ATOM = re.compile(r"\s*(?P<pred>[^\s()&^]+)\s*\((?P<args>[^()]*)\)\s*")
_ARG = re.compile(r"""\s*(?:\?(?P<var>\w+)|<(?P<iri>[^<>\s]+)>|"(?P<lit>(?:[^"\\]|\\.)*)"|(?P<num>[-+]?\d+(?:\.\d+)?)|(?P<curie>[A-Za-z][\w\-]*:[\w\-./#]*))\s*(?:,|$)""")


def _expand(curie: str, prefixes: dict[str, str]) -> str:
    if curie.startswith("<") and curie.endswith(">"):
        return curie[1:-1]
    name, sep, local = curie.partition(":")
    if not sep or name not in prefixes:
        raise ValueError(f"unknown prefix in {curie!r}")
    return prefixes[name] + local


def _parse_args(text: str, prefixes: dict[str, str]) -> list[Term | Variable]:
    args: list[Term | Variable] = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _ARG.match(text, pos)
        if m is None or m.end() == pos:
            raise ValueError(f"cannot read argument {text[pos:]!r}")
        pos = m.end()
        if m.group("var") is not None:
            args.append(Variable(m.group("var")))
        elif m.group("iri") is not None:
            args.append(iri(m.group("iri")))
        elif m.group("lit") is not None:
            args.append(Term(TermKind.STRING, _unescape(m.group("lit"))))
        elif m.group("num") is not None:
            num = m.group("num")
            args.append(literal(float(num)) if "." in num else literal(int(num)))
        else:
            args.append(iri(_expand(m.group("curie"), prefixes)))
    return args


def _parse_atom(text: str, prefixes: dict[str, str]) -> TriplePattern:
    m = _ATOM.fullmatch(text)
    if m is None:
        raise ValueError(f"cannot read atom {text.strip()!r}")
    pred = iri(_expand(m.group("pred"), prefixes))
    args = _parse_args(m.group("args"), prefixes)
    if len(args) == 1:
        # class atom: Class(?x)
        return TriplePattern(args[0], iri(RDF_TYPE), pred)
    if len(args) != 2:
        raise ValueError(f"atom {m.group('pred')} takes one or two arguments, got {len(args)}")
    return TriplePattern(args[0], pred, args[1])


def parse_rules(contents: str, source: str | None = None) -> RuleSet:
    """Parse a rules file.

    Every non-empty line is a prefix declaration, a transitive declaration, a
    ``#`` comment or a rule ``[name] a(?x, ?y) & b(?y, ?z) -> c(?x, ?z)``.
    ``^`` is accepted in place of ``&``.
    """
    ruleset = RuleSet()
    for number, line in enumerate(contents.split("\n"), start=1):
        text = line.split(" #", 1)[0].strip()
        if not text or text.startswith("#"):
            continue
        try:
            if text.startswith("@prefix"):
                m = _PREFIX_LINE.match(text)
                if m is None:
                    raise ValueError("malformed @prefix declaration")
                ruleset.prefixes[m.group("name") or ""] = m.group("iri")
                continue
            if text.startswith("@transitive"):
                m = _TRANSITIVE_LINE.match(text)
                if m is None:
                    raise ValueError("malformed @transitive declaration")
                for prop in m.group("props").split():
                    ruleset.transitive.append(iri(_expand(prop, ruleset.prefixes)))
                continue
            name = ""
            m = _RULE_NAME.match(text)
            if m is not None:
                name = m.group("name").strip()
                text = text[m.end():]
            body_text, arrow, head_text = text.partition("->")
            if not arrow:
                raise ValueError("rule has no '->'")
            body = tuple(_parse_atom(a, ruleset.prefixes) for a in re.split(r"[&^]", body_text) if a.strip())
            head = _parse_atom(head_text, ruleset.prefixes)
            rule = Rule(body, head, name or f"{source or 'rules'}:{number}")
            rule.check()
        except ValueError as e:
            throw_parsing_error(contents, number, str(e), source)
        ruleset.rules.append(rule)
    logging.debug(f"Parsed {len(ruleset.rules)} rules and {len(ruleset.transitive)} transitive properties from {source or '<input>'}.")
    return ruleset


def load_rules(path: Path | str | None = None) -> RuleSet:
    path = Path(path) if path is not None else DEFAULT_RULES_FILE
    with path.open("r", encoding="utf-8") as f:
        return parse_rules(f.read(), source=str(path))


# -- descriptor documents --------------------------------------------------

def parse_document(contents: str, source: str | None = None) -> dict:
    """Parse one YAML descriptor document into a plain mapping."""
    try:
        document = yaml.safe_load(contents)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        problem = getattr(e, "problem", None) or str(e)
        throw_parsing_error(contents, line, problem, source, lexer="yaml")
    if document is None:
        return {}
    if not isinstance(document, dict):
        throw_parsing_error(contents, 1, "a descriptor document must be a mapping", source, lexer="yaml")
    return document


def load_document(path: Path | str) -> dict:
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        return parse_document(f.read(), source=str(path))
