"""First-order query computation graphs.

A query is an immutable tree of :class:`Anchor`, :class:`Projection`,
:class:`Intersection`, :class:`Negation` and :class:`Union` nodes. The root
is the target variable. This module parses and prints the s-expression DSL::

    (e 7)                       anchor entity 7
    (p 3 (e 7))                 entities reached from 7 via relation 3
    (and Q1 Q2 ...)             intersection
    (or Q1 Q2 ...)              union
    (not Q)                     complement w.r.t. all entities

and provides the union rewrites (De Morgan / DNF), exact set evaluation and
structure classification for the 14 benchmark templates.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Tuple, Union as TUnion


@dataclass(frozen=True)
class Anchor:
    entity: int


@dataclass(frozen=True)
class Projection:
    relation: int
    child: "Query"


@dataclass(frozen=True)
class Intersection:
    children: Tuple["Query", ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("intersection needs at least 2 children")


@dataclass(frozen=True)
class Negation:
    child: "Query"


@dataclass(frozen=True)
class Union:
    children: Tuple["Query", ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("union needs at least 2 children")


Query = TUnion[Anchor, Projection, Intersection, Negation, Union]


class QuerySyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


class StructureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# DSL

_TOKEN = re.compile(r"\s*(?:(\()|(\))|([^\s()]+))")


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        start = m.start(m.lastindex)
        tokens.append((m.group(m.lastindex), start))
        pos = m.end()
    return tokens


def parse_query(text: str, num_entities: Optional[int] = None,
                num_relations: Optional[int] = None) -> Query:
    """Parse a DSL string. Optional vocabulary sizes enable id range checks."""
    if not text.isascii():
        raise QuerySyntaxError("non-ASCII input", 0)
    tokens = _tokenize(text)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else (None, len(text))

    def expect(tok):
        nonlocal pos
        got, at = peek()
        if got != tok:
            raise QuerySyntaxError(f"expected {tok!r}, got {got!r}" if got else f"expected {tok!r}, got end of input", at)
        pos += 1

    def integer(kind, bound):
        nonlocal pos
        got, at = peek()
        if got is None or not re.fullmatch(r"\d+", got):
            raise QuerySyntaxError(f"expected {kind} id, got " + (repr(got) if got else "end of input"), at)
        pos += 1
        value = int(got)
        if bound is not None and value >= bound:
            raise QuerySyntaxError(f"unknown {kind} id {value}", at)
        return value

    def node():
        nonlocal pos
        expect("(")
        op, at = peek()
        pos += 1
        if op == "e":
            out = Anchor(integer("entity", num_entities))
        elif op == "p":
            rel = integer("relation", num_relations)
            out = Projection(rel, node())
        elif op == "not":
            out = Negation(node())
        elif op in ("and", "or"):
            children = []
            while peek()[0] == "(":
                children.append(node())
            if len(children) < 2:
                raise QuerySyntaxError(f"'{op}' needs at least 2 operands", at)
            out = (Intersection if op == "and" else Union)(tuple(children))
        else:
            raise QuerySyntaxError(f"unknown operator {op!r}" if op else "unexpected end of input", at)
        expect(")")
        return out

    q = node()
    if pos != len(tokens):
        raise QuerySyntaxError("trailing input", tokens[pos][1])
    return q


def print_query(q: Query) -> str:
    if isinstance(q, Anchor):
        return f"(e {q.entity})"
    if isinstance(q, Projection):
        return f"(p {q.relation} {print_query(q.child)})"
    if isinstance(q, Negation):
        return f"(not {print_query(q.child)})"
    op = "and" if isinstance(q, Intersection) else "or"
    return f"({op} " + " ".join(print_query(c) for c in q.children) + ")"


# ---------------------------------------------------------------------------
# rewrites

def to_dm(q: Query) -> Query:
    """Replace every union by a negated intersection of negations."""
    if isinstance(q, Anchor):
        return q
    if isinstance(q, Projection):
        return Projection(q.relation, to_dm(q.child))
    if isinstance(q, Negation):
        return Negation(to_dm(q.child))
    if isinstance(q, Intersection):
        return Intersection(tuple(to_dm(c) for c in q.children))
    return Negation(Intersection(tuple(Negation(to_dm(c)) for c in q.children)))


def simplify(q: Query) -> Query:
    """Apply the exact set identities ``A and A = A``, ``A or A = A`` and
    ``not not A = A`` bottom-up (repeated branches are dropped, first
    occurrence kept)."""
    if isinstance(q, Anchor):
        return q
    if isinstance(q, Projection):
        return Projection(q.relation, simplify(q.child))
    if isinstance(q, Negation):
        child = simplify(q.child)
        return child.child if isinstance(child, Negation) else Negation(child)
    kids = tuple(dict.fromkeys(simplify(c) for c in q.children))
    return kids[0] if len(kids) == 1 else type(q)(kids)


def contains_union(q: Query) -> bool:
    return any(isinstance(n, Union) for n in walk(q))


def to_dnf(q: Query) -> List[Query]:
    """Lift unions to the top; returns the union-free disjuncts.

    Raises :class:`StructureError` when a negation covers a union, since the
    complement of a union does not distribute into a disjunction.
    """
    if isinstance(q, Anchor):
        return [q]
    if isinstance(q, Projection):
        return [Projection(q.relation, d) for d in to_dnf(q.child)]
    if isinstance(q, Negation):
        if contains_union(q.child):
            raise StructureError("negation over a union cannot be lifted to DNF")
        return [q]
    if isinstance(q, Intersection):
        parts = [to_dnf(c) for c in q.children]
        return [Intersection(combo) for combo in itertools.product(*parts)]
    return [d for c in q.children for d in to_dnf(c)]


# ---------------------------------------------------------------------------
# traversal helpers

def children(q: Query) -> Tuple[Query, ...]:
    if isinstance(q, (Projection, Negation)):
        return (q.child,)
    if isinstance(q, (Intersection, Union)):
        return q.children
    return ()


def walk(q: Query):
    """Pre-order iterator over all nodes."""
    stack = [q]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def node_count(q: Query) -> int:
    return sum(1 for _ in walk(q))


def anchors(q: Query) -> List[int]:
    return [n.entity for n in walk(q) if isinstance(n, Anchor)]


def ids(q: Query) -> List[int]:
    """Pre-order ids: entity for anchors, relation for projections."""
    out = []
    for n in walk(q):
        if isinstance(n, Anchor):
            out.append(n.entity)
        elif isinstance(n, Projection):
            out.append(n.relation)
    return out


def shape_key(q: Query) -> str:
    """Ordered shape with ids erased; equal keys can share one batched execution."""
    if isinstance(q, Anchor):
        return "e"
    if isinstance(q, Projection):
        return "p" + shape_key(q.child)
    if isinstance(q, Negation):
        return "n" + shape_key(q.child)
    tag = "i" if isinstance(q, Intersection) else "u"
    return tag + "(" + ",".join(shape_key(c) for c in q.children) + ")"


def fill(skeleton: Query, values) -> Query:
    """Inverse of :func:`ids`: rebuild ``skeleton`` with ids taken in pre-order."""
    it = iter(values)

    def go(n):
        if isinstance(n, Anchor):
            return Anchor(int(next(it)))
        if isinstance(n, Projection):
            rel = int(next(it))
            return Projection(rel, go(n.child))
        if isinstance(n, Negation):
            return Negation(go(n.child))
        return type(n)(tuple(go(c) for c in n.children))

    return go(skeleton)


# ---------------------------------------------------------------------------
# symbolic evaluation

def evaluate(q: Query, g) -> FrozenSet[int]:
    """Exact answer set of ``q`` on graph ``g`` by post-order set operations."""
    if isinstance(q, Anchor):
        return frozenset((q.entity,))
    if isinstance(q, Projection):
        out = set()
        for v in evaluate(q.child, g):
            out.update(g.neighbors(v, q.relation))
        return frozenset(out)
    if isinstance(q, Negation):
        inner = evaluate(q.child, g)
        return frozenset(v for v in range(g.num_entities) if v not in inner)
    sets = [evaluate(c, g) for c in q.children]
    if isinstance(q, Intersection):
        return frozenset.intersection(*sorted(sets, key=len))
    return frozenset.union(*sets)


# ---------------------------------------------------------------------------
# structure templates

_E = Anchor(-1)


def _p(child: Query) -> Projection:
    return Projection(-1, child)


def _i(*cs: Query) -> Intersection:
    return Intersection(cs)


TEMPLATES: Dict[str, Query] = {
    "1p": _p(_E),
    "2p": _p(_p(_E)),
    "3p": _p(_p(_p(_E))),
    "2i": _i(_p(_E), _p(_E)),
    "3i": _i(_p(_E), _p(_E), _p(_E)),
    "ip": _p(_i(_p(_E), _p(_E))),
    "pi": _i(_p(_p(_E)), _p(_E)),
    "2u": Union((_p(_E), _p(_E))),
    "up": _p(Union((_p(_E), _p(_E)))),
    "2in": _i(_p(_E), Negation(_p(_E))),
    "3in": _i(_p(_E), _p(_E), Negation(_p(_E))),
    "inp": _p(_i(_p(_E), Negation(_p(_E)))),
    "pin": _i(_p(_p(_E)), Negation(_p(_E))),
    "pni": _i(_p(_E), Negation(_p(_p(_E)))),
}

STRUCTURES = tuple(TEMPLATES)
EPFO_STRUCTURES = ("1p", "2p", "3p", "2i", "3i", "ip", "pi", "2u", "up")
NEGATION_STRUCTURES = ("2in", "3in", "inp", "pin", "pni")
CONJUNCTIVE_TRAIN = ("1p", "2p", "3p", "2i", "3i")
TRAIN_STRUCTURES = CONJUNCTIVE_TRAIN + NEGATION_STRUCTURES


def _signature(q: Query) -> str:
    # commutative operators sort their children so argument order is irrelevant
    if isinstance(q, Anchor):
        return "e"
    if isinstance(q, Projection):
        return "p(" + _signature(q.child) + ")"
    if isinstance(q, Negation):
        return "n(" + _signature(q.child) + ")"
    tag = "i" if isinstance(q, Intersection) else "u"
    return tag + "(" + ",".join(sorted(_signature(c) for c in q.children)) + ")"


_BY_SIGNATURE = {_signature(t): name for name, t in TEMPLATES.items()}


def structure_of(q: Query) -> str:
    try:
        return _BY_SIGNATURE[_signature(q)]
    except KeyError:
        raise StructureError(f"query matches no known structure: {print_query(q)}") from None
