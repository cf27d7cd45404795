"""Typed knowledge graph over students, profile tags, courses and grades.

Triples are read from a tab-separated file with five columns::

    head_kind  head_value  relation  tail_kind  tail_value  [term]

The optional sixth column carries the term of a ``get_grade`` record and is
what the temporal split keys on.  Grade nodes are reified per enrollment and
named ``Pass#<tag>`` or ``Fail#<tag>``; the part before ``#`` is the outcome.
"""

from __future__ import annotations

import enum
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class KGError(ValueError):
    """Base class for graph ingestion and validation failures."""


class ParseError(KGError):
    pass


class SchemaError(KGError):
    pass


class IntegrityError(KGError):
    pass


class EntityKind(enum.IntEnum):
    STUDENT = 0
    TAG = 1
    COURSE = 2
    GRADE = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "EntityKind":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise SchemaError(f"unknown entity kind {text!r}") from None


class Relation(enum.IntEnum):
    HAVE = 0
    BELONG_TO = 1
    GET_GRADE = 2
    IN = 3
    PREREQUISITE = 4
    RELATED = 5
    END_MARKER = 6

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "Relation":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise SchemaError(f"unknown relation {text!r}") from None


GRADE_VALUES = ("Pass", "Fail")

SIGNATURES: dict[Relation, tuple[EntityKind, EntityKind]] = {
    Relation.HAVE: (EntityKind.STUDENT, EntityKind.TAG),
    Relation.BELONG_TO: (EntityKind.TAG, EntityKind.STUDENT),
    Relation.GET_GRADE: (EntityKind.STUDENT, EntityKind.GRADE),
    Relation.IN: (EntityKind.GRADE, EntityKind.COURSE),
    Relation.PREREQUISITE: (EntityKind.COURSE, EntityKind.COURSE),
    Relation.RELATED: (EntityKind.COURSE, EntityKind.COURSE),
}

COURSE_RELATIONS = (Relation.PREREQUISITE, Relation.RELATED)

_GRADE_RE = re.compile(r"^(Pass|Fail)(#.*)?$")


def grade_outcome(value: str) -> str:
    """Return ``"Pass"`` or ``"Fail"`` for a grade node value like ``Fail#17``."""
    m = _GRADE_RE.match(value)
    if m is None:
        raise SchemaError(f"grade value {value!r} must be Pass or Fail, optionally suffixed '#...'")
    return m.group(1)


@dataclass(frozen=True)
class Entity:
    id: int
    kind: EntityKind
    value: str

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Triple:
    head: Entity
    relation: Relation
    tail: Entity
    term: int | None = None

    def key(self) -> tuple[int, int, int]:
        return (self.head.id, int(self.relation), self.tail.id)


def check_signature(head_kind: EntityKind, relation: Relation, tail_kind: EntityKind) -> None:
    if relation is Relation.END_MARKER:
        raise SchemaError("end_marker only terminates paths and cannot be stored")
    expected = SIGNATURES[relation]
    if (head_kind, tail_kind) != expected:
        raise SchemaError(
            f"{relation.label} expects ({expected[0].label}, {expected[1].label}), "
            f"got ({head_kind.label}, {tail_kind.label})"
        )


class EntityRegistry:
    """Interns (kind, value) pairs to dense ids in first-seen order."""

    def __init__(self) -> None:
        self.entities: list[Entity] = []
        self._index: dict[tuple[EntityKind, str], Entity] = {}

    def intern(self, kind: EntityKind, value: str) -> Entity:
        key = (kind, value)
        ent = self._index.get(key)
        if ent is None:
            if kind is EntityKind.GRADE:
                grade_outcome(value)
            ent = Entity(len(self.entities), kind, value)
            self.entities.append(ent)
            self._index[key] = ent
        return ent

    def lookup(self, kind: EntityKind, value: str) -> Entity:
        return self._index[(kind, value)]


def parse_triple_line(line: str, registry: EntityRegistry, lineno: int = 0) -> Triple:
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) not in (5, 6) or any(c == "" for c in cols[:5]):
        raise ParseError(f"line {lineno}: expected 5 or 6 tab-separated fields, got {len(cols)}")
    try:
        hk = EntityKind.parse(cols[0])
        rel = Relation.parse(cols[2])
        tk = EntityKind.parse(cols[3])
        check_signature(hk, rel, tk)
    except SchemaError as exc:
        raise SchemaError(f"line {lineno}: {exc}") from None
    term = None
    if len(cols) == 6 and cols[5] != "":
        try:
            term = int(cols[5])
        except ValueError:
            raise ParseError(f"line {lineno}: term {cols[5]!r} is not an integer") from None
    try:
        head = registry.intern(hk, cols[1])
        tail = registry.intern(tk, cols[4])
    except SchemaError as exc:
        raise SchemaError(f"line {lineno}: {exc}") from None
    return Triple(head, rel, tail, term)


def load_triples(path: str | Path, registry: EntityRegistry | None = None) -> list[Triple]:
    """Read a triple file; entities are interned in first-seen order."""
    registry = registry if registry is not None else EntityRegistry()
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            triples.append(parse_triple_line(line, registry, lineno))
    return triples


class KnowledgeGraph:
    """Immutable typed triple store.

    Use :func:`build_graph` to construct one.  ``enrollment`` maps
    ``(student_id, course_id)`` to the reified grade node, and ``grade_term``
    maps each grade node to the term recorded on its ``get_grade`` edge.
    """

    def __init__(self, entities: list[Entity], triples: list[Triple]) -> None:
        self.entities = entities
        self.triples = triples
        n = len(entities)
        out: list[dict[Relation, list[int]]] = [dict() for _ in range(n)]
        inc: list[dict[Relation, list[int]]] = [dict() for _ in range(n)]
        for t in triples:
            out[t.head.id].setdefault(t.relation, []).append(t.tail.id)
            inc[t.tail.id].setdefault(t.relation, []).append(t.head.id)
        self._out = [{r: tuple(sorted(v)) for r, v in d.items()} for d in out]
        self._in = [{r: tuple(sorted(v)) for r, v in d.items()} for d in inc]
        self._keys = frozenset(t.key() for t in triples)
        self.grade_term: dict[int, int | None] = {}
        for t in triples:
            if t.relation is Relation.GET_GRADE:
                self.grade_term[t.tail.id] = t.term
        self.enrollment: dict[tuple[int, int], int] = {}
        self._derive_enrollment()

    def _derive_enrollment(self) -> None:
        for ent in self.entities:
            if ent.kind is not EntityKind.GRADE:
                continue
            courses = self._out[ent.id].get(Relation.IN, ())
            students = self._in[ent.id].get(Relation.GET_GRADE, ())
            if len(courses) != 1:
                raise IntegrityError(f"grade node {ent.value!r} has {len(courses)} 'in' edges, expected 1")
            if len(students) != 1:
                raise IntegrityError(f"grade node {ent.value!r} has {len(students)} 'get_grade' edges, expected 1")
            key = (students[0], courses[0])
            if key in self.enrollment:
                s, c = (self.entities[i].value for i in key)
                raise IntegrityError(f"student {s!r} has more than one grade in course {c!r}")
            self.enrollment[key] = ent.id

    def _check(self, e: int) -> None:
        if not 0 <= e < len(self.entities):
            raise IndexError(f"entity id {e} out of range [0, {len(self.entities)})")

    def neighbors(self, e: int, r: Relation) -> tuple[int, ...]:
        """Tails of ``(e, r, *)`` in ascending id order."""
        self._check(e)
        return self._out[e].get(r, ())

    def predecessors(self, e: int, r: Relation) -> tuple[int, ...]:
        """Heads of ``(*, r, e)`` in ascending id order."""
        self._check(e)
        return self._in[e].get(r, ())

    def has_triple(self, head: int, r: Relation, tail: int) -> bool:
        return (head, int(r), tail) in self._keys

    def entity(self, e: int) -> Entity:
        self._check(e)
        return self.entities[e]

    def ids_of_kind(self, kind: EntityKind) -> list[int]:
        return [e.id for e in self.entities if e.kind is kind]

    def outcome(self, grade_id: int) -> str:
        return grade_outcome(self.entities[grade_id].value)

    def enrollment_term(self, student: int, course: int) -> int | None:
        return self.grade_term[self.enrollment[(student, course)]]

    def summary(self) -> dict:
        per_kind = Counter(e.kind.label for e in self.entities)
        per_rel = Counter(t.relation.label for t in self.triples)
        return {
            "entities": len(self.entities),
            "triples": len(self.triples),
            "entities_per_kind": {k.label: per_kind.get(k.label, 0) for k in EntityKind},
            "triples_per_relation": {r.label: per_rel.get(r.label, 0) for r in SIGNATURES},
            "enrollments": len(self.enrollment),
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self.entities == other.entities and self.triples == other.triples


def build_graph(triples: Iterable[Triple]) -> KnowledgeGraph:
    """Deduplicate triples, validate signatures and derive enrollments."""
    kept: list[Triple] = []
    seen: set[tuple[int, int, int]] = set()
    entities: dict[int, Entity] = {}
    for t in triples:
        check_signature(t.head.kind, t.relation, t.tail.kind)
        for ent in (t.head, t.tail):
            prev = entities.setdefault(ent.id, ent)
            if prev != ent:
                raise IntegrityError(f"entity id {ent.id} bound to both {prev} and {ent}")
        if t.key() in seen:
            continue
        seen.add(t.key())
        kept.append(t)
    ids = sorted(entities)
    if ids != list(range(len(ids))):
        raise IntegrityError("entity ids must be dense from 0")
    return KnowledgeGraph([entities[i] for i in ids], kept)


def format_triple(t: Triple) -> str:
    cols = [t.head.kind.label, t.head.value, t.relation.label, t.tail.kind.label, t.tail.value]
    if t.term is not None:
        cols.append(str(t.term))
    return "\t".join(cols)


def save_triples(g: KnowledgeGraph | Sequence[Triple], path: str | Path) -> None:
    triples = g.triples if isinstance(g, KnowledgeGraph) else g
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(format_triple(t) + "\n")


def load_graph(path: str | Path) -> KnowledgeGraph:
    return build_graph(load_triples(path))


@dataclass
class TripleBuilder:
    """Convenience writer used by the generator and tests."""

    registry: EntityRegistry = field(default_factory=EntityRegistry)
    triples: list[Triple] = field(default_factory=list)

    def add(self, hk: EntityKind, hv: str, rel: Relation, tk: EntityKind, tv: str, term: int | None = None) -> Triple:
        check_signature(hk, rel, tk)
        t = Triple(self.registry.intern(hk, hv), rel, self.registry.intern(tk, tv), term)
        self.triples.append(t)
        return t

    def build(self) -> KnowledgeGraph:
        return build_graph(self.triples)
