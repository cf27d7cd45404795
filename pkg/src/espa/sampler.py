"""Similar-student and course-knowledge path enumeration.

Two fixed templates are sampled for a (student s, course c) pair:

* SSP: ``s -have-> tag -belong_to-> s' -get_grade-> grade -in-> c``
* CKP: ``s -get_grade-> grade -in-> c' -(prerequisite|related)-> c``

Evidence for a pair enrolled in term ``t`` only uses grades recorded strictly
before ``t``, which is what keeps the held-out term free of leakage.
"""

from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Iterable, Sequence

import numpy as np

from .kg import COURSE_RELATIONS, Entity, EntityKind, KnowledgeGraph, Relation

log = logging.getLogger(__name__)

DEFAULT_SIMILAR_LIMIT = 60
DEFAULT_MAX_PATHS = 10
MAX_PATH_LENGTH = 5


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class PathStep:
    value: int
    kind: EntityKind
    relation: Relation


@functools.lru_cache(maxsize=None)
def make_step(value: int, kind: EntityKind, relation: Relation) -> PathStep:
    """Shared PathStep instances; datasets repeat the same steps many times."""
    return PathStep(value, kind, relation)


@dataclass(frozen=True, slots=True)
class Path:
    steps: tuple[PathStep, ...]

    def __post_init__(self) -> None:
        n = len(self.steps)
        if n == 0 or n > MAX_PATH_LENGTH:
            raise ValueError(f"path length {n} outside [1, {MAX_PATH_LENGTH}]")
        if self.steps[-1].relation is not Relation.END_MARKER:
            raise ValueError("final step must carry end_marker")

    def __len__(self) -> int:
        return len(self.steps)

    def key(self) -> tuple:
        return tuple((s.value, int(s.kind), int(s.relation)) for s in self.steps)


@dataclass(frozen=True, slots=True)
class SSPGroup:
    similar_student: int
    paths: tuple[Path, ...]
    terminal_grade: str


@dataclass(frozen=True, slots=True)
class CKPGroup:
    related_course: int
    paths: tuple[Path, ...]
    prior_grade: str


@dataclass(frozen=True, slots=True)
class PairSample:
    student: int
    course: int
    ssp_groups: tuple[SSPGroup, ...]
    ckp_groups: tuple[CKPGroup, ...]
    label: int
    term: int | None = None

    @property
    def similar_students(self) -> list[int]:
        return [grp.similar_student for grp in self.ssp_groups]

    @property
    def n_groups(self) -> int:
        return len(self.ssp_groups) + len(self.ckp_groups)


@dataclass
class DatasetStats:
    train_pairs: int = 0
    test_pairs: int = 0
    dropped_train: int = 0
    dropped_test: int = 0
    mean_similar: float = 0.0
    mean_paths_per_similar: float = 0.0

    @property
    def dropped(self) -> int:
        return self.dropped_train + self.dropped_test


class PathIndex:
    """Lookup tables over an immutable graph for fast enumeration."""

    def __init__(self, g: KnowledgeGraph) -> None:
        self.g = g
        self.students = g.ids_of_kind(EntityKind.STUDENT)
        self.tags = g.ids_of_kind(EntityKind.TAG)
        self._srow = {s: i for i, s in enumerate(self.students)}
        tcol = {t: j for j, t in enumerate(self.tags)}
        # a tag path needs both (s, have, t) and (t, belong_to, s)
        self.tag_matrix = np.zeros((len(self.students), len(self.tags)), dtype=np.int64)
        self.student_tags: dict[int, tuple[int, ...]] = {}
        for s in self.students:
            tags = tuple(t for t in g.neighbors(s, Relation.HAVE) if g.has_triple(t, Relation.BELONG_TO, s))
            self.student_tags[s] = tags
            for t in tags:
                self.tag_matrix[self._srow[s], tcol[t]] = 1
        self.takers: dict[int, list[tuple[int, int, int | None]]] = {}
        for (s, c), grade in g.enrollment.items():
            self.takers.setdefault(c, []).append((s, grade, g.grade_term[grade]))
        # per course: (student ids, student rows, terms) with a missing term as -1
        self._taker_arrays: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        for c, lst in self.takers.items():
            lst.sort()
            ids = np.array([x[0] for x in lst], dtype=np.int64)
            terms = np.array([-1 if x[2] is None else x[2] for x in lst], dtype=np.int64)
            self._taker_arrays[c] = (ids, np.array([self._srow[x] for x in ids], dtype=np.int64), terms)

    def row(self, s: int) -> int:
        return self._srow[s]


def _before(term: int | None, cutoff: int | None) -> bool:
    if cutoff is None:
        return True
    return term is not None and term < cutoff


def select_similar_students(
    g: KnowledgeGraph | PathIndex,
    s: int,
    c: int,
    limit: int = DEFAULT_SIMILAR_LIMIT,
    before_term: int | None = None,
) -> list[tuple[int, int]]:
    """Rank students with a grade in ``c`` by SSP path count to ``s``.

    Ties go to the smaller id. Candidates with zero shared tags are skipped.
    """
    idx = g if isinstance(g, PathIndex) else PathIndex(g)
    if c not in idx._taker_arrays:
        return []
    ids, rows, terms = idx._taker_arrays[c]
    keep = ids != s
    if before_term is not None:
        keep &= (terms >= 0) & (terms < before_term)
    ids, rows = ids[keep], rows[keep]
    counts = idx.tag_matrix[rows] @ idx.tag_matrix[idx.row(s)]
    nz = counts > 0
    ids, counts = ids[nz], counts[nz]
    order = np.lexsort((ids, -counts))[:limit]
    return [(int(ids[i]), int(counts[i])) for i in order]


def enumerate_ssp(
    g: KnowledgeGraph | PathIndex,
    s: int,
    c: int,
    similar: Iterable[int],
    max_paths: int = DEFAULT_MAX_PATHS,
) -> list[SSPGroup]:
    idx = g if isinstance(g, PathIndex) else PathIndex(g)
    graph = idx.g
    mine = set(idx.student_tags[s])
    head = make_step(s, EntityKind.STUDENT, Relation.HAVE)
    tail = make_step(c, EntityKind.COURSE, Relation.END_MARKER)
    groups = []
    for sp in similar:
        grade = graph.enrollment[(sp, c)]
        shared = [t for t in idx.student_tags[sp] if t in mine][:max_paths]
        if not shared:
            continue
        via = make_step(sp, EntityKind.STUDENT, Relation.GET_GRADE)
        grade_step = make_step(grade, EntityKind.GRADE, Relation.IN)
        paths = tuple(
            Path((head, make_step(t, EntityKind.TAG, Relation.BELONG_TO), via, grade_step, tail))
            for t in shared
        )
        groups.append(SSPGroup(sp, paths, graph.outcome(grade)))
    return groups


def enumerate_ckp(
    g: KnowledgeGraph,
    s: int,
    c: int,
    before_term: int | None = None,
    max_paths: int = DEFAULT_MAX_PATHS,
) -> list[CKPGroup]:
    by_course: dict[int, list[Relation]] = {}
    for rel in COURSE_RELATIONS:
        for cp in g.predecessors(c, rel):
            by_course.setdefault(cp, []).append(rel)
    groups = []
    for cp in sorted(by_course):
        grade = g.enrollment.get((s, cp))
        if grade is None or not _before(g.grade_term[grade], before_term):
            continue
        paths = tuple(
            Path((
                make_step(s, EntityKind.STUDENT, Relation.GET_GRADE),
                make_step(grade, EntityKind.GRADE, Relation.IN),
                make_step(cp, EntityKind.COURSE, rel),
                make_step(c, EntityKind.COURSE, Relation.END_MARKER),
            ))
            for rel in by_course[cp][:max_paths]
        )
        groups.append(CKPGroup(cp, paths, g.outcome(grade)))
    return groups


def sample_pair(
    idx: PathIndex,
    s: int,
    c: int,
    before_term: int | None,
    limit: int = DEFAULT_SIMILAR_LIMIT,
    max_paths: int = DEFAULT_MAX_PATHS,
) -> PairSample:
    g = idx.g
    similar = [sp for sp, _ in select_similar_students(idx, s, c, limit, before_term)]
    ssp = enumerate_ssp(idx, s, c, similar, max_paths)
    ckp = enumerate_ckp(g, s, c, before_term, max_paths)
    label = 1 if g.outcome(g.enrollment[(s, c)]) == "Fail" else 0
    return PairSample(s, c, tuple(ssp), tuple(ckp), label, g.enrollment_term(s, c))


def build_dataset(
    g: KnowledgeGraph,
    split_term: int,
    limit: int = DEFAULT_SIMILAR_LIMIT,
    max_paths: int = DEFAULT_MAX_PATHS,
) -> tuple[list[PairSample], list[PairSample], DatasetStats]:
    """Temporal split: pairs in ``split_term`` are test, earlier ones train.

    Every pair only sees grades dated strictly before its own term. Pairs with
    no evidence path at all are dropped and counted in the stats.
    """
    idx = PathIndex(g)
    stats = DatasetStats()
    train: list[PairSample] = []
    test: list[PairSample] = []
    n_sim = n_paths = 0
    for (s, c), grade in sorted(g.enrollment.items()):
        term = g.grade_term[grade]
        if term is None:
            raise ConfigurationError("enrollment records must carry a term for the temporal split")
        if term > split_term:
            continue
        sample = sample_pair(idx, s, c, term, limit, max_paths)
        is_test = term == split_term
        if sample.n_groups == 0:
            if is_test:
                stats.dropped_test += 1
            else:
                stats.dropped_train += 1
            continue
        (test if is_test else train).append(sample)
        n_sim += len(sample.ssp_groups)
        n_paths += sum(len(grp.paths) for grp in sample.ssp_groups)
    if not train or not test:
        raise ConfigurationError(
            f"split at term {split_term} leaves {len(train)} train and {len(test)} test pairs"
        )
    stats.train_pairs, stats.test_pairs = len(train), len(test)
    kept = len(train) + len(test)
    stats.mean_similar = n_sim / kept
    stats.mean_paths_per_similar = n_paths / max(n_sim, 1)
    log.info(
        "dataset: %d train, %d test, dropped %d pairs without evidence",
        stats.train_pairs, stats.test_pairs, stats.dropped,
    )
    return train, test, stats


def is_walk(g: KnowledgeGraph, path: Path) -> bool:
    steps = path.steps
    for a, b in zip(steps, steps[1:]):
        if g.entity(a.value).kind is not a.kind or not g.has_triple(a.value, a.relation, b.value):
            return False
    return g.entity(steps[-1].value).kind is steps[-1].kind


# -- serialization -----------------------------------------------------------

def _path_to_json(p: Path) -> list:
    return [[st.value, st.kind.label, st.relation.label] for st in p.steps]


def _path_from_json(rows: list) -> Path:
    return Path(tuple(make_step(int(v), EntityKind.parse(k), Relation.parse(r)) for v, k, r in rows))


def sample_to_json(sample: PairSample) -> dict:
    return {
        "student": sample.student,
        "course": sample.course,
        "term": sample.term,
        "label": sample.label,
        "ssp": [
            {"similar_student": grp.similar_student, "terminal_grade": grp.terminal_grade,
             "paths": [_path_to_json(p) for p in grp.paths]}
            for grp in sample.ssp_groups
        ],
        "ckp": [
            {"related_course": grp.related_course, "prior_grade": grp.prior_grade,
             "paths": [_path_to_json(p) for p in grp.paths]}
            for grp in sample.ckp_groups
        ],
    }


def sample_from_json(obj: dict) -> PairSample:
    ssp = tuple(
        SSPGroup(int(grp["similar_student"]), tuple(_path_from_json(p) for p in grp["paths"]), grp["terminal_grade"])
        for grp in obj["ssp"]
    )
    ckp = tuple(
        CKPGroup(int(grp["related_course"]), tuple(_path_from_json(p) for p in grp["paths"]), grp["prior_grade"])
        for grp in obj["ckp"]
    )
    return PairSample(int(obj["student"]), int(obj["course"]), ssp, ckp, int(obj["label"]), obj.get("term"))


def write_samples(samples: Sequence[PairSample], path: str | FsPath) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for smp in samples:
            fh.write(json.dumps(sample_to_json(smp), separators=(",", ":")) + "\n")


def read_samples(path: str | FsPath) -> list[PairSample]:
    with open(path, encoding="utf-8") as fh:
        return [sample_from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class Vocabulary:
    """Entity table shipped with a dataset so it can be used without the graph.

    Grade nodes share one embedding row per outcome, so ``value_row`` maps
    every entity id onto a row of the value-embedding matrix.
    """

    entities: list[Entity]
    value_row: np.ndarray = field(init=False)
    student_index: dict[int, int] = field(init=False)
    course_index: dict[int, int] = field(init=False)
    pass_row: int = field(init=False)
    fail_row: int = field(init=False)

    def __post_init__(self) -> None:
        rows = np.empty(len(self.entities), dtype=np.int64)
        non_grade = [e for e in self.entities if e.kind is not EntityKind.GRADE]
        for i, e in enumerate(non_grade):
            rows[e.id] = i
        self.pass_row = len(non_grade)
        self.fail_row = len(non_grade) + 1
        for e in self.entities:
            if e.kind is EntityKind.GRADE:
                rows[e.id] = self.grade_row(e.value.split("#", 1)[0])
        self.value_row = rows
        self.student_index = {e.id: i for i, e in enumerate(x for x in self.entities if x.kind is EntityKind.STUDENT)}
        self.course_index = {e.id: i for i, e in enumerate(x for x in self.entities if x.kind is EntityKind.COURSE)}

    def grade_row(self, outcome: str) -> int:
        if outcome == "Pass":
            return self.pass_row
        if outcome == "Fail":
            return self.fail_row
        raise ValueError(f"unknown outcome {outcome!r}")

    @property
    def n_value_rows(self) -> int:
        return self.fail_row + 1

    @property
    def n_students(self) -> int:
        return len(self.student_index)

    @property
    def n_courses(self) -> int:
        return len(self.course_index)

    def entity(self, e: int) -> Entity:
        return self.entities[e]

    def to_json(self) -> list:
        return [[e.kind.label, e.value] for e in self.entities]

    @classmethod
    def from_json(cls, rows: list) -> "Vocabulary":
        return cls([Entity(i, EntityKind.parse(k), v) for i, (k, v) in enumerate(rows)])

    @classmethod
    def from_graph(cls, g: KnowledgeGraph) -> "Vocabulary":
        return cls(list(g.entities))


def write_dataset(directory: str | FsPath, train: Sequence[PairSample], test: Sequence[PairSample],
                  vocab: Vocabulary, stats: DatasetStats | None = None) -> None:
    d = FsPath(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_samples(train, d / "train.jsonl")
    write_samples(test, d / "test.jsonl")
    (d / "vocab.json").write_text(json.dumps(vocab.to_json()), encoding="utf-8")
    if stats is not None:
        payload = dict(vars(stats), dropped=stats.dropped)
        (d / "stats.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def read_dataset(directory: str | FsPath) -> tuple[list[PairSample], list[PairSample], Vocabulary]:
    d = FsPath(directory)
    vocab = Vocabulary.from_json(json.loads((d / "vocab.json").read_text(encoding="utf-8")))
    return read_samples(d / "train.jsonl"), read_samples(d / "test.jsonl"), vocab
