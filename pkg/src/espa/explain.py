"""Attention reports, path verbalization and JSON/DOT export."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath
from typing import Callable, Protocol

import numpy as np

from .kg import Entity, EntityKind, Relation, grade_outcome
from .model import ForwardTrace, canonical_groups
from .sampler import Path, PairSample

HIGHLIGHT_MASS = 0.5


class EntityLookup(Protocol):
    def entity(self, e: int) -> Entity: ...


@dataclass
class PathReport:
    weight: float
    steps: list[list]  # [entity name, kind label, relation label]
    text: str


@dataclass
class GroupReport:
    kind: str  # "SSP" or "CKP"
    entity_id: int
    name: str
    weight: float
    grade: str
    paths: list[PathReport] = field(default_factory=list)


@dataclass
class AttentionReport:
    student: str
    course: str
    yhat: float
    label: int
    groups: list[GroupReport]
    highlighted_tags: list[str]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionReport":
        groups = [
            GroupReport(**{**grp, "paths": [PathReport(**p) for p in grp["paths"]]})
            for grp in d["groups"]
        ]
        return cls(d["student"], d["course"], d["yhat"], d["label"], groups, list(d["highlighted_tags"]))


# -- verbalization ---------------------------------------------------------------

def _verb(outcome: str) -> str:
    return "passed" if outcome == "Pass" else "failed"


def _ssp_text(names: list[str], path: Path, g: EntityLookup) -> str:
    outcome = grade_outcome(g.entity(path.steps[3].value).value)
    return f"{names[0]} had a '{names[1]}' tag which also belonged to {names[2]}, who {_verb(outcome)} the {names[4]}"


def _ckp_text(names: list[str], path: Path, g: EntityLookup) -> str:
    outcome = grade_outcome(g.entity(path.steps[1].value).value)
    if path.steps[2].relation is Relation.PREREQUISITE:
        tail = f"which is the {names[3]}'s prerequisite course"
    else:
        tail = f"which is related to the {names[3]}"
    return f"{names[0]} {_verb(outcome)} the {names[2]}, {tail}"


_SSP_RELS = (Relation.HAVE, Relation.BELONG_TO, Relation.GET_GRADE, Relation.IN, Relation.END_MARKER)

# keyed by the relation sequence of a path
TEMPLATES: dict[tuple[Relation, ...], Callable[[list[str], Path, EntityLookup], str]] = {
    _SSP_RELS: _ssp_text,
    (Relation.GET_GRADE, Relation.IN, Relation.PREREQUISITE, Relation.END_MARKER): _ckp_text,
    (Relation.GET_GRADE, Relation.IN, Relation.RELATED, Relation.END_MARKER): _ckp_text,
}


def _display(e: Entity) -> str:
    return grade_outcome(e.value) if e.kind is EntityKind.GRADE else e.value


def triple_listing(path: Path, g: EntityLookup) -> str:
    names = [_display(g.entity(st.value)) for st in path.steps]
    triples = [f"({a}, {st.relation.label}, {b})" for a, st, b in zip(names, path.steps, names[1:])]
    return " -> ".join(triples) if triples else names[0]


def verbalize_path(path: Path, g: EntityLookup) -> str:
    """Sentence for a path; paths without a template become a triple listing."""
    rels = tuple(st.relation for st in path.steps)
    template = TEMPLATES.get(rels)
    if template is None:
        return triple_listing(path, g)
    return template([_display(g.entity(st.value)) for st in path.steps], path, g)


# -- reports ----------------------------------------------------------------------

def _tag_of(path: Path) -> int | None:
    for st in path.steps:
        if st.kind is EntityKind.TAG:
            return st.value
    return None


def build_report(trace: ForwardTrace, sample: PairSample, g: EntityLookup, index: int = 0) -> AttentionReport:
    """Report for batch entry ``index`` of ``trace``, which must come from ``sample``."""
    groups = canonical_groups(sample)
    n = int(trace.group_mask[index].sum())
    if n != len(groups):
        raise ValueError(f"trace entry {index} has {n} groups but the sample has {len(groups)}")
    alpha = trace.global_weights[index]
    out: list[GroupReport] = []
    tag_mass: dict[int, float] = {}
    for gi, (kind, grp, paths) in enumerate(groups):
        local = trace.local_weights[index, gi]
        ent = grp.similar_student if kind == "SSP" else grp.related_course
        grade = grp.terminal_grade if kind == "SSP" else grp.prior_grade
        reports = []
        for j, p in enumerate(paths):
            steps = [[_display(g.entity(st.value)), st.kind.label, st.relation.label] for st in p.steps]
            reports.append(PathReport(float(local[j]), steps, verbalize_path(p, g)))
        out.append(GroupReport(kind, int(ent), g.entity(ent).value, float(alpha[gi]), grade, reports))

    order = sorted(range(len(out)), key=lambda i: (-out[i].weight, i))
    covered, mass = [], 0.0
    for i in order:
        if mass >= HIGHLIGHT_MASS:
            break
        covered.append(i)
        mass += out[i].weight
    if not any(out[i].kind == "SSP" for i in covered):
        top_ssp = [i for i in order if out[i].kind == "SSP"][:1]
        covered += top_ssp
    for i in covered:
        if out[i].kind != "SSP":
            continue
        for j, p in enumerate(groups[i][2]):
            t = _tag_of(p)
            if t is not None:
                tag_mass[t] = tag_mass.get(t, 0.0) + out[i].weight * out[i].paths[j].weight
    tags = [g.entity(t).value for t in sorted(tag_mass, key=lambda t: (-tag_mass[t], g.entity(t).value))]
    return AttentionReport(
        student=g.entity(sample.student).value,
        course=g.entity(sample.course).value,
        yhat=float(trace.yhat[index]),
        label=int(sample.label),
        groups=[out[i] for i in order],
        highlighted_tags=tags,
    )


# -- export -----------------------------------------------------------------------

def to_json(report: AttentionReport) -> str:
    return json.dumps(report.to_dict(), indent=2)


def from_json(text: str) -> AttentionReport:
    return AttentionReport.from_dict(json.loads(text))


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def edge_weights(report: AttentionReport) -> dict[tuple[str, str, str], float]:
    """Attention mass per drawn edge: the sum of α·α′ over paths using it.

    Node keys are ``kind:name``; a grade node is keyed by the group it
    belongs to, so the edge into it carries exactly that group's α.
    """
    weights: dict[tuple[str, str, str], float] = {}
    for gi, grp in enumerate(report.groups):
        for p in grp.paths:
            keys = []
            for name, kind, _ in p.steps:
                keys.append(f"Grade:{gi}:{name}" if kind == EntityKind.GRADE.label else f"{kind}:{name}")
            for (a, (_, _, rel)), b in zip(zip(keys, p.steps), keys[1:]):
                k = (a, rel, b)
                weights[k] = weights.get(k, 0.0) + grp.weight * p.weight
    return weights


def penwidth(w: float, top: float) -> float:
    return 0.5 + 4.5 * (w / top if top > 0 else 0.0)


def to_dot(report: AttentionReport) -> str:
    weights = edge_weights(report)
    top = max(weights.values(), default=0.0)
    nodes: dict[str, str] = {}
    for a, _, b in weights:
        for key in (a, b):
            nodes.setdefault(key, key.rsplit(":", 1)[-1])
    lines = [f"digraph {_quote(report.student + ' / ' + report.course)} {{", "  rankdir=LR;"]
    for key, label in nodes.items():
        shape = "box" if key.startswith("Course:") or key.startswith("Student:") else "ellipse"
        lines.append(f"  {_quote(key)} [label={_quote(label)}, shape={shape}];")
    for (a, rel, b), w in weights.items():
        lines.append(
            f"  {_quote(a)} -> {_quote(b)} [label={_quote(rel)}, weight_attn={w!r}, penwidth={penwidth(w, top)!r}];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


def export(report: AttentionReport, fmt: str, path: str | FsPath | None = None) -> str:
    if fmt == "json":
        text = to_json(report)
    elif fmt == "dot":
        text = to_dot(report)
    elif fmt == "text":
        text = format_text(report)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    if path is not None:
        FsPath(path).write_text(text, encoding="utf-8")
    return text


def format_text(report: AttentionReport, max_groups: int = 5) -> str:
    lines = [f"{report.student} / {report.course}: P(fail) = {report.yhat:.3f} (label {report.label})"]
    for grp in report.groups[:max_groups]:
        lines.append(f"  [{grp.kind}] {grp.name} ({grp.grade}) alpha={grp.weight:.3f}")
        best = max(grp.paths, key=lambda p: p.weight)
        lines.append(f"      {best.text} (path weight {best.weight:.3f})")
    if report.highlighted_tags:
        lines.append("  highlighted tags: " + ", ".join(report.highlighted_tags))
    return "\n".join(lines)


def fail_mass(report: AttentionReport) -> float:
    """Global attention mass on groups whose grade is Fail."""
    return float(np.sum([grp.weight for grp in report.groups if grp.grade == "Fail"]))
