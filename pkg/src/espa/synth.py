"""Synthetic student/course graphs with a planted failure signal.

Each student draws a latent diligence.  Profile tags are sampled per category
with risk increasing as diligence falls, and the failure log-odds of an
enrollment are

    intercept + w_tags * (tag load - mean load) - w_diligence * diligence
              + w_prereq * [failed a prerequisite] + course difficulty + noise

The intercept is solved by bisection so that the mean failure probability
equals ``base_fail_rate``.  Tags and prerequisite outcomes are the two channels
the path model observes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .kg import EntityKind, KnowledgeGraph, Relation, TripleBuilder, save_triples

log = logging.getLogger(__name__)

# (tag, risk) per category; risk in [0, 1] feeds the tag load
TAG_CATEGORIES: tuple[tuple[str, tuple[tuple[str, float], ...]], ...] = (
    ("performance", (("Grind", 0.0), ("Ordinary", 0.5), ("Slacker", 1.0))),
    ("failures", (("No Failures", 0.0), ("Few Failures", 1 / 3), ("Repeat Risk", 2 / 3), ("Drop out Risk", 1.0))),
    ("trend", (("Ascend", 0.0), ("Descend", 1.0))),
    ("dietary", (("Dietary Regular", 0.0), ("Dietary Irregular", 1.0))),
    ("breakfast", (("Breakfast Habit", 0.0), ("No Breakfast Habit", 1.0))),
    ("sleep", (("Sleep on Time", 0.0), ("Sleep Late", 1.0))),
    ("consumption", (("Normal Consumption", 0.0), ("High Consumption", 0.5), ("Low Consumption", 1.0))),
)

COURSE_NAMES = (
    "Calculus I", "Linear Algebra", "Programming I", "Discrete Math", "Physics I", "Calculus II",
    "Programming II", "Probability", "Data Structures", "Physics II", "Digital Logic", "Electric Circuits",
    "Algorithms", "Computer Organization", "Statistics", "Signals and Systems", "Operating Systems",
    "Databases", "Computer Networks", "Numerical Methods", "Software Engineering", "Compilers",
    "Computer Architecture", "Automata Theory", "Machine Learning", "Computer Graphics", "Information Theory",
    "Distributed Systems", "Embedded Systems", "Control Theory", "Artificial Intelligence", "Cryptography",
    "Web Development", "Human-Computer Interaction", "Optimization", "Parallel Computing", "Computer Vision",
    "Natural Language Processing", "Robotics", "Security",
)


class SynthError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    n_students: int = 500
    n_courses: int = 40
    n_terms: int = 6
    courses_per_term: int = 1
    tag_noise: float = 0.7
    prereq_density: float = 0.08
    max_prereqs: int = 3
    related_density: float = 0.03
    w_tags: float = 6.0
    w_diligence: float = 1.0
    w_prereq: float = 2.5
    difficulty_sd: float = 0.5
    noise: float = 0.5
    base_fail_rate: float = 0.15
    seed: int = 0
    max_attempts: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.base_fail_rate < 0.5:
            raise ValueError("base_fail_rate must lie in (0, 0.5)")
        if min(self.n_students, self.n_courses, self.n_terms, self.courses_per_term) < 1:
            raise ValueError("sizes must be positive")

    @classmethod
    def null_signal(cls, **overrides) -> "SynthConfig":
        """Labels independent of every graph structure the model can see."""
        base = dict(w_tags=0.0, w_prereq=0.0, w_diligence=0.0, difficulty_sd=0.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    diligence: list[float]
    difficulty: list[float]
    tag_load: list[float]
    intercept: float
    fail_prob: dict[str, float] = field(default_factory=dict)
    failed_prereq: dict[str, bool] = field(default_factory=dict)
    prerequisites: dict[str, list[str]] = field(default_factory=dict)
    seed_used: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        return cls(**json.loads(text))


def course_names(n: int) -> list[str]:
    names = list(COURSE_NAMES[:n])
    names += [f"Elective {i + 1}" for i in range(n - len(names))]
    return names


def _sample_tags(diligence: np.ndarray, noise: float, rng: np.random.Generator) -> tuple[list[list[str]], np.ndarray]:
    from scipy.stats import norm

    n = len(diligence)
    tags: list[list[str]] = [[] for _ in range(n)]
    risk = np.zeros(n)
    spread = np.sqrt(1.0 + noise ** 2)
    for _, values in TAG_CATEGORIES:
        k = len(values)
        z = -diligence + rng.normal(0.0, noise, size=n)
        cuts = norm.ppf(np.arange(1, k) / k) * spread
        bucket = np.searchsorted(cuts, z)
        for s in range(n):
            name, r = values[bucket[s]]
            tags[s].append(name)
            risk[s] += r
    return tags, risk / len(TAG_CATEGORIES)


def _course_graph(cfg: SynthConfig, rng: np.random.Generator) -> tuple[list[list[int]], list[list[int]]]:
    prereqs: list[list[int]] = [[] for _ in range(cfg.n_courses)]
    related: list[list[int]] = [[] for _ in range(cfg.n_courses)]
    for c in range(1, cfg.n_courses):
        earlier = np.arange(c)
        chosen = earlier[rng.random(c) < cfg.prereq_density]
        if len(chosen) > cfg.max_prereqs:
            chosen = np.sort(rng.choice(chosen, size=cfg.max_prereqs, replace=False))
        prereqs[c] = chosen.tolist()
        others = np.setdiff1d(earlier, chosen)
        related[c] = others[rng.random(len(others)) < cfg.related_density].tolist()
    return prereqs, related


def _enroll(cfg: SynthConfig, prereqs: list[list[int]], rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """(term, student, course) records; a course opens once all prerequisites were taken."""
    taken_term = np.full((cfg.n_students, cfg.n_courses), -1)
    records = []
    for term in range(1, cfg.n_terms + 1):
        for s in range(cfg.n_students):
            avail = [
                c for c in range(cfg.n_courses)
                if taken_term[s, c] < 0 and all(0 <= taken_term[s, p] < term for p in prereqs[c])
            ]
            if not avail:
                continue
            k = min(cfg.courses_per_term, len(avail))
            for c in sorted(rng.choice(avail, size=k, replace=False).tolist()):
                taken_term[s, c] = term
                records.append((term, s, c))
    return records


def _simulate(intercept: float, base_logit: np.ndarray, records: list[tuple[int, int, int]],
              prereqs: list[list[int]], w_prereq: float, u: np.ndarray, n_students: int, n_courses: int):
    pre = np.zeros((n_courses, n_courses), dtype=bool)
    for c, ps in enumerate(prereqs):
        pre[c, ps] = True
    terms = np.array([t for t, _, _ in records])
    s_idx = np.array([s for _, s, _ in records])
    c_idx = np.array([c for _, _, c in records])
    failed = np.zeros((n_students, n_courses), dtype=bool)
    probs = np.zeros(len(records))
    fp = np.zeros(len(records), dtype=bool)
    outcome = np.zeros(len(records), dtype=bool)
    for t in np.unique(terms):
        # prerequisites always come from earlier terms
        i = np.flatnonzero(terms == t)
        fp[i] = (failed[s_idx[i]] & pre[c_idx[i]]).any(axis=1)
        z = intercept + base_logit[i] + w_prereq * fp[i]
        probs[i] = 1.0 / (1.0 + np.exp(-z))
        outcome[i] = u[i] < probs[i]
        failed[s_idx[i], c_idx[i]] = outcome[i]
    return probs, fp, outcome


def _attempt(cfg: SynthConfig, seed: int):
    rng = np.random.default_rng(seed)
    diligence = rng.standard_normal(cfg.n_students)
    tags, load = _sample_tags(diligence, cfg.tag_noise, rng)
    prereqs, related = _course_graph(cfg, rng)
    difficulty = rng.normal(0.0, cfg.difficulty_sd, size=cfg.n_courses) if cfg.difficulty_sd > 0 else np.zeros(cfg.n_courses)
    records = _enroll(cfg, prereqs, rng)
    eps = rng.normal(0.0, cfg.noise, size=len(records)) if cfg.noise > 0 else np.zeros(len(records))
    u = rng.random(len(records))
    s_idx = np.array([s for _, s, _ in records])
    c_idx = np.array([c for _, _, c in records])
    base_logit = (cfg.w_tags * (load[s_idx] - load.mean()) - cfg.w_diligence * diligence[s_idx]
                  + difficulty[c_idx] + eps)

    def sim(b):
        return _simulate(b, base_logit, records, prereqs, cfg.w_prereq, u, cfg.n_students, cfg.n_courses)

    lo, hi = -30.0, 30.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if sim(mid)[0].mean() < cfg.base_fail_rate:
            lo = mid
        else:
            hi = mid
    intercept = 0.5 * (lo + hi)
    probs, fp, outcome = sim(intercept)
    return dict(diligence=diligence, tags=tags, load=load, prereqs=prereqs, related=related,
                difficulty=difficulty, records=records, probs=probs, fp=fp, outcome=outcome,
                intercept=intercept)


def student_name(s: int) -> str:
    return f"S{s + 1:04d}"


def generate(cfg: SynthConfig) -> tuple[KnowledgeGraph, GroundTruth]:
    for attempt in range(cfg.max_attempts):
        seed = cfg.seed + 1_000_003 * attempt
        world = _attempt(cfg, seed)
        terms = np.array([t for t, _, _ in world["records"]])
        fails_per_term = [int(world["outcome"][terms == t].sum()) for t in range(1, cfg.n_terms + 1)]
        if all(k > 0 for k in fails_per_term):
            break
        log.warning("seed %d produced a term without failures (%s); regenerating", seed, fails_per_term)
    else:
        raise SynthError(f"no failures in some term after {cfg.max_attempts} attempts; raise base_fail_rate")

    names = course_names(cfg.n_courses)
    tb = TripleBuilder()
    for s, tags in enumerate(world["tags"]):
        for t in tags:
            tb.add(EntityKind.STUDENT, student_name(s), Relation.HAVE, EntityKind.TAG, t)
            tb.add(EntityKind.TAG, t, Relation.BELONG_TO, EntityKind.STUDENT, student_name(s))
    for c in range(cfg.n_courses):
        for p in world["prereqs"][c]:
            tb.add(EntityKind.COURSE, names[p], Relation.PREREQUISITE, EntityKind.COURSE, names[c])
        for p in world["related"][c]:
            tb.add(EntityKind.COURSE, names[p], Relation.RELATED, EntityKind.COURSE, names[c])
    truth = GroundTruth(
        diligence=world["diligence"].tolist(),
        difficulty=world["difficulty"].tolist(),
        tag_load=world["load"].tolist(),
        intercept=float(world["intercept"]),
        seed_used=seed,
        prerequisites={names[c]: [names[p] for p in ps] for c, ps in enumerate(world["prereqs"]) if ps},
    )
    for i, (term, s, c) in enumerate(world["records"]):
        grade = f"{'Fail' if world['outcome'][i] else 'Pass'}#{i + 1}"
        tb.add(EntityKind.STUDENT, student_name(s), Relation.GET_GRADE, EntityKind.GRADE, grade, term)
        tb.add(EntityKind.GRADE, grade, Relation.IN, EntityKind.COURSE, names[c])
        key = f"{student_name(s)}|{names[c]}"
        truth.fail_prob[key] = float(world["probs"][i])
        truth.failed_prereq[key] = bool(world["fp"][i])
    return tb.build(), truth


def write_synth(out_dir: str | Path, g: KnowledgeGraph, truth: GroundTruth) -> dict[str, Path]:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"graph": d / "graph.tsv", "truth": d / "ground_truth.json"}
    save_triples(g, paths["graph"])
    paths["truth"].write_text(truth.to_json(), encoding="utf-8")
    return paths


def with_overrides(cfg: SynthConfig, **kw) -> SynthConfig:
    return replace(cfg, **kw)
