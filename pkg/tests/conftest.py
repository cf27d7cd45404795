import numpy as np
import pytest

from espa.kg import EntityKind as K
from espa.kg import Relation as R
from espa.kg import TripleBuilder

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def tiny_builder() -> TripleBuilder:
    """Bob, Tom and Ann with a few tags; DS is a prerequisite of OS.

    Term 1: Bob passes DS, Tom passes OS, Ann fails OS.
    Term 2: Bob takes OS (fails), Ann takes DS (passes).
    Term 3: Tom takes DS (fails).
    """
    tb = TripleBuilder()
    for s, tags in (("Bob", ("Grind", "Sleep Late")), ("Tom", ("Grind", "Sleep Late")), ("Ann", ("Grind",))):
        for t in tags:
            tb.add(K.STUDENT, s, R.HAVE, K.TAG, t)
            tb.add(K.TAG, t, R.BELONG_TO, K.STUDENT, s)
    tb.add(K.COURSE, "DS", R.PREREQUISITE, K.COURSE, "OS")
    for k, (s, grade, course, term) in enumerate(
        (("Bob", "Pass", "DS", 1), ("Tom", "Pass", "OS", 1), ("Ann", "Fail", "OS", 1),
         ("Bob", "Fail", "OS", 2), ("Ann", "Pass", "DS", 2), ("Tom", "Fail", "DS", 3)),
        start=1,
    ):
        tb.add(K.STUDENT, s, R.GET_GRADE, K.GRADE, f"{grade}#{k}", term)
        tb.add(K.GRADE, f"{grade}#{k}", R.IN, K.COURSE, course)
    return tb


@pytest.fixture
def tiny_graph():
    return tiny_builder().build()


def ids(g):
    return {(e.kind, e.value): e.id for e in g.entities}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    from espa.synth import SynthConfig, generate

    cfg = SynthConfig(n_students=120, n_courses=20, courses_per_term=2, seed=3)
    g, truth = generate(cfg)
    return cfg, g, truth


@pytest.fixture(scope="session")
def small_dataset(small_synth):
    from espa.sampler import build_dataset

    cfg, g, _ = small_synth
    train, test, stats = build_dataset(g, split_term=cfg.n_terms)
    return g, train, test, stats
