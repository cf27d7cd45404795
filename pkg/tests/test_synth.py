from graphlib import TopologicalSorter

import numpy as np
import pytest

from espa.evaluation import auc
from espa.kg import EntityKind as K
from espa.kg import Relation as R
from espa.kg import load_graph
from espa.synth import GroundTruth, SynthConfig, SynthError, TAG_CATEGORIES, generate, write_synth


def _outcomes(g, truth):
    keys, y = [], []
    for (s, c), grade in sorted(g.enrollment.items()):
        keys.append(f"{g.entity(s).value}|{g.entity(c).value}")
        y.append(int(g.outcome(grade) == "Fail"))
    return keys, np.array(y)


def test_schema_and_shape(small_synth):
    cfg, g, truth = small_synth
    s = g.summary()
    assert s["entities_per_kind"]["Student"] == 120 and s["entities_per_kind"]["Course"] <= 20
    assert s["enrollments"] == len(truth.fail_prob)
    for t in g.triples:
        if t.relation is R.GET_GRADE:
            assert 1 <= t.term <= cfg.n_terms
    tag_names = {v for _, vals in TAG_CATEGORIES for v, _ in vals}
    assert {e.value for e in g.entities if e.kind is K.TAG} <= tag_names


def test_prerequisites_form_dag(small_synth):
    _, g, _ = small_synth
    edges = {}
    for t in g.triples:
        if t.relation is R.PREREQUISITE:
            edges.setdefault(t.tail.id, set()).add(t.head.id)
    list(TopologicalSorter(edges).static_order())  # raises CycleError on a cycle
    assert edges


def test_prerequisites_taken_in_earlier_terms(small_synth):
    _, g, _ = small_synth
    for t in g.triples:
        if t.relation is not R.PREREQUISITE:
            continue
        for (s, c), grade in g.enrollment.items():
            if c == t.tail.id:
                pre = g.enrollment.get((s, t.head.id))
                assert pre is not None and g.grade_term[pre] < g.grade_term[grade]


def test_deterministic(tmp_path):
    cfg = SynthConfig(n_students=40, n_courses=10, courses_per_term=2, seed=9)
    a = write_synth(tmp_path / "a", *generate(cfg))
    b = write_synth(tmp_path / "b", *generate(cfg))
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()
    g = load_graph(a["graph"])
    assert g == generate(cfg)[0]
    assert GroundTruth.from_json(a["truth"].read_text()) == generate(cfg)[1]


def test_fail_rate_matches_base_rate():
    rates = []
    for seed in range(10):
        g, truth = generate(SynthConfig(seed=seed))
        rates.append(_outcomes(g, truth)[1].mean())
    assert abs(np.mean(rates) - 0.15) <= 0.02
    assert np.mean(list(truth.fail_prob.values())) == pytest.approx(0.15, abs=1e-6)


def test_tags_track_diligence(small_synth):
    _, g, truth = small_synth
    dil = {}
    for t in g.triples:
        if t.relation is R.HAVE:
            dil.setdefault(t.tail.value, []).append(truth.diligence[int(t.head.value[1:]) - 1])
    assert np.mean(dil["Grind"]) > np.mean(dil["Ordinary"]) > np.mean(dil["Slacker"])


def test_tag_limit_case():
    cfg = SynthConfig(n_students=200, w_tags=40.0, noise=0.0, w_diligence=0.0, w_prereq=0.0, difficulty_sd=0.0)
    g, truth = generate(cfg)
    keys, y = _outcomes(g, truth)
    load = np.array([truth.tag_load[int(k[1:5]) - 1] for k in keys])
    assert auc(load, y) > 0.97


def test_null_signal_probabilities_constant():
    # only the per-enrollment noise varies under the null preset
    g, truth = generate(SynthConfig.null_signal(n_students=60, noise=0.0))
    p = np.array(list(truth.fail_prob.values()))
    assert np.ptp(p) < 1e-12 and p[0] == pytest.approx(0.15, abs=1e-9)


def test_invalid_configs():
    with pytest.raises(ValueError):
        SynthConfig(base_fail_rate=0.6)
    with pytest.raises(ValueError):
        SynthConfig(n_terms=0)


def test_regeneration_gives_up():
    # one student, one course per term: some term is bound to lack a failure
    with pytest.raises(SynthError):
        generate(SynthConfig(n_students=1, n_courses=3, n_terms=3, courses_per_term=1, max_attempts=2,
                             base_fail_rate=0.01))
