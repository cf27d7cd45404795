import dataclasses
import math

import numpy as np
import pytest

from espa import autodiff as ad
from espa.kg import EntityKind as K
from espa.kg import Relation as R
from espa.model import (
    ESPA,
    ModelConfig,
    attend_global,
    attend_local,
    collate,
    embed_step,
    encode_path,
    forward,
    grade_value,
    loss_pred,
    mean_prediction_loss,
    param_shapes,
    predict,
    subtask_loss,
    tensorize,
    total_loss,
    zero_params,
)
from espa.sampler import Path, Vocabulary, build_dataset, make_step
from espa.train import init_params

from oracles import bilstm_scalar, lstm_blocks, step_input


@pytest.fixture
def tiny(tiny_graph):
    vocab = Vocabulary.from_graph(tiny_graph)
    train, test, _ = build_dataset(tiny_graph, split_term=3)
    return tiny_graph, vocab, train + test


def random_params(config, vocab, rng, scale=0.5):
    return ad.ParamStore({k: rng.normal(scale=scale, size=s) for k, s in param_shapes(config, vocab).items()})


def random_path(g, rng, length):
    steps = []
    for t in range(length):
        e = g.entities[int(rng.integers(len(g.entities)))]
        rel = R.END_MARKER if t == length - 1 else R(int(rng.integers(len(R) - 1)))
        steps.append(make_step(e.id, e.kind, rel))
    return Path(tuple(steps))


def test_param_shapes_cover_layout(tiny):
    _, vocab, _ = tiny
    s = param_shapes(ModelConfig(D_e=4, D_h=3), vocab)
    assert s["lstm_fwd.W_f"] == (3, 12) and s["lstm_bwd.U_c"] == (3, 3) and s["W_l"] == (6, 4)
    assert s["E_value"] == (vocab.n_value_rows, 4) and s["E_rel"] == (len(R), 4)
    assert s["bias_student"] == (3,) and s["bias_course"] == (2,) and s["W_sub"] == (3, 4)


def test_embed_step_concatenation(tiny, rng):
    g, vocab, _ = tiny
    cfg = ModelConfig(D_e=2, D_h=2)
    p = random_params(cfg, vocab, rng)
    bob = next(e for e in g.entities if e.value == "Bob")
    e = embed_step(p, make_step(bob.id, K.STUDENT, R.HAVE), vocab).data
    expected = np.concatenate([p["E_value"].data[vocab.value_row[bob.id]], p["E_ntype"].data[int(K.STUDENT)],
                               p["E_rel"].data[int(R.HAVE)]])
    np.testing.assert_array_equal(e, expected)
    e2 = embed_step(p, make_step(bob.id, K.STUDENT, R.END_MARKER), vocab).data
    np.testing.assert_array_equal(e2[:2], e[:2])
    np.testing.assert_array_equal(e2[4:], p["E_rel"].data[int(R.END_MARKER)])


def test_zero_weights_single_step_gives_quarter(tiny):
    g, vocab, _ = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    h = encode_path(zero_params(cfg, vocab), cfg, Path((make_step(0, g.entity(0).kind, R.END_MARKER),)), vocab).data
    np.testing.assert_array_equal(h, np.full(6, 0.25))


def test_palindrome_with_tied_directions(tiny, rng):
    g, vocab, _ = tiny
    cfg = ModelConfig(D_e=3, D_h=2)
    p = random_params(cfg, vocab, rng)
    for name in list(p.names()):
        if name.startswith("lstm_bwd."):
            p[name].data = p[name.replace("bwd", "fwd")].data.copy()
    a = make_step(0, g.entity(0).kind, R.END_MARKER)
    b = make_step(1, g.entity(1).kind, R.HAVE)
    h = encode_path(p, cfg, Path((a, b, a)), vocab).data
    np.testing.assert_allclose(h[:2], h[2:], rtol=0, atol=1e-15)


@pytest.mark.parametrize("act", ["sigmoid", "tanh"])
def test_encode_path_matches_scalar_oracle(tiny, rng, act):
    g, vocab, _ = tiny
    cfg = ModelConfig(D_e=2, D_h=2, cell_activation=act)
    for _ in range(20):
        p = random_params(cfg, vocab, rng, scale=1.0)
        path = random_path(g, rng, int(rng.integers(1, 6)))
        state = p.state()
        xs = [step_input(state, vocab.value_row[st.value], int(st.kind), int(st.relation)) for st in path.steps]
        ref = bilstm_scalar(xs, lstm_blocks(state, "lstm_fwd"), lstm_blocks(state, "lstm_bwd"), 2, act)
        np.testing.assert_allclose(encode_path(p, cfg, path, vocab).data, ref, rtol=0, atol=1e-12)


def test_hidden_state_range(tiny, rng):
    g, vocab, samples = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    trace = ESPA(cfg, vocab, random_params(cfg, vocab, rng, scale=2.0)).trace(samples)
    # o in (0, 1) and sigmoid(c) in (0, 1)
    assert np.all(trace.path_reps > 0) and np.all(trace.path_reps < 1)


def test_empty_path_rejected(tiny):
    _, vocab, _ = tiny
    with pytest.raises(ValueError):
        Path(())


def test_attend_local_cases(tiny, rng):
    _, vocab, _ = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    p = random_params(cfg, vocab, rng)
    h1 = ad.constant(rng.normal(size=(1, 6)))
    r, a = attend_local(p, cfg, 0, h1)
    np.testing.assert_array_equal(a.data, [1.0])
    np.testing.assert_array_equal(r.data, h1.data[0])
    same = ad.constant(np.tile(h1.data, (3, 1)))
    r, a = attend_local(p, cfg, 0, same)
    np.testing.assert_allclose(a.data, np.full(3, 1 / 3), rtol=1e-15)
    np.testing.assert_allclose(r.data, h1.data[0], rtol=1e-14)


def test_attend_local_formula_and_weighted_sum(tiny, rng):
    _, vocab, _ = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    p = random_params(cfg, vocab, rng)
    hs = rng.normal(size=(4, 6))
    r, a = attend_local(p, cfg, 1, ad.constant(hs))
    q = np.maximum(p["W_l"].data @ p["E_value"].data[1] + p["b_l"].data, 0)
    s = hs @ q / math.sqrt(4)
    w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    np.testing.assert_allclose(a.data, w, rtol=1e-13)
    np.testing.assert_allclose(r.data, w @ hs, rtol=1e-13)
    _, a = attend_local(p, dataclasses.replace(cfg, local_pooling="weighted_sum"), 1, ad.constant(hs))
    np.testing.assert_array_equal(a.data, np.full(4, 0.25))


def test_attend_local_permutation(tiny, rng):
    _, vocab, _ = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    p = random_params(cfg, vocab, rng)
    hs = rng.normal(size=(5, 6))
    perm = rng.permutation(5)
    r1, a1 = attend_local(p, cfg, 0, ad.constant(hs))
    r2, a2 = attend_local(p, cfg, 0, ad.constant(hs[perm]))
    np.testing.assert_allclose(a2.data, a1.data[perm], rtol=1e-14)
    np.testing.assert_allclose(r2.data, r1.data, rtol=1e-13)


def test_attend_global_cases(tiny, rng):
    _, vocab, _ = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    p = random_params(cfg, vocab, rng)
    np.testing.assert_array_equal(attend_global(p, cfg, 0, ad.constant(rng.normal(size=(1, 6))), [True]).data, [1.0])
    reps = ad.constant(rng.normal(size=(3, 6)))
    ones = dataclasses.replace(cfg, beta_s=1.0, beta_c=1.0)
    np.testing.assert_array_equal(
        attend_global(p, ones, 0, reps, [True, False, True]).data,
        attend_global(p, cfg, 0, reps, [True, False, True], weighted=False).data,
    )


def test_attend_global_beta_sign_rule(tiny, rng):
    _, vocab, _ = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    for _ in range(50):
        p = random_params(cfg, vocab, rng)
        r = rng.normal(size=6)
        a = attend_global(p, cfg, 2, ad.constant(np.stack([r, r])), [True, False]).data
        q = np.maximum(p["W_g"].data @ p["E_value"].data[2] + p["b_g"].data, 0)
        dot = q @ r
        if abs(dot) > 1e-9:
            assert (a[0] > a[1]) == (dot > 0)


def test_grade_value(tiny, rng):
    g, vocab, _ = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    fail_id = next(e.id for e in g.entities if e.kind is K.GRADE and e.value.startswith("Fail"))
    assert grade_value(zero_params(cfg, vocab), vocab, fail_id) == 0.0
    v = grade_value(random_params(cfg, vocab, rng, scale=5.0), vocab, fail_id)
    assert -1.0 < v < 1.0


def test_prediction_head(tiny):
    _, vocab, samples = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    model = ESPA(cfg, vocab)
    np.testing.assert_array_equal(model.predict(samples), np.full(len(samples), 0.5))
    model.params["bias_student"].data[:] = 5.0
    model.params["bias_course"].data[:] = 5.0
    assert np.all(model.predict(samples) > 0.9999)
    off = ESPA(dataclasses.replace(cfg, use_biases=False), vocab, model.params)
    np.testing.assert_array_equal(off.predict(samples), np.full(len(samples), 0.5))


def test_prediction_composition(tiny, rng):
    _, vocab, samples = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    p = random_params(cfg, vocab, rng)
    tr = ESPA(cfg, vocab, p).trace(samples)
    for b, smp in enumerate(samples):
        d = tr.for_sample(b)
        z = d["global_weights"] @ d["values"]
        z += p["bias_student"].data[vocab.student_index[smp.student]]
        z += p["bias_course"].data[vocab.course_index[smp.course]]
        assert d["yhat"] == pytest.approx(1 / (1 + math.exp(-z)), rel=1e-14)
        assert sum(d["global_weights"]) == pytest.approx(1.0, abs=1e-12)
        for w in d["local_weights"]:
            assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_loss_pred_values():
    y = ad.constant(np.array([0.5, 0.5, 1 - 1e-9]))
    np.testing.assert_allclose(loss_pred(y, np.array([1, 0, 1])).data, [math.log(2), math.log(2), 1e-9], rtol=1e-6)
    np.testing.assert_allclose(loss_pred(y, np.array([1, 0, 1]), 3.0).data[0], 3 * math.log(2))


def test_subtask_loss_values(tiny):
    _, vocab, _ = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    p = zero_params(cfg, vocab)  # uniform over 3 students
    e_s = ad.constant(np.zeros((1, 4)))
    np.testing.assert_allclose(subtask_loss(p, e_s, np.array([[0.0, 1.0, 0.0]])).data, [math.log(3)])
    np.testing.assert_allclose(subtask_loss(p, e_s, np.ones((1, 3))).data, [3 * math.log(3)])


def test_subtask_gradient_pulls_student_towards_similar(tiny, rng):
    _, vocab, _ = tiny
    cfg = ModelConfig(D_e=4, D_h=3)
    p = random_params(cfg, vocab, rng)
    target = np.array([[0.0, 1.0, 0.0]])
    cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    before = cos(p["E_value"].data[0], p["W_sub"].data[1])
    for _ in range(2):
        p.zero_grad()
        with ad.Tape() as tape:
            loss = ad.sum_reduce(subtask_loss(p, ad.gather(p["E_value"], np.array([0])), target))
        ad.backward(loss, tape, p)
        for k in ("E_value", "W_sub", "b_sub"):
            p[k].data = p[k].data - 0.1 * p.grads[k]
    assert cos(p["E_value"].data[0], p["W_sub"].data[1]) > before


def test_lambda_zero_is_mean_prediction_loss(tiny, rng):
    _, vocab, samples = tiny
    cfg = ModelConfig(D_e=4, D_h=3, lam=0.0)
    p = random_params(cfg, vocab, rng)
    batch = collate([tensorize(s, vocab) for s in samples], vocab.n_students)
    assert total_loss(p, cfg, batch, 2.0).total.item() == mean_prediction_loss(p, cfg, batch, 2.0).item()


def _shuffled(sample, rng):
    def shuffle(seq):
        seq = list(seq)
        return tuple(seq[i] for i in rng.permutation(len(seq)))

    ssp = [dataclasses.replace(g, paths=shuffle(g.paths)) for g in sample.ssp_groups]
    ckp = [dataclasses.replace(g, paths=shuffle(g.paths)) for g in sample.ckp_groups]
    return dataclasses.replace(sample, ssp_groups=shuffle(ssp), ckp_groups=shuffle(ckp))


def test_permutation_invariance(small_dataset, rng):
    g, train, _, _ = small_dataset
    vocab = Vocabulary.from_graph(g)
    cfg = ModelConfig()
    model = ESPA(cfg, vocab, init_params(cfg, vocab, seed=1))
    picks = [train[i] for i in rng.choice(len(train), 30, replace=False)]
    a = model.predict(picks)
    b = model.predict([_shuffled(s, rng) for s in picks])
    np.testing.assert_array_equal(a, b)


def test_tensorize_requires_groups(tiny):
    _, vocab, samples = tiny
    empty = dataclasses.replace(samples[0], ssp_groups=(), ckp_groups=())
    with pytest.raises(ValueError):
        tensorize(empty, vocab)


def test_config_validation():
    for bad in ({"D_e": 0}, {"beta_s": 0.0}, {"lam": -1.0}, {"local_pooling": "max"}, {"cell_activation": "relu"}):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()
