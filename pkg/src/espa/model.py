"""Path encoder, two-level personalized attention and the prediction head.

Batches are built once per list of samples by :func:`collate`.  Paths are
encoded level by level through a prefix trie (forward direction) and a
suffix trie (backward direction), so steps shared between paths of the same
batch run through the LSTM cell once.  Tokens are (value row, kind, relation)
triples, and grade nodes collapse onto the shared Pass/Fail rows.

Within a sample, SSP groups are ordered by similar-student id, CKP groups by
related-course id and paths by their token sequence.  Every reduction
therefore sees the same operand order no matter how the input was shuffled.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .kg import EntityKind, Relation
from .sampler import PairSample, Path, PathStep, Vocabulary

N_KINDS = len(EntityKind)
N_RELS = len(Relation)
_TOKEN_SPAN = N_KINDS * N_RELS
GATES = ("f", "i", "o", "c")
POOLING_MODES = ("personalized_attention", "weighted_sum")


@dataclass
class ModelConfig:
    D_e: int = 16
    D_h: int = 12
    beta_s: float = 0.7
    beta_c: float = 0.3
    lam: float = 1.0
    use_biases: bool = True
    use_subtask: bool = True
    local_pooling: str = "personalized_attention"
    global_pooling: str = "personalized_attention"
    cell_activation: str = "sigmoid"  # "tanh" gives the textbook LSTM output
    attention_scale: str = "embedding"  # sqrt(D_e); "query" uses sqrt(2 * D_h)

    def __post_init__(self) -> None:
        if self.D_e < 1 or self.D_h < 1:
            raise ValueError("D_e and D_h must be >= 1")
        if self.beta_s <= 0 or self.beta_c <= 0:
            raise ValueError("beta_s and beta_c must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        for mode in (self.local_pooling, self.global_pooling):
            if mode not in POOLING_MODES:
                raise ValueError(f"pooling mode {mode!r} not in {POOLING_MODES}")
        if self.cell_activation not in ("sigmoid", "tanh"):
            raise ValueError("cell_activation must be 'sigmoid' or 'tanh'")
        if self.attention_scale not in ("embedding", "query"):
            raise ValueError("attention_scale must be 'embedding' or 'query'")

    @property
    def d_k(self) -> int:
        return self.D_e if self.attention_scale == "embedding" else 2 * self.D_h

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig, vocab: Vocabulary) -> dict[str, tuple[int, ...]]:
    De, Dh = config.D_e, config.D_h
    shapes: dict[str, tuple[int, ...]] = {
        "E_value": (vocab.n_value_rows, De),
        "E_ntype": (N_KINDS, De),
        "E_rel": (N_RELS, De),
    }
    for direction in ("fwd", "bwd"):
        for g in GATES:
            shapes[f"lstm_{direction}.W_{g}"] = (Dh, 3 * De)
        for g in GATES:
            shapes[f"lstm_{direction}.U_{g}"] = (Dh, Dh)
        for g in GATES:
            shapes[f"lstm_{direction}.b_{g}"] = (Dh,)
    shapes.update({
        "W_l": (2 * Dh, De), "b_l": (2 * Dh,),
        "W_g": (2 * Dh, De), "b_g": (2 * Dh,),
        "W_v": (1, De), "b_v": (1,),
        "bias_student": (vocab.n_students,),
        "bias_course": (vocab.n_courses,),
        "W_sub": (vocab.n_students, De), "b_sub": (vocab.n_students,),
    })
    return shapes


def zero_params(config: ModelConfig, vocab: Vocabulary) -> ParamStore:
    return ParamStore({k: np.zeros(s) for k, s in param_shapes(config, vocab).items()})


# -- tensorization -------------------------------------------------------------

def token_code(vocab: Vocabulary, step: PathStep) -> int:
    return int(vocab.value_row[step.value]) * _TOKEN_SPAN + int(step.kind) * N_RELS + int(step.relation)


def decode_tokens(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return codes // _TOKEN_SPAN, (codes % _TOKEN_SPAN) // N_RELS, codes % N_RELS


def canonical_groups(sample: PairSample) -> list[tuple[str, object, list[Path]]]:
    """Groups and their paths in the order the model consumes them."""
    out: list[tuple[str, object, list[Path]]] = []
    for grp in sorted(sample.ssp_groups, key=lambda x: x.similar_student):
        out.append(("SSP", grp, sorted(grp.paths, key=Path.key)))
    for grp in sorted(sample.ckp_groups, key=lambda x: x.related_course):
        out.append(("CKP", grp, sorted(grp.paths, key=Path.key)))
    return out


@dataclass
class SampleArrays:
    tokens: np.ndarray  # (P, 5) token codes, -1 padded
    lengths: np.ndarray  # (P,)
    path_group: np.ndarray  # (P,)
    path_pos: np.ndarray  # (P,) position within its group
    group_is_ssp: np.ndarray  # (G,)
    grade_rows: np.ndarray  # (G,)
    similar_idx: np.ndarray  # student indices for the subtask
    student_row: int
    student_idx: int
    course_idx: int
    label: int


def tensorize(sample: PairSample, vocab: Vocabulary) -> SampleArrays:
    groups = canonical_groups(sample)
    if not groups:
        raise ValueError(f"pair ({sample.student}, {sample.course}) has no evidence paths")
    toks, lens, pg, pp, ssp, rows = [], [], [], [], [], []
    for gi, (kind, grp, paths) in enumerate(groups):
        ssp.append(kind == "SSP")
        rows.append(vocab.grade_row(grp.terminal_grade if kind == "SSP" else grp.prior_grade))
        for j, p in enumerate(paths):
            codes = [token_code(vocab, st) for st in p.steps]
            toks.append(codes + [-1] * (5 - len(codes)))
            lens.append(len(codes))
            pg.append(gi)
            pp.append(j)
    return SampleArrays(
        tokens=np.array(toks, dtype=np.int64),
        lengths=np.array(lens, dtype=np.int64),
        path_group=np.array(pg, dtype=np.int64),
        path_pos=np.array(pp, dtype=np.int64),
        group_is_ssp=np.array(ssp, dtype=bool),
        grade_rows=np.array(rows, dtype=np.int64),
        similar_idx=np.array([vocab.student_index[s] for s in sample.similar_students], dtype=np.int64),
        student_row=int(vocab.value_row[sample.student]),
        student_idx=vocab.student_index[sample.student],
        course_idx=vocab.course_index[sample.course],
        label=int(sample.label),
    )


@dataclass
class Trie:
    """Levels of unique prefixes; ``final`` points each path at its last node."""

    codes: list[np.ndarray]
    parents: list[np.ndarray]
    final: np.ndarray

    @property
    def n_nodes(self) -> int:
        return sum(len(c) for c in self.codes)


def build_trie(tokens: np.ndarray, lengths: np.ndarray) -> Trie:
    codes, parents = [], []
    node = np.zeros(len(tokens), dtype=np.int64)
    final = np.zeros(len(tokens), dtype=np.int64)
    offset = 0
    for t in range(int(lengths.max())):
        active = np.flatnonzero(lengths > t)
        keys = node[active] * (1 << 32) + tokens[active, t]
        uniq, inv = np.unique(keys, return_inverse=True)
        codes.append(uniq & ((1 << 32) - 1))
        parents.append(uniq >> 32)
        node[active] = inv
        ending = lengths[active] == t + 1
        final[active[ending]] = offset + inv[ending]
        offset += len(uniq)
    return Trie(codes, parents, final)


def reverse_tokens(tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    width = tokens.shape[1]
    j = np.arange(width)[None, :]
    src = lengths[:, None] - 1 - j
    rev = np.where(src >= 0, np.take_along_axis(tokens, np.clip(src, 0, width - 1), axis=1), -1)
    return rev


@dataclass
class Batch:
    fwd: Trie
    bwd: Trie
    n_paths: int
    path_slot: np.ndarray  # (B, G, K), n_paths marks padding
    path_mask: np.ndarray
    group_mask: np.ndarray  # (B, G)
    group_is_ssp: np.ndarray
    grade_rows: np.ndarray
    student_rows: np.ndarray
    student_idx: np.ndarray
    course_idx: np.ndarray
    labels: np.ndarray
    similar_counts: np.ndarray  # (B, n_students)

    @property
    def size(self) -> int:
        return len(self.labels)


def collate(items: Sequence[SampleArrays], n_students: int) -> Batch:
    B = len(items)
    tokens = np.concatenate([it.tokens for it in items])
    lengths = np.concatenate([it.lengths for it in items])
    P = len(tokens)
    G = max(len(it.group_is_ssp) for it in items)
    K = max(int(it.path_pos.max()) + 1 for it in items)
    slot = np.full((B, G, K), P, dtype=np.int64)
    group_mask = np.zeros((B, G), dtype=bool)
    is_ssp = np.zeros((B, G), dtype=bool)
    grade_rows = np.zeros((B, G), dtype=np.int64)
    counts = np.zeros((B, n_students))
    start = 0
    for b, it in enumerate(items):
        n = len(it.tokens)
        slot[b, it.path_group, it.path_pos] = np.arange(start, start + n)
        start += n
        ng = len(it.group_is_ssp)
        group_mask[b, :ng] = True
        is_ssp[b, :ng] = it.group_is_ssp
        grade_rows[b, :ng] = it.grade_rows
        np.add.at(counts[b], it.similar_idx, 1.0)
    return Batch(
        fwd=build_trie(tokens, lengths),
        bwd=build_trie(reverse_tokens(tokens, lengths), lengths),
        n_paths=P,
        path_slot=slot,
        path_mask=slot < P,
        group_mask=group_mask,
        group_is_ssp=is_ssp,
        grade_rows=grade_rows,
        student_rows=np.array([it.student_row for it in items], dtype=np.int64),
        student_idx=np.array([it.student_idx for it in items], dtype=np.int64),
        course_idx=np.array([it.course_idx for it in items], dtype=np.int64),
        labels=np.array([it.label for it in items], dtype=np.float64),
        similar_counts=counts,
    )


# -- network pieces ------------------------------------------------------------

def embed_tokens(params: ParamStore, codes: np.ndarray) -> Tensor:
    rows, kinds, rels = decode_tokens(codes)
    return ad.concat([
        ad.gather(params["E_value"], rows),
        ad.gather(params["E_ntype"], kinds),
        ad.gather(params["E_rel"], rels),
    ], axis=1)


def embed_step(params: ParamStore, step: PathStep, vocab: Vocabulary) -> Tensor:
    """``e_v ⊕ e_n ⊕ e_r`` for one path step, shape (3·D_e,)."""
    return ad.reshape(embed_tokens(params, np.array([token_code(vocab, step)])), (-1,))


def gate_weights(params: ParamStore, prefix: str) -> tuple[Tensor, Tensor, Tensor]:
    """The four gates stacked in f, i, o, c order: W (4·D_h, 3·D_e), U, b."""
    return (
        ad.concat([params[f"{prefix}.W_{g}"] for g in GATES], axis=0),
        ad.concat([params[f"{prefix}.U_{g}"] for g in GATES], axis=0),
        ad.concat([params[f"{prefix}.b_{g}"] for g in GATES], axis=0),
    )


def lstm_update(x_part: Tensor, h_prev: Tensor | None, c_prev: Tensor | None, U: Tensor,
                D_h: int, cell_activation: str = "sigmoid") -> tuple[Tensor, Tensor]:
    """One step given ``x_part = x W^T + b``; ``None`` states stand for zeros."""
    pre = x_part
    if h_prev is not None:
        pre = ad.add(pre, ad.matmul(h_prev, U, trans_b=True))
    hc = ad.lstm_pointwise(pre, c_prev, cell_activation)
    return ad.narrow(hc, 0, D_h), ad.narrow(hc, D_h, 2 * D_h)


def lstm_cell(params: ParamStore, prefix: str, x: Tensor, h_prev: Tensor, c_prev: Tensor,
              cell_activation: str = "sigmoid") -> tuple[Tensor, Tensor]:
    W, U, b = gate_weights(params, prefix)
    D_h = U.shape[1]
    return lstm_update(ad.add(ad.matmul(x, W, trans_b=True), b), h_prev, c_prev, U, D_h, cell_activation)


def run_direction(params: ParamStore, prefix: str, trie: Trie, D_h: int, cell_activation: str) -> Tensor:
    """Final hidden state for each path after walking its trie levels.

    The input projection depends only on the token, so it is computed once
    per distinct token of a level and then spread to the trie nodes.
    """
    W, U, b = gate_weights(params, prefix)
    hs = []
    h_prev = c_prev = None
    for codes, parents in zip(trie.codes, trie.parents):
        uniq, inv = np.unique(codes, return_inverse=True)
        x_part = ad.gather(ad.add(ad.matmul(embed_tokens(params, uniq), W, trans_b=True), b), inv)
        if h_prev is None:
            h_in = c_in = None
        else:
            h_in, c_in = ad.gather(h_prev, parents), ad.gather(c_prev, parents)
        h_prev, c_prev = lstm_update(x_part, h_in, c_in, U, D_h, cell_activation)
        hs.append(h_prev)
    return ad.gather(ad.concat(hs, axis=0), trie.final)


def encode_paths(params: ParamStore, config: ModelConfig, fwd: Trie, bwd: Trie) -> Tensor:
    """BiLSTM path encodings ``h'`` of shape (P, 2·D_h)."""
    hf = run_direction(params, "lstm_fwd", fwd, config.D_h, config.cell_activation)
    hb = run_direction(params, "lstm_bwd", bwd, config.D_h, config.cell_activation)
    return ad.concat([hf, hb], axis=1)


def encode_path(params: ParamStore, config: ModelConfig, path: Path, vocab: Vocabulary) -> Tensor:
    if len(path.steps) == 0:
        raise ValueError("cannot encode an empty path")
    tokens = np.array([[token_code(vocab, st) for st in path.steps]], dtype=np.int64)
    lengths = np.array([len(path.steps)])
    h = encode_paths(params, config, build_trie(tokens, lengths), build_trie(reverse_tokens(tokens, lengths), lengths))
    return ad.reshape(h, (-1,))


def _query(params: ParamStore, e_s: Tensor, w: str, b: str) -> Tensor:
    return ad.relu(ad.add(ad.matmul(e_s, params[w], trans_b=True), params[b]))


def local_attention(params: ParamStore, config: ModelConfig, e_s: Tensor, slots: Tensor,
                    path_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Pool (B, G, K, 2·D_h) path encodings into (B, G, 2·D_h) group vectors."""
    B, G, K, D = slots.shape
    if config.local_pooling == "weighted_sum":
        w = path_mask / np.maximum(path_mask.sum(axis=-1, keepdims=True), 1)
        alpha = ad.constant(w)
    else:
        q = _query(params, e_s, "W_l", "b_l")
        scores = ad.sum_reduce(ad.mul(slots, ad.reshape(q, (B, 1, 1, D))), axis=-1)
        alpha = ad.masked_softmax(ad.scale(scores, 1.0 / math.sqrt(config.d_k)), path_mask, axis=-1)
    r = ad.sum_reduce(ad.mul(slots, ad.reshape(alpha, (B, G, K, 1))), axis=2)
    return r, alpha


def global_attention(params: ParamStore, config: ModelConfig, e_s: Tensor, reps: Tensor,
                     group_mask: np.ndarray, beta: np.ndarray | None) -> Tensor:
    """Weights over groups; ``beta=None`` is plain scaled dot-product attention."""
    B, G, D = reps.shape
    if config.global_pooling == "weighted_sum":
        return ad.constant(group_mask / np.maximum(group_mask.sum(axis=-1, keepdims=True), 1))
    q = _query(params, e_s, "W_g", "b_g")
    scores = ad.sum_reduce(ad.mul(reps, ad.reshape(q, (B, 1, D))), axis=-1)
    if beta is not None:
        scores = ad.mul(scores, ad.constant(beta))
    return ad.masked_softmax(ad.scale(scores, 1.0 / math.sqrt(config.d_k)), group_mask, axis=-1)


def grade_values(params: ParamStore, grade_rows: np.ndarray) -> Tensor:
    e = ad.gather(params["E_value"], grade_rows)
    v = ad.tanh(ad.add(ad.matmul(e, params["W_v"], trans_b=True), params["b_v"]))
    return ad.reshape(v, grade_rows.shape)


def grade_value(params: ParamStore, vocab: Vocabulary, grade_id: int) -> float:
    return grade_values(params, np.array([vocab.value_row[grade_id]])).data[0]


def attend_local(params: ParamStore, config: ModelConfig, student_row: int,
                 path_reps: Tensor) -> tuple[Tensor, Tensor]:
    """Single-group form of :func:`local_attention`: returns ``r`` and ``alpha'``."""
    K, D = path_reps.shape
    e_s = ad.gather(params["E_value"], np.array([student_row]))
    r, alpha = local_attention(params, config, e_s, ad.reshape(path_reps, (1, 1, K, D)), np.ones((1, 1, K), bool))
    return ad.reshape(r, (D,)), ad.reshape(alpha, (K,))


def attend_global(params: ParamStore, config: ModelConfig, student_row: int, reps: Tensor,
                  is_ssp: Sequence[bool], weighted: bool = True) -> Tensor:
    n, D = reps.shape
    e_s = ad.gather(params["E_value"], np.array([student_row]))
    is_ssp = np.asarray(is_ssp, dtype=bool)
    beta = np.where(is_ssp, config.beta_s, config.beta_c)[None, :] if weighted else None
    alpha = global_attention(params, config, e_s, ad.reshape(reps, (1, n, D)), np.ones((1, n), bool), beta)
    return ad.reshape(alpha, (n,))


@dataclass
class ForwardTrace:
    path_reps: np.ndarray  # (P, 2·D_h)
    path_slot: np.ndarray
    local_weights: np.ndarray  # (B, G, K)
    group_reps: np.ndarray  # (B, G, 2·D_h)
    global_weights: np.ndarray  # (B, G)
    values: np.ndarray  # (B, G)
    logits: np.ndarray
    yhat: np.ndarray
    path_mask: np.ndarray
    group_mask: np.ndarray
    subtask_probs: np.ndarray | None = None

    def for_sample(self, b: int) -> dict:
        ng = int(self.group_mask[b].sum())
        out = {"yhat": float(self.yhat[b]), "global_weights": self.global_weights[b, :ng].copy(),
               "values": self.values[b, :ng].copy(), "local_weights": []}
        for g in range(ng):
            k = int(self.path_mask[b, g].sum())
            out["local_weights"].append(self.local_weights[b, g, :k].copy())
        return out


@dataclass
class Forward:
    yhat: Tensor
    e_s: Tensor
    trace: ForwardTrace = field(repr=False)


def forward(params: ParamStore, config: ModelConfig, batch: Batch, weighted_global: bool = True) -> Forward:
    B = batch.size
    h = encode_paths(params, config, batch.fwd, batch.bwd)
    D = h.shape[1]
    padded = ad.concat([h, ad.constant(np.zeros((1, D)))], axis=0)
    slots = ad.gather(padded, batch.path_slot)
    e_s = ad.gather(params["E_value"], batch.student_rows)
    reps, alpha_local = local_attention(params, config, e_s, slots, batch.path_mask)
    beta = np.where(batch.group_is_ssp, config.beta_s, config.beta_c) if weighted_global else None
    alpha = global_attention(params, config, e_s, reps, batch.group_mask, beta)
    v = grade_values(params, batch.grade_rows)
    z = ad.sum_reduce(ad.mul(alpha, v), axis=1)
    if config.use_biases:
        z = ad.add(z, ad.gather(params["bias_student"], batch.student_idx))
        z = ad.add(z, ad.gather(params["bias_course"], batch.course_idx))
    yhat = ad.sigmoid(z)
    trace = ForwardTrace(
        path_reps=h.data, path_slot=batch.path_slot, local_weights=alpha_local.data,
        group_reps=reps.data, global_weights=alpha.data, values=v.data, logits=z.data,
        yhat=yhat.data, path_mask=batch.path_mask, group_mask=batch.group_mask,
    )
    assert yhat.shape == (B,)
    return Forward(yhat, e_s, trace)


def predict(params: ParamStore, config: ModelConfig, batch: Batch) -> ForwardTrace:
    return forward(params, config, batch).trace


def loss_pred(yhat: Tensor, y: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Per-sample ``-[w·y·log ŷ + (1-y)·log(1-ŷ)]``."""
    y = np.asarray(y, dtype=np.float64)
    log_p = ad.log(yhat)
    log_q = ad.log(ad.add(ad.scale(yhat, -1.0), ad.constant(np.ones(yhat.shape))))
    pos = ad.mul(log_p, ad.constant(pos_weight * y))
    neg = ad.mul(log_q, ad.constant(1.0 - y))
    return ad.scale(ad.add(pos, neg), -1.0)


def subtask_loss(params: ParamStore, e_s: Tensor, similar_counts: np.ndarray) -> Tensor:
    """Per-sample ``-Σ_i log P(s_i | s)`` over the sample's similar students."""
    logits = ad.add(ad.matmul(e_s, params["W_sub"], trans_b=True), params["b_sub"])
    probs = ad.masked_softmax(logits, np.ones(logits.shape, dtype=bool), axis=-1)
    return ad.scale(ad.sum_reduce(ad.mul(ad.log(probs), ad.constant(similar_counts)), axis=1), -1.0)


@dataclass
class LossParts:
    total: Tensor
    pred: Tensor
    infe: Tensor | None
    out: Forward


def total_loss(params: ParamStore, config: ModelConfig, batch: Batch, pos_weight: float = 1.0) -> LossParts:
    """``(1/N) Σ (loss_pred + λ·loss_infe)`` over the batch."""
    out = forward(params, config, batch)
    lp = loss_pred(out.yhat, batch.labels, pos_weight)
    per_sample = lp
    li = None
    if config.use_subtask:
        li = subtask_loss(params, out.e_s, batch.similar_counts)
        per_sample = ad.add(lp, ad.scale(li, config.lam))
    total = ad.scale(ad.sum_reduce(per_sample), 1.0 / batch.size)
    return LossParts(total, lp, li, out)


def mean_prediction_loss(params: ParamStore, config: ModelConfig, batch: Batch, pos_weight: float = 1.0) -> Tensor:
    out = forward(params, config, batch)
    return ad.scale(ad.sum_reduce(loss_pred(out.yhat, batch.labels, pos_weight)), 1.0 / batch.size)


class ESPA:
    """Bundles config, vocabulary and parameters."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: ParamStore | None = None) -> None:
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else zero_params(config, vocab)

    def arrays(self, samples: Sequence[PairSample]) -> list[SampleArrays]:
        return [tensorize(s, self.vocab) for s in samples]

    def batch(self, samples: Sequence[PairSample] | Sequence[SampleArrays]) -> Batch:
        items = [s if isinstance(s, SampleArrays) else tensorize(s, self.vocab) for s in samples]
        return collate(items, self.vocab.n_students)

    def predict(self, samples: Sequence[PairSample], batch_size: int = 256) -> np.ndarray:
        return predict_arrays(self.params, self.config, self.arrays(samples), self.vocab.n_students, batch_size)

    def trace(self, samples: Sequence[PairSample]) -> ForwardTrace:
        return predict(self.params, self.config, self.batch(samples))


def predict_arrays(params: ParamStore, config: ModelConfig, items: Sequence[SampleArrays],
                   n_students: int, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(items), batch_size):
        out.append(predict(params, config, collate(items[i:i + batch_size], n_students)).yhat)
    return np.concatenate(out) if out else np.zeros(0)
