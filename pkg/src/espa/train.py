"""Initialization, Adam and the mini-batch training loop."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape
from .evaluation import EvalReport, UndefinedMetricError, auc, classification_report
from .model import (
    ModelConfig,
    SampleArrays,
    collate,
    param_shapes,
    predict_arrays,
    tensorize,
    total_loss,
)
from .sampler import PairSample, Vocabulary

log = logging.getLogger(__name__)

LEARNING_RATES = (0.02, 0.01, 0.001, 0.0001)
BATCH_SIZES = (128, 256, 512, 1024)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0
    imbalance: str = "weighted"  # or "downsample" or "none"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dev_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate >= 0, batch_size >= 1 and epochs >= 0 required")
        if self.imbalance not in ("weighted", "downsample", "none"):
            raise ValueError(f"unknown imbalance strategy {self.imbalance!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal init: QR of a Gaussian, with R's diagonal signs folded into Q."""
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return q if rows >= cols else q.T


def xavier_normal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((rows, cols)) * math.sqrt(2.0 / (rows + cols))


def init_params(config: ModelConfig, vocab: Vocabulary, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config, vocab).items():
        base = name.split(".")[-1]
        if name.startswith("E_"):
            params[name] = rng.uniform(-0.1, 0.1, size=shape)
        elif name.startswith("lstm_") and base[0] in "WU":
            params[name] = orthogonal(*shape, rng)
        elif name in ("W_l", "W_g", "W_v", "W_sub"):
            params[name] = xavier_normal(*shape, rng)
        else:
            params[name] = np.zeros(shape)
    return ParamStore(params)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = params.grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def stratified_split(labels: Sequence[int], fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (train, dev) with ``fraction`` of each label held out."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    dev = []
    for y in (0, 1):
        idx = np.flatnonzero(labels == y)
        rng.shuffle(idx)
        dev.extend(idx[: int(round(fraction * len(idx)))].tolist())
    dev_mask = np.zeros(len(labels), dtype=bool)
    dev_mask[dev] = True
    return np.flatnonzero(~dev_mask), np.flatnonzero(dev_mask)


def student_grouped_order(students: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle students, then their pairs; batches keep a student's pairs together.

    Pairs of one student share most path prefixes, so grouping them keeps the
    trie small.
    """
    uniq = np.unique(students)
    rng.shuffle(uniq)
    rank = np.empty(students.max() + 1, dtype=np.int64)
    rank[uniq] = np.arange(len(uniq))
    jitter = rng.permutation(len(students))
    return np.lexsort((jitter, rank[students]))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_auc: float


@dataclass
class TrainResult:
    params: ParamStore
    best_epoch: int
    best_dev_auc: float
    history: list[EpochLog] = field(default_factory=list)
    pos_weight: float = 1.0

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "dev_auc"])
            for row in self.history:
                w.writerow([row.epoch, repr(row.train_loss), repr(row.dev_auc)])


def _first_nan(tape: Tape) -> str:
    for i, node in enumerate(tape.nodes):
        if not np.all(np.isfinite(node.out.data)):
            return f"output of primitive #{i} ({node.op}, shape {node.out.shape})"
    return "no intermediate tensor (loss only)"


def _safe_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return float("nan")


def train(
    model_config: ModelConfig,
    vocab: Vocabulary,
    train_set: Sequence[PairSample] | Sequence[SampleArrays],
    config: TrainConfig,
    dev_set: Sequence[PairSample] | Sequence[SampleArrays] | None = None,
    params: ParamStore | None = None,
) -> TrainResult:
    """Adam on mini-batches; keeps the parameters of the best dev-AUC epoch.

    Without an explicit ``dev_set`` a stratified ``dev_fraction`` of the
    training pairs is held out.
    """
    items = [x if isinstance(x, SampleArrays) else tensorize(x, vocab) for x in train_set]
    if not items:
        raise ValueError("empty training set")
    if dev_set is None and config.dev_fraction > 0:
        tr, dv = stratified_split([x.label for x in items], config.dev_fraction, config.seed)
        dev_items = [items[i] for i in dv]
        items = [items[i] for i in tr]
    else:
        dev_items = [x if isinstance(x, SampleArrays) else tensorize(x, vocab) for x in (dev_set or [])]
    labels = np.array([x.label for x in items])
    students = np.array([x.student_idx for x in items])
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    pos_weight = n_neg / n_pos if config.imbalance == "weighted" and n_pos > 0 else 1.0

    params = params if params is not None else init_params(model_config, vocab, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    dev_labels = np.array([x.label for x in dev_items])
    result = TrainResult(params.copy(), best_epoch=0, best_dev_auc=-math.inf, pos_weight=pos_weight)

    for epoch in range(1, config.epochs + 1):
        idx = np.arange(len(items))
        if config.imbalance == "downsample" and 0 < n_pos < n_neg:
            neg = np.flatnonzero(labels == 0)
            keep = np.sort(rng.choice(neg, size=n_pos, replace=False))
            idx = np.sort(np.concatenate([np.flatnonzero(labels == 1), keep]))
        order = idx[student_grouped_order(students[idx], rng)]
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            chunk = [items[i] for i in order[start:start + config.batch_size]]
            batch = collate(chunk, vocab.n_students)
            with Tape() as tape:
                parts = total_loss(params, model_config, batch, pos_weight)
            loss = parts.total.item()
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"epoch {epoch}: loss is {loss}; first non-finite tensor: {_first_nan(tape)}")
            params.zero_grad()
            ad.backward(parts.total, tape, params)
            opt.step(params)
            total += loss * batch.size
            seen += batch.size
        train_loss = total / max(seen, 1)
        if dev_items:
            dev_auc = _safe_auc(predict_arrays(params, model_config, dev_items, vocab.n_students), dev_labels)
        else:
            dev_auc = float("nan")
        result.history.append(EpochLog(epoch, train_loss, dev_auc))
        log.info("epoch %d loss %.5f dev_auc %.4f", epoch, train_loss, dev_auc)
        # without a usable dev AUC the latest epoch wins
        better = dev_auc > result.best_dev_auc if math.isfinite(dev_auc) else True
        if better:
            result.params = params.copy()
            result.best_epoch = epoch
            result.best_dev_auc = dev_auc if math.isfinite(dev_auc) else result.best_dev_auc
    if config.epochs == 0:
        result.params = params.copy()
    return result


@dataclass
class GridRun:
    learning_rate: float
    batch_size: int
    dev_auc: float


def grid_search(
    model_config: ModelConfig,
    vocab: Vocabulary,
    train_set: Sequence[PairSample],
    base: TrainConfig,
    learning_rates: Sequence[float] = LEARNING_RATES,
    batch_sizes: Sequence[int] = BATCH_SIZES,
) -> tuple[TrainConfig, list[GridRun]]:
    """Exhaustive search; ties go to the smaller learning rate, then batch size."""
    if not learning_rates or not batch_sizes:
        raise ValueError("grids must be nonempty")
    items = [tensorize(s, vocab) for s in train_set]
    runs = []
    for lr, bs in itertools.product(learning_rates, batch_sizes):
        cfg = TrainConfig(**{**base.to_dict(), "learning_rate": lr, "batch_size": bs})
        res = train(model_config, vocab, items, cfg)
        runs.append(GridRun(lr, bs, res.best_dev_auc))
        log.info("grid lr=%g bs=%d dev_auc=%.4f", lr, bs, res.best_dev_auc)
    best = min(runs, key=lambda r: (-r.dev_auc, r.learning_rate, r.batch_size))
    return TrainConfig(**{**base.to_dict(), "learning_rate": best.learning_rate, "batch_size": best.batch_size}), runs


def ablation_configs(base: ModelConfig) -> dict[str, ModelConfig]:
    """Model variants compared by the ablation table, keyed by row label."""
    d = base.to_dict()
    return {
        "ESPA": ModelConfig(**d),
        "w/o biases": ModelConfig(**{**d, "use_biases": False}),
        "w/o subtask": ModelConfig(**{**d, "use_subtask": False}),
        "w/o local-attn": ModelConfig(**{**d, "local_pooling": "weighted_sum"}),
        "w/o global-attn": ModelConfig(**{**d, "global_pooling": "weighted_sum"}),
        "w/o both-attn": ModelConfig(**{**d, "local_pooling": "weighted_sum", "global_pooling": "weighted_sum"}),
    }


@dataclass
class AblationRow:
    name: str
    seed: int
    report: EvalReport
    best_epoch: int


def run_ablation(
    base: ModelConfig,
    vocab: Vocabulary,
    train_set: Sequence[PairSample] | Sequence[SampleArrays],
    test_set: Sequence[PairSample] | Sequence[SampleArrays],
    config: TrainConfig,
    seeds: Sequence[int] = (0,),
    variants: Sequence[str] | None = None,
) -> list[AblationRow]:
    """Train every variant once per seed and score it on the test set."""
    items = [x if isinstance(x, SampleArrays) else tensorize(x, vocab) for x in train_set]
    test_items = [x if isinstance(x, SampleArrays) else tensorize(x, vocab) for x in test_set]
    labels = np.array([x.label for x in test_items])
    configs = ablation_configs(base)
    rows = []
    for name in variants or list(configs):
        for seed in seeds:
            cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
            res = train(configs[name], vocab, items, cfg)
            scores = predict_arrays(res.params, configs[name], test_items, vocab.n_students)
            rows.append(AblationRow(name, seed, classification_report(scores, labels), res.best_epoch))
            log.info("ablation %s seed %d auc %s", name, seed, rows[-1].report.auc)
    return rows


def mean_auc(rows: Sequence[AblationRow]) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r.name, []).append(r.report.auc if r.report.auc is not None else float("nan"))
    return {k: float(np.mean(v)) for k, v in out.items()}
