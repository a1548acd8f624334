"""Evaluation protocol, baselines and the ablation grid."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .data import ExpressionMatrix, LabeledDataset, class_partition
from .distill import (
    DistillConfig,
    DistillTrace,
    TaskHead,
    balanced_batch,
    distill_run,
    dm_loss_from_means,
    matching_epoch,
    sample_per_class,
    synthesize,
)
from .foundation import Foundation, encode, encode_array
from .rng import substream
from .scdg import SCDG
from .tensor import Tensor

log = logging.getLogger(__name__)

ARCHITECTURES = ("linear-head-on-F", "logistic-on-raw", "mlp-on-raw", "attention-pooled")


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    n_trials: int = 10
    epochs: int = 1000
    learning_rate: float | None = None  # None picks the architecture default
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.n_trials < 1 or self.epochs < 0 or self.threads < 1:
            raise EvalError("need n_trials >= 1, epochs >= 0, threads >= 1")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise EvalError("learning rate must be positive")


@dataclass(frozen=True)
class EvalModelSpec:
    arch: str = "linear-head-on-F"
    layers: int = 1
    hidden: int = 64
    token_dim: int = 16

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise EvalError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.layers < 1 or self.hidden < 1 or self.token_dim < 1:
            raise EvalError("layers, hidden and token_dim must be positive")


DEFAULT_LR = {
    "linear-head-on-F": 0.1,
    "logistic-on-raw": 0.05,
    "mlp-on-raw": 0.02,
    "attention-pooled": 0.05,
}


@dataclass
class MetricsReport:
    accuracies: list[float]
    config: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


class AttentionPooled:
    """Each gene is a token ``x_g * e_g``; one learned query pools tokens by softmax attention."""

    def __init__(self, params: nn.ParamSet, n_genes: int, n_classes: int, dim: int, rng):
        params.add("attn.embed", rng.normal(0.0, 1.0 / np.sqrt(n_genes), size=(n_genes, dim)), "model")
        params.add("attn.query", rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, 1)), "model")
        params.add("attn.bias", np.zeros(n_genes), "model")
        self.out = nn.MLP(params, "attn.out", (dim, n_classes), rng, group="model")
        self.params = params

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        ones = Tensor(np.ones((x.shape[0], 1)))
        gene_score = T.transpose(T.matmul(p["attn.embed"], p["attn.query"]))  # 1 x d
        scores = T.add(T.mul(x, T.matmul(ones, gene_score)), p["attn.bias"])
        attn = T.softmax(scores)
        # weights sum to one over genes; rescale so uniform attention is a plain projection of x
        pooled = T.scale(T.matmul(T.mul(attn, x), p["attn.embed"]), float(x.shape[1]))
        return self.out(pooled)


def _build(spec: EvalModelSpec, in_dim: int, n_classes: int, rng):
    params = nn.ParamSet()
    if spec.arch == "linear-head-on-F":
        return TaskHead(n_classes, in_dim, spec.layers, spec.hidden, rng, params), params
    if spec.arch == "logistic-on-raw":
        return nn.MLP(params, "model", (in_dim, n_classes), rng), params
    if spec.arch == "mlp-on-raw":
        return nn.MLP(params, "model", (in_dim, spec.hidden, n_classes), rng), params
    return AttentionPooled(params, in_dim, n_classes, spec.token_dim, rng), params


def _inputs(ds: LabeledDataset, spec: EvalModelSpec, foundation: Foundation | None) -> np.ndarray:
    if spec.arch == "linear-head-on-F":
        if foundation is None:
            raise EvalError("linear-head-on-F needs the frozen foundation model")
        return encode_array(foundation, ds.matrix)
    return ds.matrix.dense()


def train_classifier(X: np.ndarray, y: np.ndarray, n_classes: int, spec: EvalModelSpec,
                     epochs: int, lr: float, rng):
    model, params = _build(spec, X.shape[1], n_classes, rng)
    opt = nn.SGD(params, lr)
    xt = Tensor(X)
    for _ in range(epochs):
        loss = nn.cross_entropy(model(xt), y)
        if not np.isfinite(loss.item()):
            break
        opt.step(T.backward(loss, params.trainable()))
    return model


def predict(model, X: np.ndarray, batch: int = 2048) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([model(Tensor(X[i:i + batch])).data.argmax(axis=1)
                               for i in range(0, len(X), batch)])


def evaluate_synthetic(S: LabeledDataset, test: LabeledDataset, model: EvalModelSpec = EvalModelSpec(),
                       cfg: EvalConfig = EvalConfig(), foundation: Foundation | None = None,
                       test_inputs: np.ndarray | None = None) -> MetricsReport:
    """Train ``cfg.n_trials`` freshly initialized models on ``S`` and score each on ``test``."""
    cfg.validate()
    model.validate()
    if S.n_cells == 0:
        raise EvalError("synthetic set is empty")
    present = set(S.labels.tolist())
    missing = sorted(set(test.labels.tolist()) - present)
    if missing:
        raise EvalError(f"class {missing[0]} is absent from the synthetic set")
    if S.n_genes != test.n_genes:
        raise EvalError("synthetic and test sets have different gene counts")
    lr = cfg.learning_rate or DEFAULT_LR[model.arch]
    X = _inputs(S, model, foundation)
    Xt = test_inputs if test_inputs is not None else _inputs(test, model, foundation)
    C = max(S.n_classes, test.n_classes)

    def trial(i: int) -> float:
        clf = train_classifier(X, S.labels, C, model, cfg.epochs, lr, substream(cfg.seed, f"trial-{i}"))
        return float(np.mean(predict(clf, Xt) == test.labels))

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            accs = list(pool.map(trial, range(cfg.n_trials)))
    else:
        accs = [trial(i) for i in range(cfg.n_trials)]
    echo = {**asdict(model), **asdict(cfg), "learning_rate": lr, "n_synthetic": S.n_cells}
    return MetricsReport(accs, echo)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def baseline_random_real(train: LabeledDataset, spc: int, seed: int) -> LabeledDataset:
    """The SPC-per-class real cells the distillation would start from, used as-is."""
    return train.subset(sample_per_class(train, spc, seed))


@dataclass
class DataLevelResult:
    synthetic: LabeledDataset
    trace: DistillTrace
    negative_fraction: list[float]


def baseline_data_level(train: LabeledDataset, foundation: Foundation, cfg: DistillConfig,
                        lr: float = 0.05) -> DataLevelResult:
    """Matching losses applied directly to expression values, clamped at zero after every step.

    ``negative_fraction[k]`` is the share of entries the unclamped update at
    step ``k`` would have driven below zero.
    """
    cfg.validate()
    if not foundation.frozen:
        raise EvalError("the data-level baseline needs a frozen foundation model")
    start = baseline_random_real(train, cfg.spc, cfg.seed)
    S = start.matrix.dense()
    y = start.labels
    feats = encode_array(foundation, train.matrix)
    parts = class_partition(train)
    means = {c: feats[idx].mean(axis=0) for c, idx in parts.items()}
    batch_rng = substream(cfg.seed, "expert-batches")
    trace = DistillTrace()
    neg = []
    for k in range(cfg.steps + 1):
        St = Tensor(S, requires_grad=True)
        syn = encode(foundation, St)
        total = None
        ldm = ldc = math.nan
        if cfg.uses_dm:
            dm = dm_loss_from_means(means, syn, y, cfg.dm_squared)
            ldm = dm.item()
            total = T.scale(dm, cfg.dm_weight)
        if cfg.uses_dc:
            init = TaskHead(train.n_classes, syn.shape[1], cfg.head_layers, cfg.head_hidden,
                            substream(cfg.seed, f"head-init-{k}"))
            student, expert = init.copy(), init.copy()
            s_opt, e_opt = nn.SGD(student.params, cfg.lr_head), nn.SGD(expert.params, cfg.lr_head)
            names = student.param_names()
            dc = None
            for _ in range(cfg.epochs):
                rows = balanced_batch(parts, cfg.expert_batch_per_class, batch_rng)
                term, g_s, g_e = matching_epoch(cfg, student, expert, syn, y, feats[rows], train.labels[rows])
                if term is not None:
                    dc = term if dc is None else T.add(dc, term)
                s_opt.step(dict(zip(names, g_s)))
                e_opt.step(dict(zip(names, g_e)))
            if dc is None:
                dc = T.scale(T.sum(syn), 0.0)
            ldc = dc.item()
            term = T.scale(dc, cfg.dc_weight)
            total = term if total is None else T.add(total, term)
        trace.steps.append(k)
        trace.loss_dm.append(ldm)
        trace.loss_dc.append(ldc)
        trace.student_acc.append(math.nan)
        trace.expert_acc.append(math.nan)
        if k == cfg.steps:
            break
        (g,) = T.backward(total, [St])
        raw = S - lr * g
        neg.append(float(np.mean(raw < 0)))
        S = np.maximum(raw, 0.0)
    synthetic = LabeledDataset(ExpressionMatrix.from_dense(S), y, train.n_classes, start.conditions,
                               start.condition_names, start.condition_vocab)
    return DataLevelResult(synthetic, trace, neg)


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

GRID_AXES = ("spc", "generator", "frozen", "head_layers", "mode", "seed")


@dataclass
class GridResult:
    axes: tuple[str, ...]
    trials: list[dict] = field(default_factory=list)
    aggregate: list[dict] = field(default_factory=list)
    traces: dict = field(default_factory=dict)

    def trials_csv(self) -> str:
        return _to_csv([*self.axes, "trial", "accuracy"], self.trials)

    def aggregate_csv(self) -> str:
        return _to_csv([*self.axes, "mean", "std", "status"], self.aggregate)

    def cell(self, **axes) -> dict:
        for row in self.aggregate:
            if all(str(row[k]) == str(v) for k, v in axes.items()):
                return row
        raise KeyError(axes)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def ablation_grid(train: LabeledDataset, test: LabeledDataset, gen: SCDG, grid: dict,
                  base: DistillConfig = DistillConfig(), eval_cfg: EvalConfig = EvalConfig(),
                  model: EvalModelSpec = EvalModelSpec()) -> GridResult:
    """Distill and evaluate every combination of the listed axis values.

    ``grid`` maps axis names from ``GRID_AXES`` to value lists; unlisted axes
    keep ``base``'s value.  Every cell evaluates with the same trial seeds.
    Cells that cannot run (SPC above a class size) are kept and marked.
    """
    unknown = set(grid) - set(GRID_AXES)
    if unknown:
        raise EvalError(f"unknown grid axes {sorted(unknown)}")
    axes = tuple(a for a in GRID_AXES if a in grid)
    result = GridResult(axes)
    test_inputs = _inputs(test, model, gen.foundation)
    smallest = int(train.class_counts().min())
    for values in itertools.product(*(grid[a] for a in axes)):
        cell = dict(zip(axes, values))
        cfg = replace(base, **{_field(a): _coerce(a, v) for a, v in cell.items()})
        if cfg.spc > smallest:
            result.aggregate.append({**cell, "mean": math.nan, "std": math.nan,
                                     "status": f"skipped: SPC={cfg.spc} exceeds smallest class size {smallest}"})
            continue
        codes, trace, used = distill_run(train, gen, cfg)
        S = synthesize(used, codes, cfg)
        rep = evaluate_synthetic(S, test, model, eval_cfg, gen.foundation, test_inputs)
        result.traces[values] = trace
        for i, acc in enumerate(rep.accuracies):
            result.trials.append({**cell, "trial": i, "accuracy": acc})
        result.aggregate.append({**cell, "mean": rep.mean, "std": rep.std, "status": "ok"})
    return result


def _field(axis: str) -> str:
    return {"frozen": "freeze_foundation"}.get(axis, axis)


def _coerce(axis: str, v):
    if axis == "frozen" and isinstance(v, str):
        return v.lower() in ("true", "1", "yes")
    return v
