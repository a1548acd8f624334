"""Latent-code dataset distillation through a frozen generator.

Synthetic rows are produced from optimizable latent codes, matched against
the original data by distribution matching (per-class feature means) and/or
gradient matching (cosine distance between task-head gradients on synthetic
and original batches), and the matching loss is backpropagated through the
checkpointed generator into the latent codes only.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .data import ExpressionMatrix, LabeledDataset, class_partition
from .foundation import Foundation, encode, encode_array
from .rng import substream
from .scdg import SCDG, generate, generate_decoder_only
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("DC", "DM", "DC+DM")
GENERATORS = ("scdg", "decoder")


class DistillError(RuntimeError):
    pass


@dataclass
class LatentCodes:
    """SPC latent rows per class, grouped by class in ascending order."""

    Z: np.ndarray
    classes: np.ndarray
    codes: np.ndarray
    provenance: np.ndarray
    spc: int

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(len(self.classes), -1)
        self.provenance = np.asarray(self.provenance, dtype=np.int64)
        if not np.all(np.isfinite(self.Z)):
            raise DistillError("latent codes must be finite")
        counts = np.bincount(self.classes)
        if len(counts) and not np.all(counts == self.spc):
            raise DistillError("latent codes must hold exactly SPC rows per class")

    def with_Z(self, Z: np.ndarray) -> "LatentCodes":
        return LatentCodes(Z, self.classes, self.codes, self.provenance, self.spc)


def init_latents(train: LabeledDataset, foundation: Foundation, spc: int, seed: int) -> LatentCodes:
    rows = sample_per_class(train, spc, seed)
    Z = encode_array(foundation, train.matrix.dense(rows))
    return LatentCodes(Z, train.labels[rows], train.conditions[rows], rows, spc)


def sample_per_class(train: LabeledDataset, spc: int, seed: int) -> np.ndarray:
    """SPC distinct cell indices per class, drawn uniformly without replacement."""
    if spc < 1:
        raise DistillError("SPC must be at least 1")
    rng = substream(seed, "init-latents")
    parts = class_partition(train)
    rows = []
    for c in range(train.n_classes):
        idx = parts.get(c, [])
        if len(idx) < spc:
            raise DistillError(f"class {c} has {len(idx)} training cells, fewer than SPC={spc}")
        rows.extend(np.sort(rng.choice(np.asarray(idx), size=spc, replace=False)))
    return np.asarray(rows, dtype=np.int64)


# ---------------------------------------------------------------------------
# task head and matching losses
# ---------------------------------------------------------------------------


class TaskHead:
    """Classification head on 128-dim features: ``layers`` dense layers, relu between them."""

    def __init__(self, n_classes: int, in_dim: int = 128, layers: int = 1, hidden: int = 64,
                 rng: np.random.Generator | None = None, params: nn.ParamSet | None = None):
        widths = (in_dim, *([hidden] * (layers - 1)), n_classes)
        self.params = params if params is not None else nn.ParamSet()
        self.net = nn.MLP(self.params, "head", widths, rng, group="head")
        self.n_classes = n_classes

    def __call__(self, features: Tensor) -> Tensor:
        return self.net(features)

    def copy(self) -> "TaskHead":
        w = self.net.widths
        return TaskHead(self.n_classes, w[0], len(w) - 1, w[1] if len(w) > 2 else 64, params=self.params.copy())

    def param_names(self) -> list[str]:
        return self.net.names()

    def n_params(self) -> int:
        return sum(self.params[k].size for k in self.params)


def head_cross_entropy_grad(head: TaskHead, features: Tensor, labels) -> list[Tensor]:
    """Cross-entropy gradient w.r.t. every head parameter, as graph ops in ``features``.

    For the linear head this is ``(1/n) sum_i (softmax(W f_i + b) - onehot(y_i)) f_i``;
    deeper heads use the same backward recursion with relu masks held constant.
    The result is ordered like ``head.param_names()`` and differentiable in
    ``features`` with ordinary first-order backward.
    """
    labels = np.asarray(labels, dtype=np.int64)
    features = features if isinstance(features, Tensor) else Tensor(features)
    n = features.shape[0]
    if features.ndim != 2 or features.shape[1] != head.net.widths[0] or len(labels) != n:
        raise T.ContractError(f"features {features.shape} do not fit head input {head.net.widths[0]}")
    if n and (labels.min() < 0 or labels.max() >= head.n_classes):
        raise T.ContractError("label outside the head's classes")
    weights = [head.net.weight(i).detach() for i in range(head.net.n_layers)]
    biases = [head.net.bias(i).detach() for i in range(head.net.n_layers)]
    acts = [features]
    h = features
    for i in range(head.net.n_layers):
        h = T.add(T.matmul(h, weights[i]), biases[i])
        if i < head.net.n_layers - 1:
            h = T.relu(h)
        acts.append(h)
    delta = T.scale(T.add(T.softmax(acts[-1]), Tensor(-nn.one_hot(labels, head.n_classes))), 1.0 / n)
    grads: list[Tensor] = []
    for i in reversed(range(head.net.n_layers)):
        grads.append(T.sum(delta, axis=0))
        grads.append(T.matmul(T.transpose(acts[i]), delta))
        if i > 0:
            mask = Tensor((acts[i].data > 0).astype(np.float64))
            delta = T.mul(T.matmul(delta, T.transpose(weights[i])), mask)
    grads.reverse()  # W0, b0, W1, b1, ...
    return grads


def flatten_grads(grads: list[Tensor]) -> Tensor:
    return T.concat([T.flatten(g) for g in grads], axis=0)


def dc_loss(g_student: Tensor, g_expert: Tensor) -> Tensor:
    """One minus the cosine similarity of two flattened gradients."""
    g_student = g_student if isinstance(g_student, Tensor) else Tensor(g_student)
    g_expert = g_expert if isinstance(g_expert, Tensor) else Tensor(g_expert)
    if g_student.shape != g_expert.shape:
        raise T.ContractError(f"gradient shapes differ: {g_student.shape} vs {g_expert.shape}")
    ns, ne = T.norm(g_student), T.norm(g_expert)
    if ns.item() == 0.0 or ne.item() == 0.0:
        raise T.ContractError("cosine distance is undefined for a zero-norm gradient")
    dot = T.sum(T.mul(g_student, g_expert))
    inv = T.exp(T.scale(T.add(T.log(ns), T.log(ne)), -1.0))
    return T.add(Tensor(1.0), T.scale(T.mul(dot, inv), -1.0))


def dm_loss_from_means(target_means: dict[int, np.ndarray], syn_features: Tensor, labels,
                       squared: bool = False) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    present = set(labels.tolist())
    missing = (set(target_means) ^ present)
    if missing:
        raise DistillError(f"class {min(missing)} is missing from the original or synthetic side")
    terms = []
    for c in sorted(target_means):
        rows = np.flatnonzero(labels == c)
        diff = T.add(T.mean(T.take(syn_features, rows), axis=0), Tensor(-np.asarray(target_means[c])))
        terms.append(T.sum(T.mul(diff, diff)) if squared else T.norm(diff))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total


def dm_loss(feature_fn: Callable[[Tensor], Tensor], original_parts: dict[int, np.ndarray],
            synthetic: Tensor, labels, squared: bool = False) -> Tensor:
    """Sum over classes of the distance between original and synthetic feature means.

    ``original_parts`` maps class id to that class's original rows; their
    features are constants.  ``squared=True`` sums squared distances instead.
    """
    with T.no_grad():
        means = {int(c): feature_fn(Tensor(np.atleast_2d(rows))).data.mean(axis=0)
                 for c, rows in original_parts.items()}
    return dm_loss_from_means(means, feature_fn(synthetic), labels, squared)


# ---------------------------------------------------------------------------
# the distillation loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillConfig:
    steps: int = 50
    epochs: int = 10
    spc: int = 1
    mode: str = "DM"
    lr_latent: float = 1.0
    lr_head: float = 0.1
    t_gen: int | None = None
    freeze_foundation: bool = True
    seed: int = 0
    dm_weight: float = 1.0
    dc_weight: float = 1.0
    dm_squared: bool = False
    momentum: float = 0.0
    expert_batch_per_class: int = 16
    head_layers: int = 1
    head_hidden: int = 64
    generator: str = "scdg"
    checkpoint: bool = True
    dc_per_class: bool = False
    scale_lr_by_spc: bool = True
    lr_foundation: float = 0.01

    def validate(self) -> None:
        if self.steps < 0 or self.epochs < 1 or self.spc < 1:
            raise ValueError("need steps >= 0, epochs >= 1 and spc >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")
        if self.lr_latent <= 0 or self.lr_head <= 0 or self.lr_foundation <= 0:
            raise ValueError("learning rates must be positive")
        if self.head_layers < 1 or self.expert_batch_per_class < 1:
            raise ValueError("head_layers and expert_batch_per_class must be positive")

    @property
    def latent_step(self) -> float:
        """Effective latent learning rate; each row's share of a class mean shrinks as 1/spc."""
        return self.lr_latent * (self.spc if self.scale_lr_by_spc else 1)

    @property
    def uses_dm(self) -> bool:
        return "DM" in self.mode

    @property
    def uses_dc(self) -> bool:
        return "DC" in self.mode


@dataclass
class DistillTrace:
    steps: list[int] = field(default_factory=list)
    loss_dm: list[float] = field(default_factory=list)
    loss_dc: list[float] = field(default_factory=list)
    student_acc: list[float] = field(default_factory=list)
    expert_acc: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def total_loss(self) -> list[float]:
        return [(0.0 if math.isnan(a) else a) + (0.0 if math.isnan(b) else b)
                for a, b in zip(self.loss_dm, self.loss_dc)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss_dm", "loss_dc", "student_acc", "expert_acc"])
        for row in zip(self.steps, self.loss_dm, self.loss_dc, self.student_acc, self.expert_acc):
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
        return buf.getvalue()


def _generator_fn(gen: SCDG, cfg: DistillConfig, codes: LatentCodes):
    t_gen = cfg.t_gen if cfg.t_gen is not None else max(gen.schedule.T // 2, 1)
    fn = generate if cfg.generator == "scdg" else generate_decoder_only
    return lambda z: fn(gen, z, codes.classes, codes.codes, t_gen)


def synthesize(gen: SCDG, codes: LatentCodes, cfg: DistillConfig | None = None) -> LabeledDataset:
    """Decode latent codes into a labelled synthetic dataset."""
    cfg = cfg or DistillConfig()
    with T.no_grad():
        X = _generator_fn(gen, cfg, codes)(Tensor(codes.Z)).data
    vocab = gen.embedder.vocab
    return LabeledDataset(ExpressionMatrix.from_dense(X), codes.classes, gen.n_classes, codes.codes,
                          condition_vocab=vocab if codes.codes.shape[1] == len(vocab) else ())


def balanced_batch(parts: dict[int, list[int]], per_class: int, rng) -> np.ndarray:
    rows = []
    for c in sorted(parts):
        idx = np.asarray(parts[c])
        rows.extend(rng.choice(idx, size=per_class, replace=len(idx) < per_class))
    return np.asarray(rows, dtype=np.int64)


def _accuracy(head: TaskHead, features: np.ndarray, labels: np.ndarray) -> float:
    with T.no_grad():
        pred = head(Tensor(features)).data.argmax(axis=1)
    return float(np.mean(pred == labels))


def distill_run(train: LabeledDataset, gen: SCDG, cfg: DistillConfig,
                codes: LatentCodes | None = None) -> tuple[LatentCodes, DistillTrace, SCDG]:
    """Optimize latent codes so the generated set matches ``train``.

    Returns the final codes, the per-step trace (step 0 through ``cfg.steps``;
    the last record scores the final codes without updating them) and the
    generator that produced them.  With ``freeze_foundation`` the generator is
    the caller's, untouched; otherwise a private unfrozen copy is returned.
    """
    cfg.validate()
    started = time.perf_counter()
    foundation = gen.foundation
    if cfg.freeze_foundation:
        if not foundation.frozen or any(not gen.params.is_frozen(k) for k in gen.params):
            raise DistillError("freeze_foundation=True needs a frozen encoder, decoder and generator")
    else:
        foundation = foundation.copy()
        foundation.unfreeze()
        gen = gen.copy(foundation)
        gen.unfreeze()
    if codes is None:
        codes = init_latents(train, foundation, cfg.spc, cfg.seed)
    X = train.matrix.dense()
    labels = train.labels
    parts = class_partition(train)
    batch_rng = substream(cfg.seed, "expert-batches")
    velocity = np.zeros_like(codes.Z)
    trace = DistillTrace()
    frozen_feats = encode_array(foundation, X) if cfg.freeze_foundation else None
    fm_opt = nn.SGD(foundation.params, cfg.lr_foundation) if not cfg.freeze_foundation else None
    gen_opt = nn.SGD(gen.params, cfg.lr_foundation) if not cfg.freeze_foundation else None

    Z = codes.Z.copy()
    for k in range(cfg.steps + 1):
        feats = frozen_feats if frozen_feats is not None else encode_array(foundation, X)
        means = {c: feats[idx].mean(axis=0) for c, idx in parts.items()}
        Zt = Tensor(Z, requires_grad=True)
        gen_fn = _generator_fn(gen, cfg, codes)
        S = T.checkpointed_apply(gen_fn, Zt) if cfg.checkpoint else gen_fn(Zt)
        syn_feats = encode(foundation, S)
        total = None
        ldm = ldc = s_acc = e_acc = math.nan
        if cfg.uses_dm:
            dm = dm_loss_from_means(means, syn_feats, codes.classes, cfg.dm_squared)
            ldm = dm.item()
            total = T.scale(dm, cfg.dm_weight)
        if cfg.uses_dc or not cfg.freeze_foundation:
            dc, s_acc, e_acc = _gradient_matching(cfg, k, foundation, syn_feats, codes, X, feats, labels,
                                                  parts, batch_rng, fm_opt)
            if cfg.uses_dc:
                ldc = dc.item()
                term = T.scale(dc, cfg.dc_weight)
                total = term if total is None else T.add(total, term)
        if not np.isfinite(total.item()):
            raise DistillError(f"matching loss became non-finite at step {k}")
        trace.steps.append(k)
        trace.loss_dm.append(ldm)
        trace.loss_dc.append(ldc)
        trace.student_acc.append(s_acc)
        trace.expert_acc.append(e_acc)
        if k == cfg.steps:
            break
        wrt = {"Z": Zt}
        if gen_opt is not None:
            wrt.update({f"gen/{n}": t for n, t in gen.params.trainable().items()})
            wrt.update({f"fm/{n}": t for n, t in foundation.params.trainable().items()})
        grads = T.backward(total, wrt)
        gZ = grads.pop("Z")
        velocity = cfg.momentum * velocity + gZ
        Z = Z - cfg.latent_step * velocity
        if gen_opt is not None:
            gen_opt.step({n[4:]: g for n, g in grads.items() if n.startswith("gen/")})
            fm_opt.step({n[3:]: g for n, g in grads.items() if n.startswith("fm/")})
        log.debug("distill step %d dm=%.5f dc=%.5f", k, ldm, ldc)
    trace.wall_time = time.perf_counter() - started
    return codes.with_Z(Z), trace, gen


def matching_epoch(cfg: DistillConfig, student: TaskHead, expert: TaskHead, syn_feats: Tensor, syn_labels,
                   real_feats: np.ndarray, real_labels) -> tuple[Tensor | None, list, list]:
    """Cosine gradient distance for one classification epoch, plus both heads' plain gradients.

    With ``cfg.dc_per_class`` the distance is summed over classes, each class
    comparing gradients of its own synthetic and original rows; classes whose
    gradient has vanished (saturated head) contribute nothing.  Returns
    ``None`` as the distance when no class contributed.
    """
    syn_labels, real_labels = np.asarray(syn_labels), np.asarray(real_labels)
    with T.no_grad():
        g_e = head_cross_entropy_grad(expert, Tensor(real_feats), real_labels)
    if not cfg.dc_per_class:
        g_s = head_cross_entropy_grad(student, syn_feats, syn_labels)
        term = dc_loss(flatten_grads(g_s), flatten_grads(g_e))
        return term, [g.data for g in g_s], [g.data for g in g_e]
    with T.no_grad():
        g_s = head_cross_entropy_grad(student, syn_feats.detach(), syn_labels)
    term = None
    for c in np.unique(syn_labels):
        syn_rows, real_rows = np.flatnonzero(syn_labels == c), np.flatnonzero(real_labels == c)
        flat_s = flatten_grads(head_cross_entropy_grad(student, T.take(syn_feats, syn_rows), syn_labels[syn_rows]))
        with T.no_grad():
            flat_e = flatten_grads(head_cross_entropy_grad(expert, Tensor(real_feats[real_rows]),
                                                           real_labels[real_rows]))
        if T.norm(flat_s).item() == 0.0 or T.norm(flat_e).item() == 0.0:
            continue  # saturated head: no direction to match for this class
        d = dc_loss(flat_s, flat_e)
        term = d if term is None else T.add(term, d)
    return term, [g.data for g in g_s], [g.data for g in g_e]


def _gradient_matching(cfg: DistillConfig, k: int, foundation: Foundation, syn_feats: Tensor,
                       codes: LatentCodes, X: np.ndarray, feats: np.ndarray, labels: np.ndarray,
                       parts, batch_rng, fm_opt):
    """N classification epochs of student and expert heads, summing the cosine distances.

    Both heads start from the same fresh initialization each distillation step.
    When the foundation is unfrozen, the expert's cross-entropy also updates
    the encoder, so the feature space drifts while matching is under way.
    """
    init = TaskHead(len(parts), syn_feats.shape[1], cfg.head_layers, cfg.head_hidden,
                    substream(cfg.seed, f"head-init-{k}"))
    student, expert = init.copy(), init.copy()
    s_opt, e_opt = nn.SGD(student.params, cfg.lr_head), nn.SGD(expert.params, cfg.lr_head)
    names = student.param_names()
    total = None
    for n in range(cfg.epochs):
        rows = balanced_batch(parts, cfg.expert_batch_per_class, batch_rng)
        if fm_opt is None:
            real = Tensor(feats[rows])
        else:
            real = encode(foundation, Tensor(X[rows]))
        term, g_s, g_e = matching_epoch(cfg, student, expert, syn_feats, codes.classes,
                                        real.data, labels[rows])
        if term is not None:
            total = term if total is None else T.add(total, term)
        s_opt.step(dict(zip(names, g_s)))
        e_opt.step(dict(zip(names, g_e)))
        if fm_opt is not None:
            ce = nn.cross_entropy(expert(real), labels[rows])
            enc_names = {n_: t for n_, t in foundation.params.trainable().items() if n_.startswith("encoder")}
            fm_opt.step(T.backward(ce, enc_names))
    if total is None:
        total = T.scale(T.sum(syn_feats), 0.0)
    s_acc = _accuracy(student, feats, labels)
    e_acc = _accuracy(expert, feats, labels)
    return total, s_acc, e_acc
