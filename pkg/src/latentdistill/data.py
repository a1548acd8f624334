"""Sparse labelled count matrices, preprocessing and a toy data generator."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .rng import substream

TARGET_SUM = 1e4


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path, self.line = path, line


@dataclass(frozen=True)
class ExpressionMatrix:
    """Cells x genes non-negative values, stored as CSR with sorted indices."""

    values: sp.csr_matrix

    def __post_init__(self):
        m = sp.csr_matrix(self.values, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        if m.nnz and m.data.min() < 0:
            raise DataError("expression values must be non-negative")
        object.__setattr__(self, "values", m)

    @classmethod
    def from_dense(cls, arr) -> "ExpressionMatrix":
        return cls(sp.csr_matrix(np.asarray(arr, dtype=np.float64)))

    @classmethod
    def from_coo(cls, n_cells: int, n_genes: int, rows, cols, vals) -> "ExpressionMatrix":
        rows, cols = np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)
        coo = sp.coo_matrix((np.asarray(vals, dtype=np.float64), (rows, cols)), shape=(n_cells, n_genes))
        return cls(coo.tocsr())

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values.data))

    def zero_fraction(self) -> float:
        return 1.0 - self.nnz / (self.n_cells * self.n_genes)

    def dense(self, rows=None) -> np.ndarray:
        m = self.values if rows is None else self.values[np.asarray(rows)]
        return m.toarray()

    def row_totals(self) -> np.ndarray:
        return np.asarray(self.values.sum(axis=1)).ravel()

    def take(self, rows) -> "ExpressionMatrix":
        return ExpressionMatrix(self.values[np.asarray(rows, dtype=np.int64)])


@dataclass(frozen=True)
class ConditionInfo:
    class_id: int
    codes: tuple[int, ...] = ()


@dataclass(frozen=True)
class LabeledDataset:
    matrix: ExpressionMatrix
    labels: np.ndarray
    n_classes: int
    conditions: np.ndarray = None  # n_cells x k small-integer codes
    condition_names: tuple[str, ...] = ()
    condition_vocab: tuple[int, ...] = ()
    cell_ids: tuple[str, ...] = field(default=None, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if len(labels) != self.matrix.n_cells:
            raise DataError(f"{len(labels)} labels for {self.matrix.n_cells} cells")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise DataError(f"class ids must lie in [0, {self.n_classes})")
        cond = self.conditions
        if cond is None:
            cond = np.zeros((len(labels), 0), dtype=np.int64)
        cond = np.asarray(cond, dtype=np.int64).reshape(len(labels), -1)
        object.__setattr__(self, "conditions", cond)
        vocab = tuple(self.condition_vocab) or tuple(int(cond[:, j].max()) + 1 if len(cond) else 1
                                                     for j in range(cond.shape[1]))
        if len(vocab) != cond.shape[1] or len(self.condition_names) not in (0, cond.shape[1]):
            raise DataError("condition vocabulary does not match condition columns")
        for j, v in enumerate(vocab):
            if len(cond) and (cond[:, j].min() < 0 or cond[:, j].max() >= v):
                raise DataError(f"condition column {j} has codes outside [0, {v})")
        object.__setattr__(self, "condition_vocab", vocab)
        names = tuple(self.condition_names) or tuple(f"cond{j}" for j in range(cond.shape[1]))
        object.__setattr__(self, "condition_names", names)
        ids = self.cell_ids or tuple(str(i) for i in range(len(labels)))
        object.__setattr__(self, "cell_ids", tuple(ids))

    @property
    def n_cells(self) -> int:
        return self.matrix.n_cells

    @property
    def n_genes(self) -> int:
        return self.matrix.n_genes

    def condition(self, i: int) -> ConditionInfo:
        return ConditionInfo(int(self.labels[i]), tuple(int(c) for c in self.conditions[i]))

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.matrix.take(idx), self.labels[idx], self.n_classes,
                              self.conditions[idx], self.condition_names, self.condition_vocab,
                              tuple(self.cell_ids[i] for i in idx))

    def with_matrix(self, matrix: ExpressionMatrix) -> "LabeledDataset":
        return LabeledDataset(matrix, self.labels, self.n_classes, self.conditions,
                              self.condition_names, self.condition_vocab, self.cell_ids)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

MM_HEADER = "%%MatrixMarket matrix coordinate real general"


def write_matrix_market(path, m: ExpressionMatrix) -> None:
    coo = m.values.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = [MM_HEADER, f"{m.n_cells} {m.n_genes} {coo.nnz}"]
    lines += [f"{r + 1} {c + 1} {float(v)!r}" for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order])]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_matrix_market(path) -> ExpressionMatrix:
    with open(path, encoding="utf-8") as fh:
        text = fh.read().split("\n")
    if not text or text[0].strip().lower() != MM_HEADER.lower():
        raise ParseError(path, 1, f"expected header {MM_HEADER!r}")
    size = None
    rows, cols, vals = [], [], []
    seen = set()
    for lineno, raw in enumerate(text[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        parts = line.split()
        if size is None:
            try:
                size = tuple(int(p) for p in parts)
            except ValueError:
                size = ()
            if len(size) != 3 or min(size) < 0:
                raise ParseError(path, lineno, "size line must hold 'rows cols entries'")
            continue
        if len(parts) != 3:
            raise ParseError(path, lineno, "entry must hold 'row col value'")
        try:
            r, c, v = int(parts[0]) - 1, int(parts[1]) - 1, float(parts[2])
        except ValueError:
            raise ParseError(path, lineno, f"malformed entry {line!r}") from None
        if not (0 <= r < size[0] and 0 <= c < size[1]):
            raise ParseError(path, lineno, f"index ({r + 1}, {c + 1}) out of range")
        if not np.isfinite(v) or v < 0:
            raise ParseError(path, lineno, f"value {v} is negative or non-finite")
        if (r, c) in seen:
            raise ParseError(path, lineno, f"duplicate entry ({r + 1}, {c + 1})")
        seen.add((r, c))
        rows.append(r)
        cols.append(c)
        vals.append(v)
    if size is None:
        raise ParseError(path, len(text), "missing size line")
    if len(vals) != size[2]:
        raise ParseError(path, len(text), f"declared {size[2]} entries, found {len(vals)}")
    return ExpressionMatrix.from_coo(size[0], size[1], rows, cols, vals)


def write_labels(path, ds: LabeledDataset) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell_id", "class_id", *ds.condition_names])
    for i in range(ds.n_cells):
        w.writerow([ds.cell_ids[i], int(ds.labels[i]), *(int(c) for c in ds.conditions[i])])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def load_dataset(matrix_path, labels_path, n_classes: int | None = None) -> LabeledDataset:
    matrix = read_matrix_market(matrix_path)
    with open(labels_path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["cell_id", "class_id"]:
        raise ParseError(labels_path, 1, "header must start with 'cell_id,class_id'")
    names = tuple(rows[0][2:])
    ids, labels, conds = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2 + len(names):
            raise ParseError(labels_path, lineno, f"expected {2 + len(names)} fields, got {len(row)}")
        try:
            cls = int(row[1])
            codes = [int(x) for x in row[2:]]
        except ValueError:
            raise ParseError(labels_path, lineno, "class id and condition codes must be integers") from None
        if cls < 0 or min(codes, default=0) < 0:
            raise ParseError(labels_path, lineno, "negative class id or condition code")
        ids.append(row[0])
        labels.append(cls)
        conds.append(codes)
    if len(labels) != matrix.n_cells:
        raise ParseError(labels_path, len(rows), f"{len(labels)} label rows for {matrix.n_cells} cells")
    C = n_classes if n_classes is not None else (max(labels) + 1 if labels else 1)
    cond = np.array(conds, dtype=np.int64).reshape(len(labels), len(names))
    return LabeledDataset(matrix, np.array(labels), C, cond, names, cell_ids=tuple(ids))


def save_dataset(directory, ds: LabeledDataset, stem: str = "data") -> tuple[str, str]:
    os.makedirs(directory, exist_ok=True)
    mpath = os.path.join(directory, f"{stem}.mtx")
    lpath = os.path.join(directory, f"{stem}_labels.csv")
    write_matrix_market(mpath, ds.matrix)
    write_labels(lpath, ds)
    return mpath, lpath


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def filter_cells_genes(ds: LabeledDataset, min_counts: float = 10, min_cells: int = 3) -> LabeledDataset:
    """Drop cells with fewer than ``min_counts`` total counts, then genes seen in fewer than ``min_cells`` cells."""
    keep_cells = np.flatnonzero(ds.matrix.row_totals() >= min_counts)
    ds = ds.subset(keep_cells)
    m = ds.matrix.values
    expressed = np.asarray((m > 0).sum(axis=0)).ravel()
    keep_genes = np.flatnonzero(expressed >= min_cells)
    return ds.with_matrix(ExpressionMatrix(m[:, keep_genes]))


def normalize_cells(m: ExpressionMatrix, target_sum: float = TARGET_SUM) -> ExpressionMatrix:
    """Scale each cell to ``target_sum`` total counts, then apply log1p."""
    totals = m.row_totals()
    bad = np.flatnonzero(totals <= 0)
    if len(bad):
        raise DataError(f"cell {int(bad[0])} has zero total count and cannot be normalized")
    v = m.values.copy()
    counts = np.diff(v.indptr)
    v.data = np.log1p(v.data * np.repeat(target_sum / totals, counts))
    return ExpressionMatrix(v)


def normalize_dataset(ds: LabeledDataset) -> LabeledDataset:
    return ds.with_matrix(normalize_cells(ds.matrix))


def class_partition(ds: LabeledDataset) -> dict[int, list[int]]:
    parts: dict[int, list[int]] = {}
    for i, y in enumerate(ds.labels):
        parts.setdefault(int(y), []).append(i)
    return dict(sorted(parts.items()))


def split_dataset(ds: LabeledDataset, train_fraction: float = 0.7, seed: int = 0):
    """Stratified split: each class sends floor(fraction * n_c) cells (at least one) to train."""
    if not 0 < train_fraction < 1:
        raise DataError("train_fraction must lie strictly between 0 and 1")
    rng = substream(seed, "split")
    train, test = [], []
    for cls, idx in class_partition(ds).items():
        if len(idx) < 2:
            raise DataError(f"class {cls} has {len(idx)} cell(s); at least 2 are needed to split")
        perm = rng.permutation(np.asarray(idx))
        k = min(max(int(np.floor(train_fraction * len(idx))), 1), len(idx) - 1)
        train.extend(perm[:k])
        test.extend(perm[k:])
    return ds.subset(np.sort(train)), ds.subset(np.sort(test))


# ---------------------------------------------------------------------------
# toy generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    n_classes: int = 10
    n_genes: int = 2000
    n_cells: int = 5000
    markers: int = 100
    imbalance: float = 70.0
    zero_fraction: float = 0.9
    library_size: float = 3000.0
    marker_fold: float = 4.0
    dispersion: float = 5.0
    n_stages: int = 3
    dropout: str = "logistic"
    dropout_shape: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DataError("n_classes must be at least 2")
        if self.n_genes < 10 * self.markers:
            raise DataError("n_genes must be at least 10x markers per class")
        if self.imbalance < 1:
            raise DataError("imbalance ratio must be >= 1")
        if not 0 < self.zero_fraction < 1:
            raise DataError("zero_fraction must lie in (0, 1)")
        if self.dropout not in ("logistic", "uniform") or self.dropout_shape <= 0:
            raise DataError("dropout must be 'logistic' or 'uniform' with a positive shape")
        if self.n_cells < 2 * self.n_classes or self.library_size <= 0 or self.markers < 1:
            raise DataError("n_cells, library_size and markers must be positive and large enough")
        if self.markers > (1 - self.zero_fraction) * self.n_genes:
            raise DataError(
                f"infeasible zero fraction {self.zero_fraction}: {self.markers} markers per class "
                f"exceed the {int((1 - self.zero_fraction) * self.n_genes)} nonzeros allowed per cell")


def class_sizes(n: int, C: int, ratio: float) -> np.ndarray:
    """Geometric class sizes from largest to smallest, largest/smallest = ratio, summing to n."""
    w = ratio ** (-np.arange(C) / (C - 1))
    raw = n * w / w.sum()
    sizes = np.floor(raw).astype(np.int64)
    rem = n - sizes.sum()
    sizes[np.argsort(-(raw - sizes), kind="stable")[:rem]] += 1
    return sizes


def _logistic_dropout(rates: np.ndarray, counts: np.ndarray, cfg: ToyConfig) -> np.ndarray:
    """Per-entry drop probability ``1 / (1 + exp(shape * (log rate - midpoint)))``.

    The midpoint is solved so that the expected zero fraction equals the target.
    """
    log_rate = np.log(np.maximum(rates, 1e-300))
    nonzero = counts > 0
    natural = 1.0 - nonzero.mean()

    def drop_prob(mid):
        return 0.5 * (1.0 - np.tanh(0.5 * cfg.dropout_shape * (log_rate - mid)))

    def excess(mid):
        return natural + drop_prob(mid)[nonzero].sum() / counts.size - cfg.zero_fraction

    lo, hi = log_rate.min() - 50.0, log_rate.max() + 50.0
    return drop_prob(brentq(excess, lo, hi, xtol=1e-10))


def make_toy_dataset(cfg: ToyConfig) -> LabeledDataset:
    """Poisson counts with class marker programs, gamma cell noise and dropout.

    Each class scales a random set of marker genes by ``marker_fold`` over a
    shared gamma-distributed background profile.  Every entry's rate carries
    gamma noise with shape ``dispersion`` (a negative-binomial count model),
    library sizes are log-normal around ``library_size``, and entries are then
    zeroed so the overall zero fraction lands on target.  Logistic dropout
    removes lowly expressed entries far more often than highly expressed
    ones; uniform dropout removes every entry with the same probability.
    """
    cfg.validate()
    C, d = cfg.n_classes, cfg.n_genes
    rng = substream(cfg.seed, "toy")
    sizes = class_sizes(cfg.n_cells, C, cfg.imbalance)
    labels = np.repeat(np.arange(C), sizes)
    stages = rng.integers(0, max(cfg.n_stages, 1), size=cfg.n_cells)

    background = rng.gamma(0.8, 1.0, size=d)
    profiles = np.tile(background, (C, 1))
    for c in range(C):
        genes = rng.choice(d, size=cfg.markers, replace=False)
        profiles[c, genes] *= cfg.marker_fold
    stage_genes = rng.choice(d, size=(max(cfg.n_stages, 1), cfg.markers // 2), replace=True)
    profiles /= profiles.sum(axis=1, keepdims=True)

    lib = cfg.library_size * rng.lognormal(0.0, 0.3, size=cfg.n_cells)
    rates = profiles[labels] * lib[:, None]
    if cfg.n_stages > 1:
        rates[np.arange(cfg.n_cells)[:, None], stage_genes[stages]] *= 2.0
    rates *= rng.gamma(cfg.dispersion, 1.0 / cfg.dispersion, size=rates.shape)
    counts = rng.poisson(rates).astype(np.float64)

    natural_zero = float(np.mean(counts == 0))
    if natural_zero > cfg.zero_fraction + 0.02:
        raise DataError(
            f"infeasible zero fraction {cfg.zero_fraction}: counts are already {natural_zero:.3f} zero")
    if cfg.dropout == "uniform":
        drop = max(0.0, (cfg.zero_fraction - natural_zero) / (1.0 - natural_zero))
        counts[rng.random(counts.shape) < drop] = 0.0
    elif natural_zero < cfg.zero_fraction:
        counts[rng.random(counts.shape) < _logistic_dropout(rates, counts, cfg)] = 0.0

    cond_cols = stages[:, None] if cfg.n_stages > 1 else np.zeros((cfg.n_cells, 0), dtype=np.int64)
    names = ("stage",) if cfg.n_stages > 1 else ()
    vocab = (cfg.n_stages,) if cfg.n_stages > 1 else ()
    return LabeledDataset(ExpressionMatrix(sp.csr_matrix(counts)), labels, C, cond_cols, names, vocab)
