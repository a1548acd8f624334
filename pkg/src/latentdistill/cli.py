"""Config-driven command line: data, autoencoder, generator, distillation, evaluation, report.

Every stage reads its inputs from and writes its outputs under one output
directory::

    data/raw.mtx, data/raw_labels.csv          gen-data
    data/train.mtx, data/test.mtx (+ labels)   gen-data
    checkpoints/foundation.bin, ae_loss.csv    train-ae
    checkpoints/scdg.bin, scdg_loss.csv        train-scdg
    synthetic/synthetic.mtx (+ labels), trace.csv   distill
    metrics/*.csv, metrics/*.trials.csv        eval
    report/aggregate.csv                       report

A single master seed fans out to a derived seed per stage, so the whole chain
is reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .data import (
    LabeledDataset,
    ToyConfig,
    filter_cells_genes,
    load_dataset,
    make_toy_dataset,
    normalize_dataset,
    save_dataset,
    split_dataset,
)
from .distill import DistillConfig, distill_run, synthesize
from .evaluation import (
    ARCHITECTURES,
    GRID_AXES,
    EvalConfig,
    EvalModelSpec,
    _to_csv,
    ablation_grid,
    baseline_random_real,
    evaluate_synthetic,
)
from .foundation import AEConfig, Foundation, train_autoencoder
from .rng import child_seed
from .scdg import SCDG, SCDGConfig, train_scdg

log = logging.getLogger("latentdistill")

SUBCOMMANDS = ("gen-data", "train-ae", "train-scdg", "distill", "eval", "report")
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
BASELINES = ("random-real", "full-train")


class ValidationError(ValueError):
    """Bad configuration; reported with exit status 1."""


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing artifact {path} (run `{producer}` first)")
        self.path = path


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataSection:
    toy: ToyConfig = ToyConfig()
    matrix: str | None = None  # Matrix Market counts to use instead of the toy generator
    labels: str | None = None
    train_fraction: float = 0.7
    min_counts: float = 10.0
    min_cells: int = 3


@dataclass(frozen=True)
class EvalSection:
    cfg: EvalConfig = EvalConfig()
    architectures: tuple[str, ...] = ("linear-head-on-F",)
    baselines: tuple[str, ...] = ("random-real",)
    grid: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    data: DataSection = DataSection()
    autoencoder: AEConfig = AEConfig()
    scdg: SCDGConfig = SCDGConfig()
    distill: DistillConfig = DistillConfig()
    eval: EvalSection = EvalSection()


def _build(cls, section: str, values: dict, extra: tuple[str, ...] = ()):
    """Instantiate a config dataclass, naming the offending field on any mismatch."""
    names = {f.name for f in dataclasses.fields(cls)} - {"seed"}
    for key in values:
        if key == "seed":
            raise ValidationError(f"[{section}] seed: stage seeds derive from the top-level seed")
        if key not in names and key not in extra:
            raise ValidationError(f"[{section}] unknown field '{key}'")
    kwargs = {k: v for k, v in values.items() if k in names}
    for f in dataclasses.fields(cls):
        if f.name in kwargs and not _type_ok(kwargs[f.name], f.default):
            raise ValidationError(f"[{section}] {f.name}: expected {type(f.default).__name__}, "
                                  f"got {kwargs[f.name]!r}")
    return cls(**kwargs)


def _type_ok(value, default) -> bool:
    if default is None:
        return isinstance(value, (int, float, str)) and not isinstance(value, bool)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default)) and not (isinstance(value, bool) and not isinstance(default, bool))


def parse_config(doc: dict) -> RunConfig:
    known = {"seed", "out", "data", "autoencoder", "scdg", "distill", "eval"}
    for key in doc:
        if key not in known:
            raise ValidationError(f"unknown top-level field '{key}'")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ValidationError("seed: must be an unsigned 64-bit integer")
    out = doc.get("out", "run")
    if not isinstance(out, str):
        raise ValidationError("out: must be a path string")

    data_doc = dict(doc.get("data", {}))
    data_extra = ("matrix", "labels", "train_fraction", "min_counts", "min_cells")
    toy = _build(ToyConfig, "data", data_doc, data_extra)
    data = DataSection(toy, **{k: data_doc[k] for k in data_extra if k in data_doc})
    if not 0 < data.train_fraction < 1:
        raise ValidationError("[data] train_fraction: must lie in (0, 1)")
    if (data.matrix is None) != (data.labels is None):
        raise ValidationError("[data] matrix: 'matrix' and 'labels' must be given together")

    eval_doc = dict(doc.get("eval", {}))
    eval_extra = ("architectures", "baselines", "grid")
    ecfg = _build(EvalConfig, "eval", eval_doc, eval_extra)
    archs = tuple(eval_doc.get("architectures", EvalSection.architectures))
    for a in archs:
        if a not in ARCHITECTURES:
            raise ValidationError(f"[eval] architectures: unknown architecture '{a}'")
    baselines = tuple(eval_doc.get("baselines", EvalSection.baselines))
    for b in baselines:
        if b not in BASELINES:
            raise ValidationError(f"[eval] baselines: unknown baseline '{b}'")
    grid = dict(eval_doc.get("grid", {}))
    for axis, values in grid.items():
        if axis not in GRID_AXES:
            raise ValidationError(f"[eval.grid] unknown axis '{axis}'")
        if not isinstance(values, list) or not values:
            raise ValidationError(f"[eval.grid] {axis}: must be a non-empty list")

    return RunConfig(seed=seed, out=out, data=data,
                     autoencoder=_build(AEConfig, "autoencoder", doc.get("autoencoder", {})),
                     scdg=_build(SCDGConfig, "scdg", doc.get("scdg", {})),
                     distill=_build(DistillConfig, "distill", doc.get("distill", {})),
                     eval=EvalSection(ecfg, archs, baselines, grid))


def seeded(cfg: RunConfig) -> RunConfig:
    """Fan the master seed out to every stage and validate each section."""
    s = cfg.seed
    out = replace(
        cfg,
        data=replace(cfg.data, toy=replace(cfg.data.toy, seed=child_seed(s, "data"))),
        autoencoder=replace(cfg.autoencoder, seed=child_seed(s, "autoencoder")),
        scdg=replace(cfg.scdg, seed=child_seed(s, "scdg")),
        distill=replace(cfg.distill, seed=child_seed(s, "distill")),
        eval=replace(cfg.eval, cfg=replace(cfg.eval.cfg, seed=child_seed(s, "eval"))),
    )
    checks = [("data", out.data.toy), ("autoencoder", out.autoencoder), ("scdg", out.scdg),
              ("distill", out.distill), ("eval", out.eval.cfg)]
    for section, c in checks:
        try:
            c.validate()
        except ValueError as exc:
            raise ValidationError(f"[{section}] {exc}") from None
    return out


def load_config(path: str | None, seed: int | None = None, out: str | None = None,
                threads: int | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ValidationError(f"config file {path} does not exist") from None
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    cfg = parse_config(doc)
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ValidationError("--seed: must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, out=out)
    if threads is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, cfg=replace(cfg.eval.cfg, threads=threads)))
    return seeded(cfg)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


class Layout:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.data = self.root / "data"
        self.checkpoints = self.root / "checkpoints"
        self.synthetic = self.root / "synthetic"
        self.metrics = self.root / "metrics"
        self.report = self.root / "report"

    def dataset(self, stem: str, producer: str = "gen-data") -> LabeledDataset:
        m, lab = self.data / f"{stem}.mtx", self.data / f"{stem}_labels.csv"
        return load_dataset(need(m, producer), need(lab, producer))

    def foundation(self) -> Foundation:
        return Foundation.load(need(self.checkpoints / "foundation.bin", "train-ae"))

    def generator(self, fm: Foundation) -> SCDG:
        return SCDG.load(need(self.checkpoints / "scdg.bin", "train-scdg"), fm)


def need(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise MissingArtifact(path, producer)
    return path


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _history_csv(name: str, hist: list[float]) -> str:
    return "epoch," + name + "\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(hist))


def gen_data(cfg: RunConfig, lay: Layout) -> None:
    d = cfg.data
    if d.matrix is not None:
        raw = load_dataset(d.matrix, d.labels)
    else:
        raw = make_toy_dataset(d.toy)
    save_dataset(lay.data, raw, "raw")
    ds = normalize_dataset(filter_cells_genes(raw, d.min_counts, d.min_cells))
    train, test = split_dataset(ds, d.train_fraction, seed=child_seed(cfg.seed, "split"))
    save_dataset(lay.data, train, "train")
    save_dataset(lay.data, test, "test")
    log.info("wrote %d train and %d test cells (%d genes)", train.n_cells, test.n_cells, train.n_genes)


def train_ae(cfg: RunConfig, lay: Layout) -> None:
    train = lay.dataset("train")
    fm, hist = train_autoencoder(train, cfg.autoencoder)
    lay.checkpoints.mkdir(parents=True, exist_ok=True)
    fm.save(lay.checkpoints / "foundation.bin")
    _write(lay.checkpoints / "ae_loss.csv", _history_csv("loss", hist))


def train_gen(cfg: RunConfig, lay: Layout) -> None:
    train = lay.dataset("train")
    gen, hist = train_scdg(lay.foundation(), train, cfg.scdg)
    gen.save(lay.checkpoints / "scdg.bin")
    _write(lay.checkpoints / "scdg_loss.csv", _history_csv("loss", hist))


def distill(cfg: RunConfig, lay: Layout) -> None:
    gen = lay.generator(lay.foundation())
    train = lay.dataset("train")
    codes, trace, used = distill_run(train, gen, cfg.distill)
    save_dataset(lay.synthetic, synthesize(used, codes, cfg.distill), "synthetic")
    _write(lay.synthetic / "trace.csv", trace.to_csv())


def evaluate(cfg: RunConfig, lay: Layout) -> None:
    fm = lay.foundation()
    train, test = lay.dataset("train"), lay.dataset("test")
    S = load_dataset(need(lay.synthetic / "synthetic.mtx", "distill"),
                     need(lay.synthetic / "synthetic_labels.csv", "distill"), train.n_classes)
    e = cfg.eval
    sets = [("distilled", S)]
    if "random-real" in e.baselines:
        sets.append(("random-real", baseline_random_real(train, cfg.distill.spc, cfg.distill.seed)))
    if "full-train" in e.baselines:
        sets.append(("full-train", train))
    trials, agg = [], []
    for arch in e.architectures:
        spec = EvalModelSpec(arch=arch)
        for method, data in sets:
            rep = evaluate_synthetic(data, test, spec, e.cfg, fm)
            cell = {"method": method, "arch": arch}
            trials += [{**cell, "trial": i, "accuracy": a} for i, a in enumerate(rep.accuracies)]
            agg.append({**cell, "mean": rep.mean, "std": rep.std, "status": "ok"})
    _write(lay.metrics / "eval.csv", _to_csv(["method", "arch", "mean", "std", "status"], agg))
    _write(lay.metrics / "eval.trials.csv", _to_csv(["method", "arch", "trial", "accuracy"], trials))
    if e.grid:
        res = ablation_grid(train, test, lay.generator(fm), e.grid, cfg.distill, e.cfg)
        _write(lay.metrics / "grid.csv", res.aggregate_csv())
        _write(lay.metrics / "grid.trials.csv", res.trials_csv())


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

STAT_COLUMNS = ("mean", "std", "status")


class ReportError(ValueError):
    pass


def _sort_key(value: str):
    try:
        return (0, float(value), "")
    except ValueError:
        return (1, 0.0, value)


def report(metrics_dir: str | os.PathLike) -> str:
    """Merge aggregate metrics CSVs (``axis..., mean, std[, status]``) into one table sorted by axes.

    Per-trial files (``*.trials.csv``) are skipped.  Axis columns are the
    union over all files in first-seen order; cells a file lacks stay empty.
    """
    paths = sorted(p for p in Path(metrics_dir).glob("*.csv") if not p.name.endswith(".trials.csv"))
    if not paths:
        raise ReportError(f"no metrics CSV files in {metrics_dir}")
    axes: list[str] = []
    rows: list[dict] = []
    for p in paths:
        with open(p, encoding="utf-8", newline="") as fh:
            table = list(csv.reader(fh))
        if not table:
            raise ReportError(f"{p}: empty file")
        header = table[0]
        stats = [h for h in header if h in STAT_COLUMNS]
        n_axes = len(header) - len(stats)
        if (header[n_axes:] not in (["mean", "std"], ["mean", "std", "status"]) or n_axes == 0
                or len(set(header)) != len(header) or any(not h for h in header)):
            raise ReportError(f"{p}: header must be 'axis...,mean,std[,status]', got {','.join(header)}")
        for h in header[:n_axes]:
            if h not in axes:
                axes.append(h)
        for lineno, r in enumerate(table[1:], start=2):
            if len(r) != len(header):
                raise ReportError(f"{p}:{lineno}: expected {len(header)} fields, got {len(r)}")
            row = dict(zip(header, r))
            for k in ("mean", "std"):
                try:
                    float(row[k])
                except ValueError:
                    raise ReportError(f"{p}:{lineno}: {k} is not a number: {row[k]!r}") from None
            row.setdefault("status", "ok")
            rows.append(row)
    rows.sort(key=lambda r: tuple(_sort_key(r.get(a, "")) for a in axes))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*axes, *STAT_COLUMNS])
    for r in rows:
        w.writerow([r.get(h, "") for h in (*axes, *STAT_COLUMNS)])
    return buf.getvalue()


def write_report(cfg: RunConfig, lay: Layout) -> None:
    if not lay.metrics.is_dir():
        raise MissingArtifact(lay.metrics, "eval")
    _write(lay.report / "aggregate.csv", report(lay.metrics))


STAGES = {"gen-data": gen_data, "train-ae": train_ae, "train-scdg": train_gen, "distill": distill,
          "eval": evaluate, "report": write_report}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentdistill", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out", help="output directory (overrides the config's 'out')")
    p.add_argument("--threads", type=int, help="parallel evaluation trials (default 1)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(subcommand: str, config_path: str | None = None, *, out: str | None = None, seed: int | None = None,
        threads: int | None = None) -> int:
    try:
        if subcommand not in STAGES:
            raise ValidationError(f"unknown subcommand '{subcommand}'")
        if threads is not None and threads < 1:
            raise ValidationError("--threads: must be at least 1")
        cfg = load_config(config_path, seed, out, threads)
    except ValidationError as exc:
        print(f"latentdistill: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        STAGES[subcommand](cfg, Layout(cfg.out))
    except Exception as exc:  # every runtime failure maps to one exit status
        log.debug("stage failed", exc_info=True)
        print(f"latentdistill {subcommand}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    return run(args.subcommand, args.config, out=args.out, seed=args.seed, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
