import filecmp
from pathlib import Path

import numpy as np
import pytest

from latentdistill import cli
from latentdistill.data import read_matrix_market

SMALL = """
seed = 7
[data]
n_classes = 4
n_genes = 200
n_cells = 600
markers = 15
imbalance = 4.0
library_size = 800.0
marker_fold = 6.0
[autoencoder]
epochs = 3
hidden = 64
[scdg]
epochs = 5
[distill]
steps = 3
[eval]
n_trials = 2
epochs = 30
baselines = ["random-real", "full-train"]
[eval.grid]
spc = [1, 2]
"""

CHAIN = ("gen-data", "train-ae", "train-scdg", "distill", "eval", "report")


def write_config(tmp_path, text=SMALL, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run_chain(config, out):
    return [cli.main([c, "--config", config, "--out", str(out)]) for c in CHAIN]


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    config = write_config(base)
    codes = run_chain(config, base / "a")
    return base, config, codes


def test_full_chain_succeeds_and_writes_every_artifact(chain):
    base, _, codes = chain
    assert codes == [0] * len(CHAIN)
    files = set(tree(base / "a"))
    for name in ["data/raw.mtx", "data/train_labels.csv", "checkpoints/foundation.bin", "checkpoints/scdg.bin",
                 "synthetic/synthetic.mtx", "synthetic/trace.csv", "metrics/eval.csv", "metrics/grid.csv",
                 "report/aggregate.csv"]:
        assert name in files


def test_chain_is_byte_reproducible(chain):
    base, config, _ = chain
    assert run_chain(config, base / "b") == [0] * len(CHAIN)
    assert tree(base / "a") == tree(base / "b")


def test_eval_twice_gives_identical_csv(chain):
    base, config, _ = chain
    first = (base / "a" / "metrics" / "eval.csv").read_bytes()
    assert cli.main(["eval", "--config", config, "--out", str(base / "a")]) == 0
    assert (base / "a" / "metrics" / "eval.csv").read_bytes() == first


def test_seed_flag_changes_artifacts(chain, tmp_path):
    base, config, _ = chain
    assert cli.main(["gen-data", "--config", config, "--out", str(tmp_path), "--seed", "8"]) == 0
    assert not filecmp.cmp(tmp_path / "data" / "raw.mtx", base / "a" / "data" / "raw.mtx", shallow=False)


def test_report_sorts_and_merges(chain):
    base, _, _ = chain
    lines = (base / "a" / "report" / "aggregate.csv").read_text().splitlines()
    assert lines[0] == "method,arch,spc,mean,std,status"
    assert len(lines) == 1 + 3 + 2  # three eval methods, two grid cells
    body = [ln.split(",") for ln in lines[1:]]
    keys = [(r[0], r[2]) for r in body]
    assert keys == sorted(keys)


def test_default_toy_matrix_is_mostly_zeros(tmp_path):
    config = write_config(tmp_path, "seed = 1\n")
    assert cli.main(["gen-data", "--config", config, "--out", str(tmp_path / "run")]) == 0
    m = read_matrix_market(tmp_path / "run" / "data" / "raw.mtx")
    assert (m.n_cells, m.n_genes) == (5000, 2000)
    assert abs(1 - m.nnz / (m.n_cells * m.n_genes) - 0.9) < 0.01


def test_distill_without_generator_names_checkpoint(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["gen-data", "--config", config, "--out", str(out)]) == 0
    assert cli.main(["train-ae", "--config", config, "--out", str(out)]) == 0
    assert cli.main(["distill", "--config", config, "--out", str(out)]) == 2
    assert str(out / "checkpoints" / "scdg.bin") in capsys.readouterr().err


def test_train_ae_without_data_names_path(tmp_path, capsys):
    assert cli.main(["train-ae", "--out", str(tmp_path)]) == 2
    assert str(tmp_path / "data" / "train.mtx") in capsys.readouterr().err


@pytest.mark.parametrize("text, field", [
    ("[data]\nn_classes = 1\n", "n_classes"),
    ("[distill]\nmode = 'XY'\n", "mode"),
    ("[distill]\nspc = 'one'\n", "spc"),
    ("[scdg]\nT = 0\n", "scdg"),
    ("[autoencoder]\ncolour = 3\n", "colour"),
    ("[distill]\nseed = 3\n", "seed"),
    ("[eval]\narchitectures = ['svm']\n", "architectures"),
    ("[eval.grid]\nwidth = [1]\n", "width"),
    ("bogus = 1\n", "bogus"),
    ("seed = -1\n", "seed"),
    ("[data]\ntrain_fraction = 1.5\n", "train_fraction"),
])
def test_validation_errors_exit_one_and_name_field(tmp_path, capsys, text, field):
    config = write_config(tmp_path, text)
    assert cli.main(["gen-data", "--config", config, "--out", str(tmp_path / "run")]) == 1
    assert field in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_bad_invocations_exit_one(tmp_path):
    assert cli.main(["train-everything"]) == 1
    assert cli.main(["gen-data", "--config", str(tmp_path / "absent.toml")]) == 1
    bad = write_config(tmp_path, "seed = [")
    assert cli.main(["gen-data", "--config", bad]) == 1
    assert cli.main(["eval", "--threads", "0", "--out", str(tmp_path)]) == 1


def test_report_single_file_is_input_sorted(tmp_path):
    (tmp_path / "a.csv").write_text("spc,mean,std,status\n10,0.9,0.01,ok\n2,0.8,0.02,ok\n1,0.5,0.1,ok\n")
    out = cli.report(tmp_path).splitlines()
    assert out == ["spc,mean,std,status", "1,0.5,0.1,ok", "2,0.8,0.02,ok", "10,0.9,0.01,ok"]


def test_report_disjoint_axes_add_rows(tmp_path):
    (tmp_path / "a.csv").write_text("spc,mean,std\n1,0.5,0.1\n2,0.6,0.1\n")
    (tmp_path / "b.csv").write_text("generator,mean,std,status\nscdg,0.7,0.0,ok\n")
    (tmp_path / "b.trials.csv").write_text("generator,trial,accuracy\nscdg,0,0.7\n")
    out = cli.report(tmp_path).splitlines()
    assert out[0] == "spc,generator,mean,std,status"
    assert len(out) - 1 == 3


@pytest.mark.parametrize("content", ["spc,accuracy\n1,0.5\n", "mean,std\n0.5,0.1\n", "", "spc,mean,std\n1,x,0.1\n",
                                     "spc,mean,std\n1,0.5\n"])
def test_report_bad_file_is_named(tmp_path, content):
    (tmp_path / "good.csv").write_text("spc,mean,std\n1,0.5,0.1\n")
    (tmp_path / "broken.csv").write_text(content)
    with pytest.raises(cli.ReportError, match="broken.csv"):
        cli.report(tmp_path)


def test_report_needs_files(tmp_path):
    with pytest.raises(cli.ReportError):
        cli.report(tmp_path)
    assert cli.main(["report", "--out", str(tmp_path)]) == 2


def test_stage_seeds_fan_out_from_master():
    a, b = cli.load_config(None, seed=1), cli.load_config(None, seed=2)
    seeds = {a.data.toy.seed, a.autoencoder.seed, a.scdg.seed, a.distill.seed, a.eval.cfg.seed}
    assert len(seeds) == 5
    assert a.distill.seed != b.distill.seed
    assert cli.load_config(None, seed=1) == a
    assert np.isfinite(a.distill.lr_latent)
