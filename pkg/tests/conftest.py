from types import SimpleNamespace

import pytest

from latentdistill.data import (
    ToyConfig,
    filter_cells_genes,
    make_toy_dataset,
    normalize_dataset,
    split_dataset,
)
from latentdistill.foundation import AEConfig, encode_array, train_autoencoder
from latentdistill.scdg import SCDGConfig, train_scdg

SMALL_TOY = ToyConfig(n_classes=4, n_genes=200, n_cells=600, markers=15, imbalance=4.0,
                      library_size=800.0, marker_fold=6.0, seed=3)


def build_pipeline(toy: ToyConfig, ae: AEConfig, scdg: SCDGConfig) -> SimpleNamespace:
    ds = normalize_dataset(filter_cells_genes(make_toy_dataset(toy)))
    train, test = split_dataset(ds, 0.7, seed=0)
    fm, ae_hist = train_autoencoder(train, ae)
    gen, scdg_hist = train_scdg(fm, train, scdg)
    return SimpleNamespace(train=train, test=test, fm=fm, gen=gen, ae_hist=ae_hist, scdg_hist=scdg_hist,
                           test_features=encode_array(fm, test.matrix))


@pytest.fixture(scope="session")
def small():
    """A trained miniature pipeline shared by the unit tests."""
    return build_pipeline(SMALL_TOY, AEConfig(epochs=15, batch_size=64, hidden=128, seed=1),
                          SCDGConfig(epochs=60, batch_size=64, seed=2))


@pytest.fixture(scope="session")
def toy():
    """The default toy dataset (10 classes, 2000 genes, 5000 cells) with trained autoencoder and generator."""
    return build_pipeline(ToyConfig(), AEConfig(), SCDGConfig())


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def check(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
