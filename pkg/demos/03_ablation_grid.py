"""Sweep synthetic-set size and generator choice with identical seeds, and print the tables as CSV."""

from latentdistill.data import ToyConfig, filter_cells_genes, make_toy_dataset, normalize_dataset, split_dataset
from latentdistill.distill import DistillConfig
from latentdistill.evaluation import EvalConfig, ablation_grid
from latentdistill.foundation import AEConfig, train_autoencoder
from latentdistill.scdg import SCDGConfig, train_scdg

# the default toy: 10 cell types, 2000 genes, 5000 cells, 70:1 imbalance, 90% zeros (training takes a minute or two)
toy = ToyConfig()
train, test = split_dataset(normalize_dataset(filter_cells_genes(make_toy_dataset(toy))), 0.7, seed=0)
fm, _ = train_autoencoder(train, AEConfig())
gen, _ = train_scdg(fm, train, SCDGConfig())

# the smallest class has fewer than 20 training cells, so SPC=50 is reported as skipped
grid = {"spc": [1, 2, 5, 10, 20], "generator": ["scdg", "decoder"]}
res = ablation_grid(train, test, gen, grid, DistillConfig(), EvalConfig(n_trials=5))
print(res.aggregate_csv())

frozen = ablation_grid(train, test, gen, {"frozen": [True, False]}, DistillConfig(), EvalConfig(n_trials=5))
print(frozen.aggregate_csv())
for key, trace in frozen.traces.items():
    print("frozen=%s final matching loss %.2f" % (key[0], trace.total_loss[-1]))
