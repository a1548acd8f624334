"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line; the lines are repeated in
the pytest terminal summary under "acceptance criteria".  Trend criteria run
on the default toy dataset (10 classes, 2000 genes, 5000 cells, 70:1 class
imbalance, 90% zeros) with the trained models of the ``toy`` fixture.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from latentdistill import nn
from latentdistill import tensor as T
from latentdistill.distill import (
    DistillConfig,
    TaskHead,
    dc_loss,
    distill_run,
    dm_loss,
    dm_loss_from_means,
    head_cross_entropy_grad,
    synthesize,
)
from latentdistill.evaluation import (
    EvalConfig,
    EvalModelSpec,
    baseline_data_level,
    baseline_random_real,
    evaluate_synthetic,
)
from latentdistill.foundation import Foundation, encode
from latentdistill.rng import substream
from latentdistill.scdg import SCDG, eps_to_z0, forward_diffuse, generate, make_schedule
from latentdistill.tensor import Tensor

SEEDS = range(5)
SLACK = 0.01


@pytest.fixture(scope="module")
def bench(toy):
    """Distillation and evaluation with results cached per (config, eval) pair."""
    test_feats = toy.test_features
    cache = {}

    def distilled(**kw):
        key = tuple(sorted(kw.items()))
        if key not in cache:
            cfg = DistillConfig(**kw)
            codes, trace, gen = distill_run(toy.train, toy.gen, cfg)
            cache[key] = (synthesize(gen, codes, cfg), trace)
        return cache[key]

    def accuracy(S, arch="linear-head-on-F", n_trials=10):
        inputs = test_feats if arch == "linear-head-on-F" else None
        return evaluate_synthetic(S, toy.test, EvalModelSpec(arch=arch), EvalConfig(n_trials=n_trials),
                                  toy.fm, inputs).mean

    return toy, distilled, accuracy


def test_criterion_01_schedule_exactness(verdict):
    s = make_schedule(1000, 1e-4, 0.1)
    exact = Fraction(1)
    for t in range(1, 1001):
        exact *= 1 - Fraction(float(s.beta[t]))
    rel = abs(s.alpha_bar[1000] - float(exact)) / float(exact)
    ok = s.beta[1] == 1e-4 and s.beta[1000] == 0.1 and s.alpha_bar[1000] < 1e-20 and rel < 1e-12
    verdict(1, ok, f"beta_1={float(s.beta[1])!r} beta_T={float(s.beta[1000])!r} abar_T={s.alpha_bar[1000]:.3e} "
                   f"(exact product rel err {rel:.1e})")


def test_criterion_02_forward_diffusion_statistics(verdict):
    s = make_schedule(1000, 1e-4, 0.1)
    n = 10_000
    Z0 = substream(0, "acc-z0").normal(2.0, 3.0, size=(n, 1))
    Zt, _ = forward_diffuse(Z0, 1000, s, substream(0, "acc-noise"))
    m, v = Zt.mean(), Zt.var()
    ok = abs(m) < 3 * np.sqrt(1 / n) and abs(v - 1) < 3 * np.sqrt(2 / n)
    verdict(2, ok, f"Z_T mean {m:+.4f} (3SE {3 * np.sqrt(1 / n):.4f}), var {v:.4f} (3SE {3 * np.sqrt(2 / n):.4f})")


def test_criterion_03_parameterization_roundtrip(verdict):
    s = make_schedule(1000, 1e-4, 0.1)
    rng = substream(0, "acc-roundtrip")
    worst = 0.0
    for _ in range(1000):
        t = int(rng.integers(1, 301))  # beyond this abar_t is small enough that 1/sqrt(abar) amplifies roundoff
        Z0 = rng.normal(size=(1, 16))
        Zt, eps = forward_diffuse(Z0, t, s, rng)
        worst = max(worst, float(np.max(np.abs(eps_to_z0(Zt, eps, t, s) - Z0))))
    verdict(3, worst < 1e-12, f"max roundtrip error over 1000 (Z0, t) pairs = {worst:.2e}")


def test_criterion_04_loss_identities(verdict):
    g = Tensor(np.array([0.5, -1.0, 2.0, 0.25]))
    par = dc_loss(g, Tensor(3.0 * g.data)).item()
    orth = dc_loss(Tensor(np.array([1.0, 2.0, 0.0, 0.0])), Tensor(np.array([-2.0, 1.0, 0.0, 5.0]))).item()
    anti = dc_loss(g, Tensor(-g.data)).item()
    rng = substream(0, "acc-dc")
    worst_scale = 0.0
    for _ in range(200):
        a, b = rng.normal(size=(2, 20))
        ka, kb = np.exp(rng.uniform(-5, 5, size=2))
        worst_scale = max(worst_scale, abs(dc_loss(Tensor(a), Tensor(b)).item()
                                            - dc_loss(Tensor(ka * a), Tensor(kb * b)).item()))
    O = {0: rng.normal(size=(3, 5)), 1: rng.normal(size=(2, 5))}
    dm = dm_loss(lambda x: x, O, Tensor(np.vstack([O[0], O[1]])), [0, 0, 0, 1, 1]).item()
    errs = [abs(par), abs(orth - 1), abs(anti - 2), worst_scale, abs(dm)]
    verdict(4, max(errs) < 1e-12, f"dc parallel/orthogonal/antiparallel = {par:.1e}/{orth:.15f}/{anti:.15f}; "
                                  f"dm identical sets = {dm:.1e}; scale invariance err {worst_scale:.1e}")


def test_criterion_05_gradient_oracles(verdict, small):
    start = time.perf_counter()
    rng = substream(0, "acc-head")
    head = TaskHead(5, 7, layers=2, hidden=6, rng=rng)
    feats, labels = rng.normal(size=(11, 7)), rng.integers(0, 5, size=11)
    head_err = 0.0
    for name, g in zip(head.param_names(), head_cross_entropy_grad(head, Tensor(feats), labels)):
        original = head.params[name].data.copy()

        def ce(w):
            head.params.assign(name, w.data)
            return nn.cross_entropy(head(Tensor(feats)), labels)

        fd = T.finite_diff_grad(ce, original, 1e-6)
        head.params.assign(name, original)
        head_err = max(head_err, np.max(np.abs(g.data - fd)) / np.max(np.abs(fd)))

    fm = Foundation(8, hidden=6, rng=substream(0, "acc-micro-fm"))
    fm.freeze()
    gen = SCDG(fm, 2, (), make_schedule(10, 1e-4, 0.1), substream(0, "acc-micro-gen"))
    gen.freeze()
    means = {0: rng.normal(size=128), 1: rng.normal(size=128)}
    classes = np.array([0, 1, 1])

    def loss(z):
        return dm_loss_from_means(means, encode(fm, generate(gen, z, classes, None, 5)), classes)

    z0 = rng.normal(size=(3, 128))
    leaf = Tensor(z0, requires_grad=True)
    ad = T.backward(loss(leaf), [leaf])[0]
    fd = T.finite_diff_grad(loss, z0, 1e-6)
    chain_err = np.max(np.abs(ad - fd)) / np.max(np.abs(fd))

    cfg = DistillConfig(steps=2, epochs=2, spc=2, mode="DC+DM", seed=1)
    a, _, _ = distill_run(small.train, small.gen, cfg)
    b, _, _ = distill_run(small.train, small.gen, DistillConfig(**{**cfg.__dict__, "checkpoint": False}))
    bitwise = a.Z.tobytes() == b.Z.tobytes()
    elapsed = time.perf_counter() - start
    ok = head_err < 1e-5 and chain_err < 1e-4 and bitwise and elapsed < 10
    verdict(5, ok, f"head CE grad rel err {head_err:.1e}, DM chain rel err {chain_err:.1e}, "
                   f"checkpointed == plain: {bitwise}, {elapsed:.1f}s")


def test_criterion_06_distillation_beats_random_real(verdict, bench):
    toy, distilled, accuracy = bench
    start = time.perf_counter()
    distilled = [accuracy(distilled(seed=s)[0]) for s in SEEDS]
    rr = [accuracy(baseline_random_real(toy.train, 1, s)) for s in SEEDS]
    gap = np.mean(distilled) - np.mean(rr)
    verdict(6, gap >= 0.05, f"SPC=1 distilled {np.mean(distilled):.3f} vs random-real {np.mean(rr):.3f} "
                            f"(gap {100 * gap:+.1f} points, need >= +5; {time.perf_counter() - start:.0f}s)")


def test_criterion_07_spc_monotonicity(verdict, bench):
    _, distilled, accuracy = bench
    means = {spc: np.mean([accuracy(distilled(spc=spc, seed=s)[0]) for s in SEEDS]) for spc in (1, 2, 5, 10)}
    vals = list(means.values())
    ok = all(b >= a - SLACK for a, b in zip(vals, vals[1:]))
    verdict(7, ok, "mean accuracy by SPC " + ", ".join(f"{k}: {v:.3f}" for k, v in means.items()))


def test_criterion_08_frozen_foundation_ablation(verdict, bench):
    _, distilled, accuracy = bench
    frozen = [distilled(seed=s) for s in SEEDS]
    unfrozen = [distilled(seed=s, freeze_foundation=False) for s in SEEDS]
    lf = np.mean([tr.total_loss[-1] for _, tr in frozen])
    lu = np.mean([tr.total_loss[-1] for _, tr in unfrozen])
    af = np.mean([accuracy(S) for S, _ in frozen])
    au = np.mean([accuracy(S) for S, _ in unfrozen])
    verdict(8, lf < lu and af > au, f"final matching loss frozen {lf:.2f} < unfrozen {lu:.2f}; "
                                    f"accuracy frozen {af:.3f} > unfrozen {au:.3f}")


def test_criterion_09_generator_ablation(verdict, bench):
    _, distilled, accuracy = bench
    scdg = np.mean([accuracy(distilled(seed=s)[0]) for s in SEEDS])
    dec = np.mean([accuracy(distilled(seed=s, generator="decoder")[0]) for s in SEEDS])
    verdict(9, scdg >= dec - 0.005, f"SPC=1 SCDG {scdg:.3f} vs decoder-only {dec:.3f} (0.5-point slack)")


@pytest.mark.parametrize("arch", ["logistic-on-raw", "mlp-on-raw", "attention-pooled"])
def test_criterion_10_cross_architecture(verdict, bench, arch):
    toy, distilled, accuracy = bench
    distilled = np.mean([accuracy(distilled(seed=s)[0], arch, n_trials=3) for s in SEEDS])
    rr = np.mean([accuracy(baseline_random_real(toy.train, 1, s), arch, n_trials=3) for s in SEEDS])
    verdict(10, distilled >= rr, f"{arch}: distilled {distilled:.3f} >= random-real {rr:.3f}")


def test_criterion_11_data_characteristics(verdict, bench):
    toy, distilled, _ = bench
    res = baseline_data_level(toy.train, toy.fm, DistillConfig(steps=50, mode="DM", seed=0))
    neg = max(res.negative_fraction)
    distilled_min = min(float(distilled(seed=s)[0].matrix.dense().min()) for s in SEEDS)
    verdict(11, neg > 0 and distilled_min >= 0, f"data-level pre-clamp negativity up to {100 * neg:.2f}% of entries; "
                                           f"distilled minimum expression {distilled_min:.3g}")
