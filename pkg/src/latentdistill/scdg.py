"""Single-step conditional diffusion generator in the autoencoder's latent space.

The denoiser is trained to predict the clean latent ``Z0`` from a noisy
``Z_t`` drawn in closed form at an independently sampled step ``t``.
Generation is one denoiser call followed by the decoder; no reverse chain is
ever unrolled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .data import LabeledDataset
from .foundation import Foundation, TrainingError, decode, encode_array
from .rng import substream
from .tensor import Tensor
from .tensorfile import load_tensors, save_tensors

log = logging.getLogger(__name__)

TIME_DIM = 32
COND_DIM = 32
DENOISER_HIDDEN = (256, 256)
SCHEDULE_KEY = "__schedule__"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule.  Arrays are indexed by t directly; slot 0 is the clean state."""

    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ConfigError(f"diffusion step must lie in [1, {self.T}]")
        return t


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.1) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ConfigError("T must be a positive integer")
    if not 0 < beta_min < beta_max < 1:
        raise ConfigError("need 0 < beta_min < beta_max < 1")
    T = int(T)
    t = np.arange(1, T + 1)
    if T == 1:
        betas = np.array([beta_min])
    else:
        betas = beta_min + (t - 1) / (T - 1) * (beta_max - beta_min)
        betas[-1] = beta_max
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, float(beta_min), float(beta_max), beta, alpha, alpha_bar)


def forward_diffuse(Z0, t, schedule: NoiseSchedule, rng: np.random.Generator):
    """Sample ``Z_t = sqrt(abar_t) Z0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one step per row."""
    Z0 = np.asarray(Z0.data if isinstance(Z0, Tensor) else Z0, dtype=np.float64)
    t = schedule.check_t(t)
    ab = schedule.alpha_bar[t]
    if ab.ndim == 1:
        ab = ab[:, None]
    eps = rng.standard_normal(Z0.shape)
    Zt = np.sqrt(ab) * Z0 + np.sqrt(1.0 - ab) * eps
    return Zt, eps


def eps_to_z0(Zt, eps, t, schedule: NoiseSchedule) -> np.ndarray:
    """Clean latent implied by a noise estimate, using the cumulative decay factor."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bar[t]
    if ab.ndim == 1:
        ab = ab[:, None]
    return (np.asarray(Zt) + np.asarray(eps) * -np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))


def eps_to_z0_tensor(Zt: Tensor, eps: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    """Differentiable version of :func:`eps_to_z0` for a scalar step."""
    t = int(schedule.check_t(t))
    ab = schedule.alpha_bar[t]
    return T.scale(T.add(Zt, T.scale(eps, -np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))


_TIME_FREQS = 1000.0 ** (np.arange(TIME_DIM // 2) / (TIME_DIM // 2 - 1))


def time_embedding(t, T_max: int) -> np.ndarray:
    """Sinusoidal features of t / T, frequencies spaced geometrically from 1 to 1000 rad."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T_max
    ang = s[:, None] * _TIME_FREQS[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class ConditionEmbedder:
    """Learned 32-dim embedding: class table plus one table per extra condition column, summed."""

    def __init__(self, params: nn.ParamSet, n_classes: int, vocab: tuple[int, ...] = (),
                 rng: np.random.Generator | None = None, dim: int = COND_DIM):
        self.params, self.n_classes, self.vocab, self.dim = params, n_classes, tuple(vocab), dim
        sizes = [("embed.class", n_classes)] + [(f"embed.cond{j}", v) for j, v in enumerate(self.vocab)]
        for name, n in sizes:
            if name not in params:
                init = rng.normal(0.0, 1.0, size=(n, dim)) if rng is not None else np.zeros((n, dim))
                params.add(name, init, "embedder")

    def __call__(self, classes, codes=None) -> Tensor:
        classes = np.asarray(classes, dtype=np.int64)
        if classes.size and (classes.min() < 0 or classes.max() >= self.n_classes):
            raise ConfigError(f"unknown condition: class id outside [0, {self.n_classes})")
        out = T.embedding(self.params["embed.class"], classes)
        codes = np.zeros((len(classes), 0), dtype=np.int64) if codes is None else np.asarray(codes, dtype=np.int64)
        codes = codes.reshape(len(classes), -1)
        if codes.shape[1] not in (0, len(self.vocab)):
            raise ConfigError(f"expected {len(self.vocab)} condition codes per row, got {codes.shape[1]}")
        for j in range(codes.shape[1]):
            col = codes[:, j]
            if col.size and (col.min() < 0 or col.max() >= self.vocab[j]):
                raise ConfigError(f"unknown condition: code outside [0, {self.vocab[j]}) in column {j}")
            out = T.add(out, T.embedding(self.params[f"embed.cond{j}"], col))
        return out


class Denoiser:
    """MLP on concat(latent, time features, condition embedding) predicting the clean latent."""

    def __init__(self, params: nn.ParamSet, latent: int, rng: np.random.Generator | None = None,
                 hidden=DENOISER_HIDDEN):
        self.latent = latent
        self.net = nn.MLP(params, "denoiser", (latent + TIME_DIM + COND_DIM, *hidden, latent), rng,
                          group="denoiser")

    def __call__(self, Zt: Tensor, t, T_max: int, cond: Tensor) -> Tensor:
        n = Zt.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        h = T.concat([Zt, Tensor(time_embedding(t, T_max)), cond], axis=1)
        return T.mark(self.net(h), "denoiser")


@dataclass(frozen=True)
class SCDGConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.1
    epochs: int = 150
    batch_size: int = 256
    learning_rate: float = 1e-3
    t_gen: int | None = None
    seed: int = 0
    balanced: bool = True  # draw classes equally often so rare-class embeddings get trained

    @property
    def generation_step(self) -> int:
        return self.t_gen if self.t_gen is not None else max(self.T // 2, 1)

    def validate(self) -> None:
        make_schedule(self.T, self.beta_min, self.beta_max)
        if not 1 <= self.generation_step <= self.T:
            raise ConfigError(f"t_gen must lie in [1, {self.T}]")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("scdg training needs epochs >= 0 and positive batch size and rate")


class SCDG:
    """Denoiser, condition embedder, decoder and schedule bundled for generation."""

    def __init__(self, foundation: Foundation, n_classes: int, vocab=(), schedule: NoiseSchedule | None = None,
                 rng: np.random.Generator | None = None, params: nn.ParamSet | None = None):
        self.foundation = foundation
        self.schedule = schedule or make_schedule()
        self.params = params if params is not None else nn.ParamSet()
        self.denoiser = Denoiser(self.params, foundation.latent, rng)
        self.embedder = ConditionEmbedder(self.params, n_classes, vocab, rng)

    @property
    def n_classes(self) -> int:
        return self.embedder.n_classes

    def freeze(self) -> None:
        self.params.freeze("denoiser", "embedder")

    def unfreeze(self) -> None:
        self.params.unfreeze("denoiser", "embedder")

    def digest(self) -> str:
        return self.params.digest()

    def copy(self, foundation: Foundation | None = None) -> "SCDG":
        s = self.schedule
        return SCDG(foundation or self.foundation, self.n_classes, self.embedder.vocab, s,
                    params=self.params.copy())

    def denoise(self, Z: Tensor, t, classes, codes=None) -> Tensor:
        return self.denoiser(Z, t, self.schedule.T, self.embedder(classes, codes))

    def save(self, path) -> None:
        s = self.schedule
        state = {SCHEDULE_KEY: np.array([s.T, s.beta_min, s.beta_max], dtype=np.float64)}
        state.update(self.params.state_dict())
        save_tensors(path, state)

    @classmethod
    def load(cls, path, foundation: Foundation) -> "SCDG":
        state = load_tensors(path)
        if SCHEDULE_KEY not in state:
            raise ConfigError(f"{path}: missing schedule header record")
        T_, bmin, bmax = state.pop(SCHEDULE_KEY)
        n_classes = state["embed.class"].shape[0]
        vocab = tuple(state[k].shape[0] for k in sorted(k for k in state if k.startswith("embed.cond")))
        g = cls(foundation, n_classes, vocab, make_schedule(int(T_), bmin, bmax))
        g.params.load_state_dict(state)
        g.freeze()
        return g


def generate(gen: SCDG, Z: Tensor, classes, codes=None, t_gen: int | None = None) -> Tensor:
    """Synthetic expression rows ``D(U(Z, t_gen, tau(c)))``; differentiable in ``Z``."""
    t_gen = gen.schedule.T // 2 if t_gen is None else t_gen
    gen.schedule.check_t(t_gen)
    Z = Z if isinstance(Z, Tensor) else Tensor(Z)
    if Z.ndim != 2 or len(np.atleast_1d(classes)) != Z.shape[0]:
        raise T.ContractError("one class id per latent row is required")
    return decode(gen.foundation, gen.denoise(Z, t_gen, classes, codes))


def generate_decoder_only(gen: SCDG, Z: Tensor, classes=None, codes=None, t_gen=None) -> Tensor:
    """Ablation generator that skips the denoiser and decodes ``Z`` directly."""
    return decode(gen.foundation, Z if isinstance(Z, Tensor) else Tensor(Z))


def scdg_loss(gen: SCDG, Z0: np.ndarray, t: np.ndarray, classes, codes, rng) -> Tensor:
    """Mean squared error between ``Z0`` and the denoiser's prediction from ``Z_t``."""
    Zt, _ = forward_diffuse(Z0, t, gen.schedule, rng)
    pred = gen.denoise(Tensor(Zt), t, classes, codes)
    return nn.mse(pred, Z0)


def train_scdg(foundation: Foundation, dataset: LabeledDataset, cfg: SCDGConfig) -> tuple[SCDG, list[float]]:
    """Train denoiser and condition embedder on latents of the frozen encoder.

    Each step draws a minibatch (class-balanced unless ``balanced`` is off), one step ``t ~ U{1..T}`` per sample, and
    fresh Gaussian noise.  Returns the frozen generator and the per-epoch mean
    loss (entry 0 is the untrained loss on the whole set).
    """
    cfg.validate()
    if not foundation.frozen:
        raise ConfigError("train_scdg needs a frozen foundation model")
    schedule = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    gen = SCDG(foundation, dataset.n_classes, dataset.condition_vocab, schedule, substream(cfg.seed, "scdg-init"))
    Z0 = encode_array(foundation, dataset.matrix)
    y, codes = dataset.labels, dataset.conditions
    noise_rng = substream(cfg.seed, "scdg-noise")
    order_rng = substream(cfg.seed, "scdg-batches")
    opt = nn.Adam(gen.params, cfg.learning_rate)
    counts = np.bincount(y, minlength=dataset.n_classes)
    weights = 1.0 / counts[y]
    weights /= weights.sum()

    with T.no_grad():
        t0 = noise_rng.integers(1, cfg.T + 1, size=len(Z0))
        history = [scdg_loss(gen, Z0, t0, y, codes, noise_rng).item()]
    for epoch in range(cfg.epochs):
        if cfg.balanced:
            perm = order_rng.choice(len(Z0), size=len(Z0), p=weights)
        else:
            perm = order_rng.permutation(len(Z0))
        total = 0.0
        for start in range(0, len(Z0), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            t = noise_rng.integers(1, cfg.T + 1, size=len(idx))
            loss = scdg_loss(gen, Z0[idx], t, y[idx], codes[idx], noise_rng)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"scdg loss diverged at epoch {epoch}")
            opt.step(T.backward(loss, gen.params.trainable()))
            total += loss.item() * len(idx)
        history.append(total / len(Z0))
        log.debug("scdg epoch %d loss %.5f", epoch, history[-1])
    gen.freeze()
    return gen, history
