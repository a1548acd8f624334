"""Encoder/decoder pair that defines the latent space and the frozen feature extractor."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .data import ExpressionMatrix, LabeledDataset
from .rng import substream
from .tensor import Tensor
from .tensorfile import load_tensors, save_tensors

log = logging.getLogger(__name__)

LATENT_DIM = 128
HIDDEN_DIM = 512


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AEConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    hidden: int = HIDDEN_DIM

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.hidden < 1:
            raise ValueError("autoencoder config needs epochs >= 0 and positive batch size, rate, width")


class Foundation:
    """Encoder ``d -> hidden -> 128`` (relu) and decoder ``128 -> hidden -> d`` (softplus output).

    Both networks share one ParamSet with groups ``encoder`` and ``decoder``.
    """

    def __init__(self, n_genes: int, hidden: int = HIDDEN_DIM, latent: int = LATENT_DIM,
                 rng: np.random.Generator | None = None, params: nn.ParamSet | None = None):
        self.params = params if params is not None else nn.ParamSet()
        self.n_genes, self.hidden, self.latent = n_genes, hidden, latent
        self.encoder = nn.MLP(self.params, "encoder", (n_genes, hidden, latent), rng, group="encoder")
        self.decoder = nn.MLP(self.params, "decoder", (latent, hidden, n_genes), rng,
                              out="softplus", group="decoder")

    @property
    def frozen(self) -> bool:
        return all(self.params.is_frozen(k) for k in self.params)

    def freeze(self) -> None:
        self.params.freeze("encoder", "decoder")

    def unfreeze(self) -> None:
        self.params.unfreeze("encoder", "decoder")

    def copy(self) -> "Foundation":
        return Foundation(self.n_genes, self.hidden, self.latent, params=self.params.copy())

    def digest(self) -> str:
        return self.params.digest({"encoder", "decoder"})

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()

    @classmethod
    def from_state(cls, state) -> "Foundation":
        n_genes, hidden = state["encoder.0.W"].shape
        latent = state["encoder.1.W"].shape[1]
        f = cls(n_genes, hidden, latent)
        f.params.load_state_dict(state)
        f.freeze()
        return f

    def save(self, path) -> None:
        save_tensors(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "Foundation":
        return cls.from_state(load_tensors(path))


def _rows(X) -> Tensor:
    if isinstance(X, Tensor):
        return X
    if isinstance(X, ExpressionMatrix):
        return Tensor(X.dense())
    return Tensor(np.atleast_2d(np.asarray(X, dtype=np.float64)))


def encode(model: Foundation, X) -> Tensor:
    X = _rows(X)
    if X.shape[-1] != model.n_genes:
        raise T.ContractError(f"encoder expects {model.n_genes} genes, got {X.shape[-1]}")
    return model.encoder(X)


def decode(model: Foundation, Z) -> Tensor:
    Z = _rows(Z)
    if Z.shape[-1] != model.latent:
        raise T.ContractError(f"decoder expects latent width {model.latent}, got {Z.shape[-1]}")
    return model.decoder(Z)


def encode_array(model: Foundation, X, batch: int = 1024) -> np.ndarray:
    """Encode many rows without recording a graph."""
    dense = X.dense() if isinstance(X, ExpressionMatrix) else np.asarray(X, dtype=np.float64)
    with T.no_grad():
        parts = [encode(model, dense[i:i + batch]).data for i in range(0, len(dense), batch)]
    return np.concatenate(parts) if parts else np.zeros((0, model.latent))


def reconstruction_mse(model: Foundation, X: np.ndarray) -> float:
    with T.no_grad():
        rec = decode(model, encode(model, X)).data
    return float(np.mean((rec - X) ** 2))


def train_autoencoder(train: LabeledDataset, cfg: AEConfig) -> tuple[Foundation, list[float]]:
    """Fit the autoencoder to normalized data with Adam on mean squared error.

    Returns the frozen model and the per-epoch mean training loss (entry 0 is
    the loss of the untrained network).
    """
    cfg.validate()
    X = train.matrix.dense()
    model = Foundation(train.n_genes, cfg.hidden, rng=substream(cfg.seed, "ae-init"))
    opt = nn.Adam(model.params, cfg.learning_rate)
    order_rng = substream(cfg.seed, "ae-batches")
    history = [reconstruction_mse(model, X)]
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            xb = Tensor(X[perm[start:start + cfg.batch_size]])
            loss = nn.mse(decode(model, encode(model, xb)), xb)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"autoencoder loss diverged at epoch {epoch}")
            opt.step(T.backward(loss, model.params.trainable()))
            total += loss.item() * len(xb.data)
        history.append(total / len(X))
        log.debug("ae epoch %d loss %.5f", epoch, history[-1])
    model.freeze()
    return model, history
