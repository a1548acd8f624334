"""Parameter containers, small MLPs and first-order optimizers."""

from __future__ import annotations

import hashlib
from typing import Callable, Iterator, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor] | None] = {
    "relu": T.relu,
    "softplus": T.softplus,
    "none": None,
}


class ParamSet:
    """Named parameters, each belonging to a group that can be frozen.

    Tensors are never modified in place; an update swaps in a new Tensor.
    Frozen parameters are stored with ``requires_grad=False`` so no graph is
    recorded through them, and ``assign`` refuses to touch them.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._group: dict[str, str] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value, group: str = "default") -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already exists")
        frozen = group in self._frozen
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=not frozen)
        self._tensors[name] = t
        self._group[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def groups(self) -> set[str]:
        return set(self._group.values())

    def group_of(self, name: str) -> str:
        return self._group[name]

    def is_frozen(self, name: str) -> bool:
        return self._group[name] in self._frozen

    def freeze(self, *groups: str) -> None:
        targets = set(groups) if groups else self.groups()
        self._frozen |= targets
        for name, t in self._tensors.items():
            if self._group[name] in targets and t.requires_grad:
                self._tensors[name] = Tensor(t.data)

    def unfreeze(self, *groups: str) -> None:
        targets = set(groups) if groups else self.groups()
        self._frozen -= targets
        for name, t in self._tensors.items():
            if self._group[name] in targets and not t.requires_grad:
                self._tensors[name] = Tensor(t.data, requires_grad=True)

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._tensors.items() if not self.is_frozen(k)}

    def assign(self, name: str, value) -> None:
        if self.is_frozen(name):
            raise PermissionError(f"parameter {name!r} is frozen")
        old = self._tensors[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise T.ContractError(f"{name}: shape {value.shape} != {old.shape}")
        self._tensors[name] = Tensor(value, requires_grad=True)

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: t.data.copy() for k, t in self._tensors.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "") -> None:
        for k in self._tensors:
            arr = np.asarray(state[prefix + k], dtype=np.float64)
            if arr.shape != self._tensors[k].shape:
                raise T.ContractError(f"{k}: checkpoint shape {arr.shape} != {self._tensors[k].shape}")
            self._tensors[k] = Tensor(arr.copy(), requires_grad=not self.is_frozen(k))

    def copy(self) -> "ParamSet":
        new = ParamSet()
        new._frozen = set(self._frozen)
        for k, t in self._tensors.items():
            new._tensors[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            new._group[k] = self._group[k]
        return new

    def digest(self, groups: set[str] | None = None) -> str:
        h = hashlib.sha256()
        for k in sorted(self._tensors):
            if groups is not None and self._group[k] not in groups:
                continue
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._tensors[k].data).tobytes())
        return h.hexdigest()


class MLP:
    """Fully connected network whose weights live in a shared ParamSet."""

    def __init__(self, params: ParamSet, prefix: str, widths, rng: np.random.Generator | None = None,
                 hidden: str = "relu", out: str = "none", group: str | None = None):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.params = params
        self.prefix = prefix
        self.widths = tuple(int(w) for w in widths)
        self.hidden = hidden
        self.out = out
        group = group or prefix
        n_layers = len(self.widths) - 1
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if f"{prefix}.{i}.W" in params:
                continue
            if rng is None:
                W = np.zeros((a, b))
            else:
                gain = np.sqrt(2.0) if i < n_layers - 1 else 1.0
                W = rng.normal(0.0, gain / np.sqrt(a), size=(a, b))
            params.add(f"{prefix}.{i}.W", W, group)
            params.add(f"{prefix}.{i}.b", np.zeros(b), group)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def weight(self, i: int) -> Tensor:
        return self.params[f"{self.prefix}.{i}.W"]

    def bias(self, i: int) -> Tensor:
        return self.params[f"{self.prefix}.{i}.b"]

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_with_hidden(x)[-1]

    def forward_with_hidden(self, x: Tensor) -> list[Tensor]:
        """Input, every post-activation hidden layer, then the output."""
        if x.shape[-1] != self.widths[0]:
            raise T.ContractError(f"{self.prefix}: input width {x.shape[-1]} != {self.widths[0]}")
        acts = [x]
        h = x
        for i in range(self.n_layers):
            h = T.add(T.matmul(h, self.weight(i)), self.bias(i))
            name = self.hidden if i < self.n_layers - 1 else self.out
            fn = ACTIVATIONS[name]
            if fn is not None:
                h = fn(h)
            acts.append(h)
        return acts

    def names(self) -> list[str]:
        return [f"{self.prefix}.{i}.{p}" for i in range(self.n_layers) for p in ("W", "b")]


class SGD:
    def __init__(self, params: ParamSet, lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params, self.lr, self.momentum = params, lr, momentum
        self._vel: dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if self.params.is_frozen(name):
                continue
            if self.momentum:
                v = self.momentum * self._vel.get(name, 0.0) + g
                self._vel[name] = v
                g = v
            self.params.assign(name, self.params[name].data - self.lr * g)


class Adam:
    def __init__(self, params: ParamSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self._t += 1
        b1, b2 = self.betas
        for name, g in grads.items():
            if self.params.is_frozen(name):
                continue
            m = b1 * self._m.get(name, 0.0) + (1 - b1) * g
            v = b2 * self._v.get(name, 0.0) + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            mhat = m / (1 - b1 ** self._t)
            vhat = v / (1 - b2 ** self._t)
            self.params.assign(name, self.params[name].data - self.lr * mhat / (np.sqrt(vhat) + self.eps))


def mse(pred: Tensor, target) -> Tensor:
    diff = T.add(pred, T.scale(T._as_tensor(target), -1.0))
    return T.mean(T.mul(diff, diff))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    # log-sum-exp on max-shifted logits; the row max contributes exp(0)=1 so the log never sees 0
    peak = np.broadcast_to(logits.data.max(axis=1, keepdims=True), logits.shape)
    shifted = T.add(logits, Tensor(-peak))
    lse = T.log(T.sum(T.exp(shifted), axis=1))
    picked = T.take(shifted, (np.arange(len(labels)), labels))
    return T.scale(T.add(T.sum(lse), T.scale(T.sum(picked), -1.0)), 1.0 / len(labels))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out
