"""Initialisation, reconstruction loss, AdaGrad and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterator, Sequence

import numpy as np

from .errors import InvalidInit, NoData, ShapeMismatch
from .layers import LayerParams

if TYPE_CHECKING:
    from .models import Autoencoder

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "xavier"  # "xavier" | "sparse_gaussian"
    k: int = 15

    def __post_init__(self):
        if self.scheme not in ("xavier", "sparse_gaussian"):
            raise InvalidInit(f"unknown init scheme {self.scheme!r}")
        if self.k < 1:
            raise InvalidInit("k must be >= 1")


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    max_iters: int = 1000
    lr_drop_factor: float = 0.1
    lr_patience: int = 1000
    seed: int = 0
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError(f"invalid training config {self}")

    @classmethod
    def for_model(cls, kind: str, **overrides) -> "TrainConfig":
        if kind == "fc_ae":
            base = dict(batch_size=1024, learning_rate=0.001, weight_decay=0.0005)
        else:
            base = dict(batch_size=32, learning_rate=0.01, weight_decay=0.0005)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


@dataclass
class AdaGradState:
    accum: list[LayerParams | None]
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[LayerParams | None], eps: float = 1e-8) -> "AdaGradState":
        accum = [None if p is None else LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias)) for p in params]
        return cls(accum, eps)


def xavier_init(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform on +-sqrt(3 / fan_in), i.e. variance 1 / fan_in."""
    if fan_in < 1:
        raise InvalidInit("fan_in must be >= 1")
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


def sparse_init(shape, k: int, rng: np.random.Generator) -> np.ndarray:
    """Each output unit gets exactly ``k`` unit-Gaussian incoming weights; the rest are 0.

    ``shape[0]`` indexes output units; the remaining axes are flattened into the fan-in.
    """
    shape = tuple(shape)
    fan_in = int(np.prod(shape[1:]))
    if k > fan_in:
        raise InvalidInit(f"k={k} exceeds fan-in {fan_in}")
    w = np.zeros((shape[0], fan_in))
    for row in w:
        cols = rng.choice(fan_in, size=k, replace=False)
        row[cols] = rng.standard_normal(k)
    return w.reshape(shape)


def weight_penalty(params: Sequence[LayerParams | None]) -> float:
    return float(sum(np.sum(p.weights.astype(np.float64) ** 2) for p in params if p is not None))


def loss_and_grad(model: "Autoencoder", batch: np.ndarray, gamma: float):
    """Mean half squared reconstruction error plus ``gamma * ||W||^2``.

    Biases are not regularised. Returns ``(loss, grads)`` with ``grads`` aligned
    to ``model.params``.
    """
    batch = np.asarray(batch, dtype=model.dtype)
    if batch.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"batch items {batch.shape[1:]} vs model input {model.input_shape}")
    n = batch.shape[0]
    recon, caches = model.forward(batch)
    resid = recon - batch
    loss = 0.5 * float(np.sum(resid.astype(np.float64) ** 2)) / n + gamma * weight_penalty(model.params)
    _, grads = model.backward(caches, resid / n)
    if gamma:
        for g, p in zip(grads, model.params):
            if g is not None:
                g.weights += 2.0 * gamma * p.weights
    return loss, grads


def adagrad_step(params, grads, state: AdaGradState, lr: float):
    """In-place AdaGrad update; returns ``(params, state)`` for convenience."""
    for p, g, a in zip(params, grads, state.accum):
        if p is None:
            continue
        for name in ("weights", "bias"):
            gv = getattr(g, name)
            acc = getattr(a, name)
            acc += gv * gv
            getattr(p, name)[...] -= lr * gv / (np.sqrt(acc) + state.eps)
    return params, state


@dataclass
class TrainResult:
    model: "Autoencoder"
    losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches drawn from successive seeded permutations."""
    batch_size = min(batch_size, n)
    pending = np.empty(0, dtype=np.int64)
    while True:
        while len(pending) < batch_size:
            pending = np.concatenate([pending, rng.permutation(n)])
        yield pending[:batch_size]
        pending = pending[batch_size:]


def _item(x):
    return x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else x


def train(
    model: "Autoencoder",
    dataset: Sequence,
    cfg: TrainConfig,
    on_iter: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Minimise the regularised reconstruction loss with AdaGrad.

    ``dataset`` is an array of samples or a sequence of samples / cuboids.
    The learning rate is multiplied by ``cfg.lr_drop_factor`` whenever the
    mini-batch loss has not improved for ``cfg.lr_patience`` iterations.
    """
    n = len(dataset)
    if n == 0:
        raise NoData("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    state = AdaGradState.zeros_like(model.params, cfg.eps)
    lr = cfg.learning_rate
    best, since = np.inf, 0
    result = TrainResult(model)
    batches = batch_order(n, cfg.batch_size, rng)
    for it in range(1, cfg.max_iters + 1):
        idx = next(batches)
        if isinstance(dataset, np.ndarray):
            batch = dataset[idx]
        else:
            batch = np.stack([_item(dataset[i]) for i in idx])
        loss, grads = loss_and_grad(model, batch, cfg.weight_decay)
        adagrad_step(model.params, grads, state, lr)
        result.losses.append(loss)
        result.learning_rates.append(lr)
        if loss < best:
            best, since = loss, 0
        else:
            since += 1
            if since >= cfg.lr_patience:
                lr *= cfg.lr_drop_factor
                since = 0
                log.info("iter %d: loss plateau, learning rate -> %g", it, lr)
        if on_iter is not None:
            on_iter(it, loss)
        if it % 100 == 0:
            log.debug("iter %d loss %.6f", it, loss)
    return result
