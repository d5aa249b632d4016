"""Optimization of the phase network against the per-pixel L1 error."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from dlpr import autodiff as ad
from dlpr.network import NetworkSpec, PhaseNet, save_checkpoint
from dlpr.validation import check_image_batch, check_paired

log = logging.getLogger(__name__)

EVAL_BATCH = 32


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on the arrays in ``params``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1 - beta1**state.step
    c2 = 1 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# -- evaluation ---------------------------------------------------------------


def per_sample_l1(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    check_paired(pred, truth)
    return np.abs(pred - truth).reshape(len(pred), -1).mean(axis=1)


def evaluate(model: PhaseNet, dataset) -> float:
    """Mean over samples of the per-image L1 error.  Parameters are not touched."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = model.predict(dataset.X, batch_size=EVAL_BATCH)
    return float(per_sample_l1(pred, dataset.y).mean())


def null_baseline(dataset, train=None) -> float:
    """MAE of predicting the mean training phase image for every sample.

    Without ``train`` the mean is taken over ``dataset`` itself.
    """
    if len(dataset) == 0 or (train is not None and len(train) == 0):
        raise ValueError("cannot compute a baseline on an empty dataset")
    ref = dataset.y if train is None else train.y
    mean_image = np.asarray(ref, dtype=np.float64).mean(axis=0)
    pred = np.broadcast_to(mean_image, np.shape(dataset.y))
    return float(per_sample_l1(pred, dataset.y).mean())


# -- training loop ------------------------------------------------------------


@dataclass
class History:
    epochs: list = field(default_factory=list)
    train_l1: list = field(default_factory=list)
    test_l1: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def append(self, epoch, train_l1, test_l1, seconds):
        self.epochs.append(epoch)
        self.train_l1.append(train_l1)
        self.test_l1.append(test_l1)
        self.seconds.append(seconds)

    def __len__(self):
        return len(self.epochs)

    def to_csv(self) -> str:
        lines = ["epoch,train_l1,test_l1,seconds"]
        for e, tr, te, s in zip(self.epochs, self.train_l1, self.test_l1, self.seconds):
            te_s = "" if te is None else repr(float(te))
            lines.append(f"{e},{float(tr)!r},{te_s},{s:.3f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def train(model: PhaseNet, train_set, test_set, config: TrainConfig, out_dir=None, metadata=None) -> History:
    """Run ``config.epochs`` epochs of minibatch Adam on the L1 loss.

    With ``out_dir`` set, ``history.csv`` is rewritten after every epoch and
    ``best.ckpt`` (lowest test L1) and ``final.ckpt`` are saved.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    size = model.spec.input_size
    if train_set.X.shape[1:] != (1, size, size):
        raise ValueError(f"training inputs are {train_set.X.shape[1:]}, model expects (1, {size}, {size})")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = dict(metadata or {})
    meta.setdefault("seed", config.seed)

    params = model.parameters()
    state = AdamState()
    history = History()
    best = np.inf
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            model.zero_grad()
            loss = ad.l1_loss(model.forward(ad.Tensor(train_set.X[idx])), train_set.y[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            loss.backward()
            if config.learning_rate > 0:
                adam_step(
                    [p.data for p in params],
                    [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params],
                    state,
                    config.learning_rate,
                    config.beta1,
                    config.beta2,
                    config.eps,
                )
            total += value * len(idx)
        model.zero_grad()
        train_l1 = total / n
        test_l1 = None
        if test_set is not None and len(test_set) and (epoch % config.eval_every == 0 or epoch == config.epochs):
            test_l1 = evaluate(model, test_set)
        history.append(epoch, train_l1, test_l1, time.perf_counter() - start)
        log.info("epoch %d train_l1 %.5f test_l1 %s", epoch, train_l1, test_l1)
        if out is not None:
            history.write(out / "history.csv")
            if test_l1 is not None and test_l1 < best:
                best = test_l1
                save_checkpoint(model, out / "best.ckpt", {**meta, "epoch": epoch})
    if out is not None:
        save_checkpoint(model, out / "final.ckpt", {**meta, "epoch": config.epochs})
    return history


# -- estimator ----------------------------------------------------------------


class PhaseRetrievalRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn style wrapper: ``fit(raw, phase)`` then ``predict(raw)``.

    ``X`` holds standardized raw intensity images, ``(n, h, w)`` or
    ``(n, 1, h, w)``; ``y`` the phase images of the same shape.  ``score``
    returns the negative mean absolute error (greater is better).
    """

    def __init__(
        self,
        input_size=64,
        down_blocks=3,
        up_blocks=3,
        tail_blocks=2,
        base_channels=16,
        channel_growth=2,
        epochs=20,
        batch_size=16,
        learning_rate=1e-3,
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        seed=0,
    ):
        self.input_size = input_size
        self.down_blocks = down_blocks
        self.up_blocks = up_blocks
        self.tail_blocks = tail_blocks
        self.base_channels = base_channels
        self.channel_growth = channel_growth
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.seed = seed

    def _spec(self):
        return NetworkSpec(
            input_size=self.input_size,
            down_blocks=self.down_blocks,
            up_blocks=self.up_blocks,
            tail_blocks=self.tail_blocks,
            base_channels=self.base_channels,
            channel_growth=self.channel_growth,
        )

    def _config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            seed=self.seed,
        )

    def fit(self, X, y, eval_set=None):
        X = check_image_batch(X, self.input_size)
        y = check_image_batch(y, self.input_size)
        check_paired(X, y)
        self.model_ = PhaseNet(self._spec(), seed=self.seed)
        test = None if eval_set is None else _ArrayData(*(check_image_batch(a, self.input_size) for a in eval_set))
        self.history_ = train(self.model_, _ArrayData(X, y), test, self._config())
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        ndim = np.ndim(X)
        X = check_image_batch(X, self.input_size)
        pred = self.model_.predict(X, batch_size=EVAL_BATCH)
        return pred[:, 0] if ndim == 3 else (pred[0, 0] if ndim == 2 else pred)

    def score(self, X, y, sample_weight=None):
        pred = check_image_batch(self.predict(X))
        return -float(per_sample_l1(pred, check_image_batch(y)).mean())


@dataclass
class _ArrayData:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.X)
