"""Natural and adversarial training with a PGD inner maximizer.

Adversarial training solves the min-max objective: for every batch the
inner loop finds a worst-case perturbation inside the L-inf ball of
radius epsilon (projected gradient ascent on the loss, steps of
step_size along the gradient sign, always re-projected onto the ball
and the valid pixel range), then the outer step updates parameters on
that perturbed batch. epsilon = 0 degenerates to natural training and
produces bit-identical parameters under the same seed.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .errors import DimensionError, TrainingDivergedError, ValidationError
from .nn import Model

__all__ = [
    "AdversarialConfig",
    "TrainConfig",
    "EpochStats",
    "pgd_perturb",
    "train_natural",
    "train_adversarial",
    "evaluate_accuracy",
]


@dataclass(frozen=True)
class AdversarialConfig:
    """Inner-maximizer settings: ball radius and PGD schedule."""

    epsilon: float
    pgd_steps: int = 40
    pgd_step_size: float = 0.01
    random_start: bool = True

    def __post_init__(self):
        # epsilon 0 is allowed: it degenerates to natural training.
        if not 0.0 <= self.epsilon < 1.0:
            raise ValidationError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.pgd_steps < 1:
            raise ValidationError(f"pgd_steps must be at least 1, got {self.pgd_steps}")
        if self.pgd_step_size <= 0.0:
            raise ValidationError(f"pgd_step_size must be positive, got {self.pgd_step_size}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 50
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    adversarial: Optional[AdversarialConfig] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.learning_rate < 0.0:
            raise ValidationError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"optimizer must be sgd or adam, got {self.optimizer!r}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


class _Sgd:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self):
        for tensor in self.params:
            tensor.data -= self.lr * tensor.grad


class _Adam:
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def __init__(self, params, lr):
        self.params = params
        self.lr = lr
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@contextmanager
def _frozen(model: Model):
    """Parameters stop requiring gradients inside the block.

    Cuts the weight-gradient work (and activation retention) out of the
    inner PGD loop, where only input gradients are needed. Prior flags
    are restored on exit.
    """
    prior = [(tensor, tensor.requires_grad) for _, tensor in model.parameters()]
    model.set_trainable(False)
    try:
        yield
    finally:
        for tensor, flag in prior:
            tensor.requires_grad = flag


def _pgd(model: Model, x0, y, epsilon, step_size, steps, x_start=None):
    """Core PGD ascent; epsilon may be scalar or per-example (n,1,1,1)."""
    lo = np.maximum(x0 - epsilon, -0.5)
    hi = np.minimum(x0 + epsilon, 0.5)
    x = x0 if x_start is None else np.clip(x_start, lo, hi)
    for _ in range(steps):
        xt = ad.Tensor(x, requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.softmax_cross_entropy(model.forward(xt), y)
        ad.backward(loss, tape)
        x = np.clip(x + step_size * np.sign(xt.grad), lo, hi)
    return x


def pgd_perturb(model, x, y, epsilon, step_size=0.01, steps=40, random_start=True, seed=0):
    """Worst-case perturbation of x within the epsilon ball and pixel range."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 4 or x.shape[0] != y.shape[0]:
        raise DimensionError(f"expected (N, C, H, W) images with matching labels, got {x.shape}")
    if np.abs(x).max() > 0.5:
        raise ValidationError("inputs must lie in [-0.5, 0.5]")
    if epsilon <= 0.0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    if steps < 1:
        raise ValidationError(f"steps must be at least 1, got {steps}")
    start = None
    if random_start:
        rng = np.random.default_rng(seed)
        start = x + rng.uniform(-1.0, 1.0, size=x.shape) * epsilon
    with _frozen(model):
        return _pgd(model, x, y, epsilon, step_size, steps, x_start=start)


def _train(model: Model, dataset: Dataset, config: TrainConfig) -> list[EpochStats]:
    adv = config.adversarial
    # Separate streams so the shuffle sequence is the same whether or
    # not PGD consumes randomness; epsilon = 0 then matches natural
    # training parameter for parameter.
    shuffle_ss, pgd_ss = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    pgd_rng = np.random.default_rng(pgd_ss)

    params = [t for _, t in model.parameters()]
    opt_cls = _Adam if config.optimizer == "adam" else _Sgd
    opt = opt_cls(params, config.learning_rate)

    n = len(dataset)
    log: list[EpochStats] = []
    run_pgd = adv is not None and adv.epsilon > 0.0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            if run_pgd:
                start = None
                if adv.random_start:
                    start = xb + pgd_rng.uniform(-1.0, 1.0, size=xb.shape) * adv.epsilon
                with _frozen(model):
                    xb = _pgd(model, xb, yb, adv.epsilon, adv.pgd_step_size, adv.pgd_steps, start)
            with ad.Tape() as tape:
                logits = model.forward(ad.Tensor(xb))
                loss = ad.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"loss became {float(loss.data)} at epoch {epoch}")
            ad.backward(loss, tape)
            opt.step()
            loss_sum += float(loss.data) * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
        log.append(EpochStats(epoch, loss_sum / n, correct / n))

    model.set_trainable(False)
    model.metadata.update(
        training="adversarial" if adv is not None else "natural",
        epsilon=adv.epsilon if adv is not None else None,
        epochs=config.epochs,
        optimizer=config.optimizer,
        learning_rate=config.learning_rate,
        seed=config.seed,
        final_train_accuracy=log[-1].accuracy,
    )
    return log


def train_natural(model: Model, dataset: Dataset, config: TrainConfig) -> list[EpochStats]:
    """Train on clean batches; returns the per-epoch loss/accuracy log."""
    if config.adversarial is not None:
        config = TrainConfig(
            config.epochs, config.batch_size, config.learning_rate,
            config.optimizer, config.seed, None,
        )
    model.set_trainable(True)
    return _train(model, dataset, config)


def train_adversarial(model: Model, dataset: Dataset, config: TrainConfig) -> list[EpochStats]:
    """Train on freshly perturbed batches; the log tracks accuracy on them."""
    if config.adversarial is None:
        raise ValidationError("config.adversarial is required for adversarial training")
    model.set_trainable(True)
    return _train(model, dataset, config)


def evaluate_accuracy(model: Model, dataset: Dataset, batch_size: int = 512) -> float:
    """Fraction of argmax-logit predictions matching labels, ties to lowest id."""
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        logits = model.forward(dataset.images[lo : lo + batch_size]).data
        correct += int((np.argmax(logits, axis=1) == dataset.labels[lo : lo + batch_size]).sum())
    return correct / len(dataset)
