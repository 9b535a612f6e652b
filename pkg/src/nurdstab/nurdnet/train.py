"""Loss, momentum SGD and the training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import ConfigError, ContractViolation
from .model import ArchConfig, NurdNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.2
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    # fraction of epochs after which the learning rate drops by 10x
    lr_drop_at: float = 0.7

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * (0.1 if epoch >= int(np.ceil(self.lr_drop_at * self.epochs)) else 1.0)


def l2_loss(pred, truth) -> float:
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    return float(np.mean((pred - truth) ** 2))


def continuity_loss(pred) -> float:
    pred = np.asarray(pred, np.float64)
    return float(np.mean(np.diff(pred) ** 2))


def loss(pred, truth, alpha: float) -> float:
    """alpha * continuity + (1 - alpha) * mean squared error."""
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ContractViolation(f"prediction {pred.shape} and truth {truth.shape} differ")
    if pred.shape[0] < 2:
        raise ContractViolation("vectors need at least two entries")
    return alpha * continuity_loss(pred) + (1.0 - alpha) * l2_loss(pred, truth)


def batch_loss_and_grad(pred: np.ndarray, truth: np.ndarray, alpha: float) -> tuple[float, np.ndarray]:
    """Mean per-sample loss over a (N, H) batch and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    n, h = pred.shape
    err = pred - truth
    d = np.diff(pred, axis=1)
    value = alpha * np.mean(d * d) + (1 - alpha) * np.mean(err * err)
    g = (1 - alpha) * 2.0 * err / h
    gd = alpha * 2.0 * d / (h - 1)
    g[:, 1:] += gd
    g[:, :-1] -= gd
    return float(value), g / n


class MomentumSGD:
    """v <- momentum * v + g;  p <- p - lr * v - lr * weight_decay * p."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for _, p, _ in params]

    def step(self, lr: float) -> None:
        if lr == 0:
            return
        for v, (_, p, g) in zip(self.velocity, self.params):
            v *= self.momentum
            v += g
            p -= (lr * v).astype(p.dtype, copy=False)
            if self.weight_decay:
                p -= (lr * self.weight_decay * p).astype(p.dtype, copy=False)


def backward_and_step(net: NurdNet, opt: MomentumSGD, maps: np.ndarray, truths: np.ndarray,
                      cfg: TrainConfig, lr: float | None = None) -> float:
    """One SGD step on a batch; returns the loss before the update."""
    maps = np.asarray(maps)
    if maps.ndim != 3 or len(maps) == 0:
        raise ContractViolation("batch must be a nonempty (N, H, w) array")
    truths = np.asarray(truths)
    if truths.shape != maps.shape[:2]:
        raise ContractViolation(f"targets {truths.shape} do not match maps {maps.shape}")
    net.zero_grad()
    pred = net.forward(maps, train=True)
    value, g = batch_loss_and_grad(pred, truths, cfg.alpha)
    net.backward(g)
    opt.step(cfg.learning_rate if lr is None else lr)
    return value


def evaluate(net: NurdNet, maps: np.ndarray, truths: np.ndarray, batch: int = 16) -> float:
    """Mean squared error (A-line units squared) in inference mode."""
    total = 0.0
    for s in range(0, len(maps), batch):
        pred = net.forward(maps[s:s + batch], train=False)
        total += float(np.sum((pred.astype(np.float64) - truths[s:s + batch]) ** 2))
    return total / (len(maps) * maps.shape[1])


@dataclass
class TrainReport:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        rows += [f"{e},{t!r},{v!r}" for e, t, v in zip(self.epochs, self.train_loss, self.val_loss)]
        return "\n".join(rows) + "\n"


def train(train_maps: np.ndarray, train_targets: np.ndarray, val_maps: np.ndarray, val_targets: np.ndarray,
          cfg: TrainConfig = TrainConfig(), arch: ArchConfig | None = None,
          progress: Callable[[int, float, float], None] | None = None) -> tuple[NurdNet, TrainReport]:
    """Train from scratch; return the network of the epoch with the best validation MSE."""
    cfg.validate()
    if len(train_maps) == 0 or len(val_maps) == 0:
        raise ConfigError("training and validation splits must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    net = NurdNet(arch).init(rng)
    opt = MomentumSGD(net.parameters(), cfg.momentum, cfg.weight_decay)
    report = TrainReport()
    best = np.inf
    best_state = net.copy_state()
    t0 = time.perf_counter()
    n = len(train_maps)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = np.sort(order[s:s + cfg.batch_size])
            losses.append(backward_and_step(net, opt, train_maps[idx], train_targets[idx], cfg, lr))
        val = evaluate(net, val_maps, val_targets)
        report.epochs.append(epoch)
        report.train_loss.append(float(np.mean(losses)))
        report.val_loss.append(val)
        log.info("epoch %d lr %.4g train %.4f val %.4f", epoch, lr, report.train_loss[-1], val)
        if progress is not None:
            progress(epoch, report.train_loss[-1], val)
        if val < best:
            best = val
            best_state = net.copy_state()
            report.best_epoch = epoch
    net.load_state(best_state)
    report.seconds = time.perf_counter() - t0
    return net, report
