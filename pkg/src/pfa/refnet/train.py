"""Mini-batch SGD with classical momentum, step learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..arch import ArchSpec
from ..errors import DivergedLoss, InvalidParams, ShapeError
from .layers import softmax_xent
from .network import Network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 8
    batch_size: int = 64
    weight_decay: float = 1e-4
    lr_decay: float = 0.1
    decay_epochs: int = 6  # epochs between lr decays
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.decay_epochs < 1:
            raise InvalidParams("epochs must be >= 0, batch_size and decay_epochs >= 1")
        if self.lr <= 0 or not (0 <= self.momentum < 1) or self.weight_decay < 0 or self.lr_decay <= 0:
            raise InvalidParams("invalid optimiser hyperparameters")


def train(arch: ArchSpec, weights: dict, dataset, config: TrainConfig, test=None):
    """Train ``weights`` on ``dataset``; returns ``(weights, accuracy)``.

    Accuracy is measured on ``test`` when given, otherwise on ``dataset``.
    Zero epochs return the initial weights and their accuracy.
    """
    if tuple(dataset.images.shape[1:]) != arch.input_shape:
        raise ShapeError(f"dataset shape {dataset.images.shape[1:]} != arch input {arch.input_shape}")
    net = Network(arch, weights)
    rng = np.random.default_rng(config.seed)
    velocity = {k: {n: np.zeros_like(v) for n, v in p.items()} for k, p in net.params.items()}
    x, y = dataset.images, dataset.labels
    n = len(y)
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** (epoch // config.decay_epochs)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if idx.size < 2:
                continue
            logits = net.forward(x[idx], train=True)
            loss, g = softmax_xent(logits, y[idx])
            if not np.isfinite(loss):
                raise DivergedLoss(f"loss became {loss} in epoch {epoch}")
            total += loss * idx.size
            grads, _ = net.backward(g)
            for lid, pg in grads.items():
                for name, gr in pg.items():
                    w = net.params[lid][name]
                    if name == "kernel" and config.weight_decay:
                        gr = gr + config.weight_decay * w
                    v = velocity[lid][name]
                    v *= config.momentum
                    v -= lr * gr
                    w += v
        log.debug("epoch %d lr %.4g loss %.4f", epoch, lr, total / n)
    eval_set = test if test is not None else dataset
    return net.weights(), net.accuracy(eval_set.images, eval_set.labels)
