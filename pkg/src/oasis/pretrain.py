"""Offline source-domain training: plain risk minimization or domain
randomization (K composed photometric transforms per sample)."""

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .seeding import rng_for
from .world import randomize


class PretrainDivergence(RuntimeError):
    """Training loss went non-finite."""


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 6
    learning_rate: float = 2.5e-4
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 1
    bn_momentum: float = 0.1
    dr_level: int = 0  # 0 = no randomization; otherwise K transforms per sample
    class_balance_power: float = 0.75  # 0 disables the frequency weighting

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("the online-scale trainer runs with batch size 1")


def class_weights(frames, n_classes, power):
    """Inverse-frequency weights (mean 1) measured on the training masks.

    The rare classes (poles, cars, pedestrians) cover ~1% of pixels each;
    unweighted CE never picks them up at this capacity and learning rate.
    """
    if power == 0.0:
        return None
    counts = np.zeros(n_classes)
    for frame in frames:
        counts += np.bincount(frame.mask.reshape(-1), minlength=n_classes)
    freq = counts / counts.sum()
    weights = (1.0 / np.maximum(freq, 1e-4)) ** power
    return weights / weights.mean()


def pretrain(model, frames, cfg, seed):
    """Train in place; returns per-epoch mean losses.

    Each step folds the sample's statistics into the BN running stats
    (momentum bn_momentum) and normalizes with the result, so the final
    checkpoint carries source-domain feature statistics.
    """
    model.set_param_grads("all")
    opt = M.SGD(M.OptimizerConfig(cfg.learning_rate, cfg.sgd_momentum,
                                  cfg.weight_decay, param_scope="all"))
    weights = class_weights(frames, model.classes, cfg.class_balance_power)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng_for(seed, "order", epoch).permutation(len(frames))
        total = 0.0
        for step, idx in enumerate(order):
            frame = frames[int(idx)]
            img = frame.image
            if cfg.dr_level:
                img = randomize(img, cfg.dr_level, rng_for(seed, "dr", epoch, step))
            model.zero_grad()
            tape = T.Tape()
            probs = M.forward(model, img, bn_mode="mix", bn_momentum=cfg.bn_momentum, tape=tape)
            loss = T.cross_entropy_mean(probs, frame.mask, tape=tape, class_weights=weights)
            value = loss.item()
            if not np.isfinite(value):
                raise PretrainDivergence(f"loss diverged at epoch {epoch}, step {step}")
            T.backward(loss, tape)
            opt.step(model)
            total += value
        epoch_losses.append(total / max(len(frames), 1))
    return epoch_losses


def pretrain_variant(name, frames, cfg, seed, classes, dtype=np.float64):
    """Fresh model (shared init across variants) trained under one recipe."""
    model = M.init_model(classes, seed=int(rng_for(seed, "init").integers(0, 2 ** 31)), dtype=dtype)
    losses = pretrain(model, frames, cfg, seed=int(rng_for(seed, "data", name).integers(0, 2 ** 31)))
    model.snapshot_id = name
    return model, losses
