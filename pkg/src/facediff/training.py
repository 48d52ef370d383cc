"""Reconstruction and velocity losses, AdamW, and the diffusion training step."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .denoiser import Denoiser, Params
from .diffusion import DiffusionSchedule, forward_noise

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    epochs: int = 1
    lambda1: float = 1.0
    lambda2: float = 1.0
    uncond_prob: float = 0.1
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if not 0.0 <= self.uncond_prob <= 1.0:
            raise ValueError("uncond_prob must lie in [0, 1]")


# -- losses --------------------------------------------------------------------

def _pair(x0, x0_hat):
    x0, x0_hat = np.asarray(x0, float), np.asarray(x0_hat, float)
    if x0.shape != x0_hat.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x0_hat.shape}")
    return x0, x0_hat


def rec_loss(x0, x0_hat) -> float:
    """Mean over frames of the per-frame squared error summed over vertices."""
    x0, x0_hat = _pair(x0, x0_hat)
    return float(np.sum((x0 - x0_hat) ** 2) / x0.shape[0])


def vel_loss(x0, x0_hat) -> float:
    """Squared error of frame-to-frame differences, summed from the second
    frame and divided by T.  Returns 0 (with a warning) when T < 2."""
    x0, x0_hat = _pair(x0, x0_hat)
    T = x0.shape[0]
    if T < 2:
        warnings.warn("velocity loss undefined for a single frame; using 0")
        return 0.0
    d = np.diff(x0, axis=0) - np.diff(x0_hat, axis=0)
    return float(np.sum(d ** 2) / T)


def total_loss(x0, x0_hat, lambda1: float = 1.0, lambda2: float = 1.0) -> float:
    return lambda1 * rec_loss(x0, x0_hat) + lambda2 * vel_loss(x0, x0_hat)


def total_loss_grad(x0, x0_hat, lambda1: float = 1.0, lambda2: float = 1.0) -> np.ndarray:
    """d total_loss / d x0_hat."""
    x0, x0_hat = _pair(x0, x0_hat)
    T = x0.shape[0]
    grad = lambda1 * 2.0 * (x0_hat - x0) / T
    if T >= 2:
        # d = diff(x0) - diff(x0_hat); diff(x)[t] = x[t+1] - x[t]
        d = np.diff(x0, axis=0) - np.diff(x0_hat, axis=0)
        g = lambda2 * 2.0 * d / T
        grad[1:] -= g
        grad[:-1] += g
    return grad


# -- optimiser -----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Params, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p -= self.lr * (update + self.weight_decay * p)


# -- training ------------------------------------------------------------------

def train_step(model: Denoiser, batch, schedule: DiffusionSchedule, config: TrainConfig,
               rng: np.random.Generator, optimizer: AdamW,
               on_item: Optional[Callable[[dict], None]] = None) -> Dict[str, float]:
    """One optimiser step on ``batch`` (a sequence of (audio, motion, style)).

    ``on_item`` receives a dict per batch item describing the sampled step and
    whether the audio was dropped.
    """
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    totals = {"loss": 0.0, "rec": 0.0, "vel": 0.0}
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    for audio, motion, style, *_ in batch:
        x0 = np.asarray(getattr(motion, "offsets", motion), dtype=float)
        feats = np.asarray(getattr(audio, "features", audio), dtype=float)
        n = int(rng.integers(1, schedule.steps + 1))
        eps = rng.standard_normal(x0.shape)
        x_n = forward_noise(x0, n, eps, schedule)
        dropped = bool(rng.random() < config.uncond_prob)
        if dropped:
            feats = np.zeros_like(feats)
        if on_item is not None:
            on_item({"n": n, "audio_dropped": dropped})
        x0_hat, cache = model.forward(x_n, feats, style, n)
        rec, vel = rec_loss(x0, x0_hat), vel_loss(x0, x0_hat)
        loss = config.lambda1 * rec + config.lambda2 * vel
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite loss {loss} (rec={rec}, vel={vel}) at diffusion step {n}, "
                f"T={x0.shape[0]}, max|x0_hat|={np.nanmax(np.abs(x0_hat))}")
        g_item = model.backward(total_loss_grad(x0, x0_hat, config.lambda1, config.lambda2),
                                cache)
        for k in grads:
            grads[k] += g_item[k] / B
        totals["loss"] += loss / B
        totals["rec"] += rec / B
        totals["vel"] += vel / B
    optimizer.step(model.params, grads)
    return totals


def make_optimizer(model: Denoiser, config: TrainConfig) -> AdamW:
    return AdamW(model.params, lr=config.learning_rate, betas=(config.beta1, config.beta2),
                 eps=config.adam_eps, weight_decay=config.weight_decay)


def validation_rec_loss(model: Denoiser, items, schedule: DiffusionSchedule,
                        seed: int = 1234) -> float:
    """Mean reconstruction loss over ``items`` at fixed-seed steps and noise."""
    rng = np.random.default_rng(seed)
    losses = []
    for audio, motion, style, *_ in items:
        x0 = np.asarray(motion.offsets, dtype=float)
        n = int(rng.integers(1, schedule.steps + 1))
        x_n = forward_noise(x0, n, rng.standard_normal(x0.shape), schedule)
        losses.append(rec_loss(x0, model(x_n, audio.features, style, n)))
    return float(np.mean(losses))


def train(model: Denoiser, items: Sequence, schedule: DiffusionSchedule,
          config: TrainConfig, steps: Optional[int] = None,
          log_path=None, checkpoint_dir=None, checkpoint_every: int = 0,
          save_fn: Optional[Callable] = None) -> List[Dict[str, float]]:
    """Run ``steps`` optimiser steps (default: ``epochs`` passes over ``items``).

    Batches are drawn without replacement per epoch.  Returns the per-step log;
    if ``log_path`` is set the same rows are appended there as CSV.
    """
    rng = np.random.default_rng(config.rng_seed)
    optimizer = make_optimizer(model, config)
    per_epoch = max(1, int(np.ceil(len(items) / config.batch_size)))
    total = steps if steps is not None else per_epoch * config.epochs
    history = []
    writer = fh = None
    if log_path is not None:
        new = not Path(log_path).exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "loss", "rec", "vel"])
    try:
        order: List[int] = []
        for step in range(1, total + 1):
            if len(order) < config.batch_size:
                order.extend(rng.permutation(len(items)).tolist())
            idx, order = order[:config.batch_size], order[config.batch_size:]
            stats = train_step(model, [items[i] for i in idx], schedule, config, rng,
                               optimizer)
            stats["step"] = step
            history.append(stats)
            if writer is not None:
                writer.writerow([step, repr(stats["loss"]), repr(stats["rec"]),
                                 repr(stats["vel"])])
            if checkpoint_every and save_fn is not None and step % checkpoint_every == 0:
                save_fn(model, step)
            if step % 50 == 0:
                log.info("step %d loss %.5f", step, stats["loss"])
    finally:
        if fh is not None:
            fh.close()
    return history
