"""Adam training of a predictive-coding stack over a sequence set."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .autodiff import backward
from .datasets import SequenceSet
from .errors import ConfigError, TrainingError
from .predcode_stack import Stack, rollout

METRICS_HEADER = ("step", "epoch", "lr", "loss", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.decay_factor <= 0:
            raise ConfigError("decay factor must be positive")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; returns fresh parameter arrays and state."""
    for name, g in grads.items():
        if name not in params:
            raise ConfigError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ConfigError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_new[name], v_new[name] = m, v
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_params, OptimizerState(m_new, v_new, t)


def lr_schedule(step: int, total_steps: int, base_lr: float, decay_factor: float = 10.0) -> float:
    """``base_lr`` for the first half of training, ``base_lr / decay_factor`` after."""
    if not 0 <= step < max(total_steps, 1):
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    if total_steps <= 1:
        return base_lr
    return base_lr if step < total_steps // 2 else base_lr / decay_factor


def batch_gradients(stack: Stack, batch: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients averaged over a ``(B, T, H, W, C)`` batch."""
    res = rollout(stack, batch, train_mode=True, keep_errors=False)
    grads = backward(res.tape, res.loss_node)
    return res.loss, {name: grads[node] for name, node in res.param_nodes.items()}


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train(
    stack: Stack,
    dataset: SequenceSet,
    config: TrainConfig,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[Stack, list[dict]]:
    """Train ``stack`` (a trained copy is returned; the input is left untouched)."""
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    want = (stack.config.height, stack.config.width, stack.config.input_channels)
    if dataset.data.shape[2:] != want:
        raise ConfigError(f"dataset frames {dataset.data.shape[2:]} do not match stack input {want}")
    rng = np.random.default_rng(config.seed)
    per_epoch = steps_per_epoch(len(dataset), config.batch_size)
    total = per_epoch * config.epochs
    params = {k: v.copy() for k, v in stack.params.items()}
    opt = OptimizerState()
    log: list[dict] = []
    step = 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for b in range(per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = lr_schedule(step, total, config.lr, config.decay_factor)
            loss, grads = batch_gradients(Stack(stack.config, params), dataset.data[idx])
            params, opt = adam_step(params, grads, opt, lr, config.beta1, config.beta2, config.eps)
            row = dict(step=step, epoch=epoch, lr=lr, loss=loss,
                       wall_ms=(time.perf_counter() - start) * 1000.0)
            log.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
    return Stack(stack.config, params), log


def write_metrics_csv(log, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for row in log:
            w.writerow([row["step"], row["epoch"], repr(row["lr"]), repr(row["loss"]),
                        f"{row['wall_ms']:.3f}"])
