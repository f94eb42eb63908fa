"""Mini-batch training of the rejector on the surrogate deferral loss."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import AgentPredictionRecord, CostParams, LogArrays, STRICT, cost_tensor, validate_cost_params
from .errors import ConfigError, DimensionMismatch, EmptyDataset, NonFiniteLoss
from .losses import deferral_loss_and_grad
from .rejector import RejectorModel, _zero_main_row

log = logging.getLogger(__name__)

LINEAR_DECAY, CONSTANT = "linear-decay", "constant"


@dataclass(frozen=True)
class TrainConfig:
    # batch size, warmup and schedule match the usual encoder fine-tuning
    # recipe; the learning rate is sized for a linear rejector instead
    costs: CostParams
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    schedule: str = LINEAR_DECAY
    momentum: float = 0.9
    seed: int = 0
    nu: float = 1.0
    cost_mode: str = STRICT

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.schedule not in (LINEAR_DECAY, CONSTANT):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.nu < 0:
            raise ConfigError("nu must be >= 0")
        return self


@dataclass(frozen=True)
class TraceRow:
    step: int
    epoch: int
    lr: float
    mean_loss: float


def schedule_lr(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to the base rate, then linear decay to 0."""
    lr = config.learning_rate
    if config.schedule == CONSTANT:
        return lr
    warmup = int(config.warmup_fraction * total_steps)
    if step < warmup:
        return lr * step / warmup
    return lr * (total_steps - step) / max(1, total_steps - warmup)


def canonical_order(records: Sequence[AgentPredictionRecord]) -> list[AgentPredictionRecord]:
    return sorted(records, key=lambda r: r.query_id)


def batch_loss_and_grads(model: RejectorModel, features, tau, nu: float):
    """Mean surrogate loss over a batch and its gradient per weight array."""
    scores = model.score_batch(features)
    loss, g_scores = deferral_loss_and_grad(scores, tau, nu)
    n = len(loss)
    grads = model.backward(features, g_scores / n)
    return float(loss.mean()), grads


def _check_dims(arrays: LogArrays, model: RejectorModel, costs: CostParams) -> None:
    if arrays.features.shape[1] != model.input_dim:
        raise DimensionMismatch(f"features have d={arrays.features.shape[1]}, model {model.input_dim}")
    if arrays.num_agents != model.num_agents or costs.num_agents != model.num_agents:
        raise DimensionMismatch(
            f"agents: log {arrays.num_agents}, costs {costs.num_agents}, model {model.num_agents}"
        )


def train(
    dataset: Sequence[AgentPredictionRecord], model: RejectorModel, config: TrainConfig
) -> tuple[RejectorModel, list[TraceRow]]:
    """Momentum SGD over seeded shuffles of the canonically sorted dataset.

    The input model is not modified.  Raises :class:`NonFiniteLoss` as soon
    as a batch loss stops being finite.
    """
    config.validate()
    if not dataset:
        raise EmptyDataset("cannot train on an empty dataset")
    costs = validate_cost_params(config.costs, config.cost_mode)
    arrays = LogArrays.from_records(canonical_order(dataset))
    _check_dims(arrays, model, costs)
    tau = 1.0 - cost_tensor(arrays.correct, costs)

    model = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in model.weights.items()}
    rng = np.random.default_rng(config.seed)
    n = len(arrays)
    per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * per_epoch
    trace: list[TraceRow] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            loss, grads = batch_loss_and_grads(model, arrays.features[idx], tau[idx], config.nu)
            if not math.isfinite(loss):
                raise NonFiniteLoss(step, loss)
            lr = schedule_lr(step, total, config)
            for k, g in grads.items():
                velocity[k] = config.momentum * velocity[k] + g
                model.weights[k] -= lr * velocity[k]
            if model.pin_zero:
                _zero_main_row(model)
            trace.append(TraceRow(step, epoch, lr, loss))
            step += 1
        log.debug("epoch %d mean loss %.6f", epoch, np.mean([t.mean_loss for t in trace[-per_epoch:]]))
    return model, trace


def epoch_means(trace: Sequence[TraceRow]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for row in trace:
        by_epoch.setdefault(row.epoch, []).append(row.mean_loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def write_trace(trace: Sequence[TraceRow], path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "lr", "mean_loss"])
        for row in trace:
            w.writerow([row.step, row.epoch, repr(row.lr), repr(row.mean_loss)])


def grad_check(
    model: RejectorModel,
    batch: Sequence[AgentPredictionRecord],
    config: TrainConfig,
    epsilon: float = 1e-6,
    num_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference weight gradients.

    Checks ``num_coords`` randomly chosen weights, or all of them when the
    model has fewer.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    arrays = LogArrays.from_records(batch)
    tau = 1.0 - cost_tensor(arrays.correct, config.costs)
    _, grads = batch_loss_and_grads(model, arrays.features, tau, config.nu)
    analytic = np.concatenate([grads[k].ravel() for k in model.param_names])
    theta = model.flat()
    rng = np.random.default_rng(seed)
    coords = np.arange(theta.size)
    if theta.size > num_coords:
        coords = rng.choice(theta.size, size=num_coords, replace=False)
    worst = 0.0
    for c in coords:
        up, down = theta.copy(), theta.copy()
        up[c] += epsilon
        down[c] -= epsilon
        f_up, _ = batch_loss_and_grads(model.with_flat(up), arrays.features, tau, config.nu)
        f_down, _ = batch_loss_and_grads(model.with_flat(down), arrays.features, tau, config.nu)
        numeric = (f_up - f_down) / (2 * epsilon)
        denom = max(abs(numeric), abs(analytic[c]))
        if denom > 0:
            worst = max(worst, abs(numeric - analytic[c]) / denom)
    return worst
