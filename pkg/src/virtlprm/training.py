"""Optimization: AdamW with decoupled weight decay, a one-cycle learning
rate schedule, and a deterministic mini-batch training loop with
best-validation checkpointing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .coredata import bypass_augment


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    """Optimizer and schedule settings.

    ``max_lr`` is the one-cycle peak (0.005 for the mirror-set surrogate
    models, 0.08 for the per-detector core-state models); weight decay is
    0.01. Epochs, batch size, and the schedule shape are engineering
    defaults exposed here.
    """

    max_lr: float
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    bypass_p: float = 0.0
    bypass_mode: str = "per-detector"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ValueError(f"max_lr must be positive, got {self.max_lr}")
        if not 0.0 <= self.bypass_p <= 1.0:
            raise ValueError(f"bypass_p must lie in [0, 1], got {self.bypass_p}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need at least 1 epoch and a batch size of at least 2")

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class AdamWState:
    """Per-parameter first/second moment buffers plus the step counter."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._scratch = {k: np.empty_like(p.data) for k, p in params.items()}
        self.t = 0
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.eps
        self.weight_decay = cfg.weight_decay
        self.lr = cfg.max_lr / cfg.div_start


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: AdamWState):
    """One decoupled-weight-decay update of every parameter, in place.

    Weight decay multiplies the parameter directly rather than entering the
    moment estimates, so decay with zero gradients shrinks weights by
    exactly (1 - lr * wd) per step. All arithmetic runs in-place against
    preallocated buffers; parameter tensors are large enough that temporary
    churn costs more than the update itself.
    """
    for key, g in grads.items():
        if g is None or not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {key!r} "
                                  f"at step {state.t + 1}")
        if g.shape != params[key].data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter "
                             f"{key!r} shape {params[key].data.shape}")
    state.t += 1
    t = state.t
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for key, g in grads.items():
        p = params[key]
        m = state.m[key]
        v = state.v[key]
        s = state._scratch[key]
        m *= state.beta1
        np.multiply(g, 1.0 - state.beta1, out=s)
        m += s
        v *= state.beta2
        np.multiply(g, g, out=s)
        s *= 1.0 - state.beta2
        v += s
        # update = lr * (m / bias1) / (sqrt(v / bias2) + eps)
        np.sqrt(v, out=s)
        s *= 1.0 / np.sqrt(bias2)
        s += state.eps
        np.divide(m, s, out=s)
        s *= state.lr / bias1
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= s
    return params, state


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine ramp up to ``max_lr`` over the warmup fraction, then cosine
    anneal down; the peak is attained at exactly one step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside schedule of {total_steps} steps")
    if total_steps == 1:
        return cfg.max_lr
    last = total_steps - 1
    warmup_steps = int(round(cfg.warmup_frac * last))
    warmup_steps = min(max(warmup_steps, 1), last)
    start = cfg.max_lr / cfg.div_start
    final = cfg.max_lr / cfg.div_final
    if step == warmup_steps:
        return cfg.max_lr
    if step < warmup_steps:
        frac = step / warmup_steps
        lr = start + (cfg.max_lr - start) * 0.5 * (1.0 - np.cos(np.pi * frac))
    else:
        frac = (step - warmup_steps) / (last - warmup_steps)
        lr = final + (cfg.max_lr - final) * 0.5 * (1.0 + np.cos(np.pi * frac))
    return float(min(lr, cfg.max_lr))


@dataclass
class DataSplit:
    """Input/target arrays for training and validation. Inputs are keyed
    dicts so one loop serves both model families."""

    train_inputs: dict
    train_targets: np.ndarray
    val_inputs: dict
    val_targets: np.ndarray

    def __post_init__(self):
        if len(self.train_targets) < 2:
            raise ValueError("training split needs at least 2 samples")
        if len(self.val_targets) < 1:
            raise ValueError("validation split is empty")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_val_loss: float = np.inf
    best_epoch: int = -1


def _take(inputs: dict, idx) -> dict:
    return {k: v[idx] for k, v in inputs.items()}


def batched_predict(model, inputs: dict, chunk: int = 256) -> np.ndarray:
    """Eval-mode predictions over a whole input set, in memory-bounded chunks."""
    n = len(next(iter(inputs.values())))
    parts = []
    for lo in range(0, n, chunk):
        batch = {k: v[lo:lo + chunk] for k, v in inputs.items()}
        parts.append(model.forward_batch(batch, mode="eval").data)
    return np.concatenate(parts, axis=0)


def validation_loss(model, inputs: dict, targets: np.ndarray) -> float:
    pred = batched_predict(model, inputs)
    return float(np.mean((pred - targets) ** 2))


def train(model, data: DataSplit, cfg: TrainConfig) -> TrainResult:
    """Mini-batch training with seeded shuffling and on-the-fly detector
    zeroing on the ``x`` input channel when ``bypass_p`` is set.

    Records per-epoch train/validation loss and the step learning rate,
    and leaves the model restored to its best-validation parameters. The
    whole run is a deterministic function of (data, cfg). Trailing
    single-sample batches are folded into the previous batch so batch
    statistics stay defined.
    """
    rng = np.random.default_rng(cfg.seed)
    n = len(data.train_targets)
    steps_per_epoch = max(1, int(np.ceil(n / cfg.batch_size)))
    if n % cfg.batch_size == 1 and steps_per_epoch > 1:
        steps_per_epoch -= 1  # fold the single leftover sample into the last batch
    total_steps = cfg.epochs * steps_per_epoch

    state = AdamWState(model.params, cfg)
    result = TrainResult()
    best_snapshot = model.snapshot()
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        lr = state.lr
        for b in range(steps_per_epoch):
            lo = b * cfg.batch_size
            hi = n if b == steps_per_epoch - 1 else min(n, lo + cfg.batch_size)
            idx = perm[lo:hi]
            batch_inputs = _take(data.train_inputs, idx)
            if cfg.bypass_p > 0.0 and "x" in batch_inputs:
                batch_inputs["x"] = bypass_augment(batch_inputs["x"], cfg.bypass_p,
                                                   rng, mode=cfg.bypass_mode)
            targets = Tensor(data.train_targets[idx])

            model.zero_grads()
            pred = model.forward_batch(batch_inputs, mode="train")
            loss = ad.mse_loss(pred, targets)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, "
                                      f"batch {b}")
            loss.backward()
            lr = one_cycle_lr(step, total_steps, cfg)
            state.lr = lr
            adamw_step(model.params, {k: p.grad for k, p in model.params.items()}, state)
            step += 1
            epoch_loss += loss_value * len(idx)
            seen += len(idx)

        val_loss = validation_loss(model, data.val_inputs, data.val_targets)
        result.history.append({
            "epoch": epoch,
            "train_loss": epoch_loss / seen,
            "val_loss": val_loss,
            "lr": lr,
        })
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_snapshot = model.snapshot()

    model.restore(best_snapshot)
    return result


def history_to_csv(history: list[dict], path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            writer.writerow([row["epoch"], repr(float(row["train_loss"])),
                             repr(float(row["val_loss"])), repr(float(row["lr"]))])


def history_from_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                 "val_loss": float(r["val_loss"]), "lr": float(r["lr"])}
                for r in reader]
