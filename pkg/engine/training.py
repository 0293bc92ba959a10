"""Optimization loop, relative-MSE metric and checkpointing for the Darcy operator task.

Randomness comes from named sub-seeds of TrainConfig.seed: "shuffle" (one per
epoch) and "dropout" (one per step). Given the seed, the config and the
dataset file, metrics and checkpoint bytes are reproducible.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

import config
import store
from config import ConfigError
from engine import tensors as T
from engine.model import ModelConfig, OperatorModel, apply, forward, init_params, is_sampler_param
from engine.tensors import ContractError, DimensionError, Graph

log = logging.getLogger(__name__)

METRICS_NAME = "metrics.csv"
BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"
LAST_GOOD_NAME = "last_good.ckpt"

_STATE_PREFIX = "train."
_M_PREFIX = "adam.m."
_V_PREFIX = "adam.v."


class NonFiniteLossError(RuntimeError):
    """A batch loss was NaN or Inf; the parameters before that step are saved."""

    def __init__(self, message: str, checkpoint: Path):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = config.EPOCHS
    batch_size: int = config.BATCH_SIZE
    lr: float = config.LR
    lr_min: float = config.LR_MIN
    weight_decay: float = config.WEIGHT_DECAY
    beta1: float = config.BETA1
    beta2: float = config.BETA2
    eps: float = config.ADAM_EPS
    val_fraction: float = config.VAL_FRACTION
    freeze_attention: bool = config.FREEZE_ATTENTION
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or not 0 <= self.lr_min <= max(self.lr, 0.0):
            raise ConfigError(f"need 0 <= lr_min <= lr, got lr={self.lr} lr_min={self.lr_min}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("AdamW needs betas in [0, 1) and eps > 0")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class RunMetrics:
    records: pd.DataFrame
    best_val_rel_mse: float
    best_epoch: int
    outdir: Path

    @property
    def final_val_rel_mse(self) -> float:
        return float(self.records["val_rel_mse"].iloc[-1])


# ── Metric ──────────────────────────────────────────────────────────────────

def rel_mse(pred: np.ndarray, truth: np.ndarray) -> float:
    """‖pred − truth‖₂ / ‖truth‖₂ over all grid values."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"rel_mse: prediction {pred.shape} and truth {truth.shape} differ")
    norm = np.linalg.norm(truth.ravel())
    if norm == 0.0:
        raise ContractError("rel_mse: truth has zero norm")
    return float(np.linalg.norm((pred - truth).ravel()) / norm)


# ── Optimizer ───────────────────────────────────────────────────────────────

def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               lr: float, beta1: float = config.BETA1, beta2: float = config.BETA2,
               eps: float = config.ADAM_EPS, weight_decay: float = config.WEIGHT_DECAY,
               ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW step over the parameters that have gradients; others pass through.

    θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + eps) with bias-corrected moments.
    """
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        theta = params[name]
        m = beta1 * state.m.get(name, np.zeros_like(theta)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(theta)) + (1.0 - beta2) * g * g
        new_params[name] = theta - lr * weight_decay * theta - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


def cosine_lr(t: int, total: int, lr0: float, lr_min: float) -> float:
    if total <= 0:
        return lr0
    if not 0 <= t <= total:
        raise ConfigError(f"cosine_lr: step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


# ── Data ────────────────────────────────────────────────────────────────────

def split_dataset(count: int, val_fraction: float = config.VAL_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    """Train/val index arrays; the validation split is the tail of the file."""
    if count < 2:
        raise ConfigError(f"need at least 2 samples to split into train and validation, got {count}")
    n_val = min(count - 1, max(1, int(round(count * val_fraction))))
    return np.arange(count - n_val), np.arange(count - n_val, count)


def evaluate(model: OperatorModel, a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-sample relative MSE in evaluation mode (dropout off)."""
    return np.array([rel_mse(forward(model, ai), ui) for ai, ui in zip(a, u)], dtype=np.float64)


def mean_field_baseline(u_train: np.ndarray, u_val: np.ndarray) -> float:
    """Mean relative MSE of predicting the training-set mean field for every sample."""
    mean_field = np.asarray(u_train, dtype=np.float64).mean(axis=0)
    return float(np.mean([rel_mse(mean_field, ui) for ui in u_val]))


# ── Checkpoints ─────────────────────────────────────────────────────────────

def model_checkpoint(model: OperatorModel, state: AdamState | None = None,
                     extra: dict | None = None) -> store.Checkpoint:
    values: dict[str, object] = dict(model.config.to_dict())
    for key, value in (extra or {}).items():
        values[f"{_STATE_PREFIX}{key}"] = value
    tensors = dict(model.params)
    if state is not None:
        values[f"{_STATE_PREFIX}adam_step"] = state.step
        for name in state.m:
            tensors[f"{_M_PREFIX}{name}"] = state.m[name]
        for name in state.v:
            tensors[f"{_V_PREFIX}{name}"] = state.v[name]
    return store.Checkpoint(config=values, tensors=tensors)


def model_config_from(ckpt: store.Checkpoint) -> ModelConfig:
    names = {f.name for f in fields(ModelConfig)}
    return ModelConfig.from_dict({k: v for k, v in ckpt.config.items() if k in names})


def load_model(path: str | os.PathLike, cfg: ModelConfig | None = None) -> OperatorModel:
    """Model from a checkpoint; with ``cfg`` the stored tensors must fit that config's shapes."""
    ckpt = store.load_checkpoint(path)
    cfg = model_config_from(ckpt) if cfg is None else cfg
    params = {k: v for k, v in ckpt.tensors.items() if not k.startswith((_M_PREFIX, _V_PREFIX))}
    store.check_shapes(init_params(cfg), params)
    return OperatorModel(cfg, params)


def _adam_state_from(ckpt: store.Checkpoint) -> AdamState:
    m = {k[len(_M_PREFIX):]: v for k, v in ckpt.tensors.items() if k.startswith(_M_PREFIX)}
    v = {k[len(_V_PREFIX):]: v for k, v in ckpt.tensors.items() if k.startswith(_V_PREFIX)}
    return AdamState(step=int(ckpt.config.get(f"{_STATE_PREFIX}adam_step", 0)), m=m, v=v)


# ── Training ────────────────────────────────────────────────────────────────

def _batch_loss(model: OperatorModel, graph: Graph, bound, a: np.ndarray, u: np.ndarray,
                rng: np.random.Generator) -> T.Var:
    """Mean over the batch of per-sample MSE, in one graph."""
    total = None
    for ai, ui in zip(a, u):
        loss = T.mse(apply(model, bound, ai, rng), ui)
        total = loss if total is None else T.add(total, loss)
    return T.scale(total, 1.0 / len(a))


def train(model: OperatorModel, a: np.ndarray, u: np.ndarray, cfg: TrainConfig,
          outdir: str | os.PathLike, resume: bool = False) -> RunMetrics:
    """Train in place; writes metrics.csv, last.ckpt and best.ckpt under ``outdir``.

    With ``resume`` and an existing last.ckpt, parameters, optimizer state and
    epoch numbering continue from it.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    metrics_path = outdir / METRICS_NAME
    n = a.shape[1]
    model.config.multipole_for(n)

    train_idx, val_idx = split_dataset(len(a), cfg.val_fraction)
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    trainable = is_sampler_param if cfg.freeze_attention else None
    if cfg.freeze_attention and not any(is_sampler_param(k) for k in model.params):
        raise ConfigError("freeze_attention needs learned sampler kernels (attention_kind=multipole, sampler_mode=learned_conv)")

    state = AdamState()
    start_epoch, best_val, best_epoch = 1, math.inf, 0
    last_path = outdir / LAST_NAME
    if resume and last_path.exists():
        ckpt = store.load_checkpoint(last_path)
        stored_cfg = model_config_from(ckpt)
        if stored_cfg != model.config:
            raise ConfigError(f"{last_path} was written for a different model config")
        model.params = load_model(last_path, model.config).params
        state = _adam_state_from(ckpt)
        start_epoch = int(ckpt.config[f"{_STATE_PREFIX}epoch"]) + 1
        best_val = float(ckpt.config[f"{_STATE_PREFIX}best_val_rel_mse"])
        best_epoch = int(ckpt.config[f"{_STATE_PREFIX}best_epoch"])
        store.truncate_metrics(metrics_path, start_epoch - 1)
        log.info("Resuming from %s at epoch %d", last_path, start_epoch)
    elif metrics_path.exists():
        metrics_path.unlink()

    log.info("Training %r on %d samples (val %d), %d epochs × %d steps",
             model, len(train_idx), len(val_idx), cfg.epochs, steps_per_epoch)

    for epoch in range(start_epoch, cfg.epochs + 1):
        started = time.perf_counter()
        order = np.random.default_rng(config.sub_seed(cfg.seed, "shuffle", epoch)).permutation(train_idx)
        loss_sum = 0.0
        lr = cfg.lr
        for b in range(steps_per_epoch):
            step = (epoch - 1) * steps_per_epoch + b
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
            rng = np.random.default_rng(config.sub_seed(cfg.seed, "dropout", step))

            g = Graph()
            bound = g.bind(model.params, trainable)
            loss = _batch_loss(model, g, bound, a[batch], u[batch], rng)
            value = loss.item()
            if not math.isfinite(value):
                path = store.save_checkpoint(outdir / LAST_GOOD_NAME, model_checkpoint(
                    model, state, {"epoch": epoch - 1, "step": step}))
                raise NonFiniteLossError(f"non-finite loss {value} at epoch {epoch} step {step}; "
                                         f"last good parameters saved to {path}", path)
            grads = g.backward(loss)
            model.params, state = adamw_step(model.params, grads, state, lr, cfg.beta1, cfg.beta2,
                                             cfg.eps, cfg.weight_decay)
            loss_sum += value * len(batch)

        train_mse = loss_sum / len(train_idx)
        val_rel_mse = float(evaluate(model, a[val_idx], u[val_idx]).mean())
        seconds = time.perf_counter() - started
        store.append_metrics(metrics_path, {"epoch": epoch, "lr": lr, "train_mse": train_mse,
                                            "val_rel_mse": val_rel_mse, "seconds": seconds})
        log.info("epoch %d/%d lr=%.3e train_mse=%.6e val_rel_mse=%.6e (%.1fs)",
                 epoch, cfg.epochs, lr, train_mse, val_rel_mse, seconds)

        if val_rel_mse < best_val:
            best_val, best_epoch = val_rel_mse, epoch
        extra = {"epoch": epoch, "best_val_rel_mse": best_val, "best_epoch": best_epoch,
                 "val_fraction": cfg.val_fraction}
        ckpt = model_checkpoint(model, state, extra)
        store.save_checkpoint(last_path, ckpt)
        if best_epoch == epoch:
            store.save_checkpoint(outdir / BEST_NAME, ckpt)

    return RunMetrics(records=store.read_metrics(metrics_path), best_val_rel_mse=best_val,
                      best_epoch=best_epoch, outdir=outdir)
