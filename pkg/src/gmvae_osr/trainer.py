"""Adam-driven minibatch training with validation-plateau stopping."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DivergenceError
from .model import NETWORK_NAMES, GmvaeParams
from .objective import (OBJECTIVES, TERM_NAMES, draw_noise, elbo_terms, evaluate, loss_for,
                        per_sample_loss)
from .serialize import atomic_write_text
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss") + TERM_NAMES


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[Tensor],
              grads: Sequence[np.ndarray | None] | None = None) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ContractError("optimizer state, parameters and gradients must align")
    for i, g in enumerate(grads):
        if g is None:
            raise ContractError(f"parameter {i} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    lr: float = 1e-3
    seed: int = 0
    objective: str = "no_vprior"
    mc_samples: int = 1
    val_mc_samples: int = 1
    min_delta: float = 1e-4
    freeze: tuple[str, ...] = ()

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs, self.mc_samples, self.val_mc_samples) < 1:
            raise ContractError("batch_size, max_epochs and mc_samples must be positive")
        if self.patience < 0 or self.lr <= 0:
            raise ContractError("patience must be >= 0 and lr > 0")
        if self.objective not in OBJECTIVES:
            raise ContractError(f"objective must be one of {OBJECTIVES}")
        unknown = set(self.freeze) - set(NETWORK_NAMES)
        if unknown:
            raise ContractError(f"cannot freeze unknown networks {sorted(unknown)}")


@dataclass
class FitResult:
    params: GmvaeParams
    history: list[dict]
    best_epoch: int


def _as_xy(data, C: int, name: str):
    x, y = data
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y)).astype(int)
    if len(x) == 0:
        raise ContractError(f"{name} set is empty")
    if len(x) != len(y):
        raise ContractError(f"{name} set has {len(x)} samples but {len(y)} labels")
    if y.min() < 1 or y.max() > C:
        raise ContractError(f"{name} labels must lie in 1..{C}")
    return x, y


def validation_loss(params: GmvaeParams, x, y, config: TrainConfig) -> float:
    rng = np.random.default_rng([config.seed, 1])
    terms = evaluate(params, x, y, config.val_mc_samples, rng)
    return float(np.mean(per_sample_loss(terms, config.objective)))


def fit(params: GmvaeParams, train_set, val_set, config: TrainConfig) -> FitResult:
    """Train ``params`` in place and return them restored to the best validation epoch.

    Stops once the validation loss has failed to improve by more than
    ``min_delta`` for ``patience`` consecutive epochs, or at ``max_epochs``.
    """
    C = params.config.num_classes
    x, y = _as_xy(train_set, C, "training")
    vx, vy = _as_xy(val_set, C, "validation")
    params.frozen = frozenset(config.freeze)
    trainable = params.trainable()
    state = AdamState.for_params(trainable, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    cfg = params.config

    history: list[dict] = []
    best_val, best_epoch, best_arrays = math.inf, 0, params.arrays()
    plateau_ref, bad_epochs = math.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x))
        sums = dict.fromkeys(("loss",) + TERM_NAMES, 0.0)
        for b, start in enumerate(range(0, len(x), config.batch_size)):
            idx = order[start:start + config.batch_size]
            zn, wn = draw_noise(rng, config.mc_samples, len(idx), cfg.dim_z, cfg.dim_w)
            with Tape() as tape:
                terms = elbo_terms(params, x[idx], y[idx], zn, wn)
                loss = loss_for(terms, config.objective)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            for p in trainable:
                p.grad = None
            tape.backward(loss)
            # heads of classes absent from the batch receive no gradient
            adam_step(state, trainable,
                      [np.zeros_like(p.data) if p.grad is None else p.grad for p in trainable])
            sums["loss"] += value * len(idx)
            for n, v in terms.values().items():
                sums[n] += v * len(idx)
        val = validation_loss(params, vx, vy, config)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        row = {"epoch": epoch, "train_loss": sums["loss"] / len(x), "val_loss": val}
        row.update({n: sums[n] / len(x) for n in TERM_NAMES})
        history.append(row)
        log.debug("epoch %d train %.4f val %.4f", epoch, row["train_loss"], val)

        if val < best_val:
            best_val, best_epoch, best_arrays = val, epoch, params.arrays()
        if val < plateau_ref - config.min_delta:
            plateau_ref, bad_epochs = val, 0
        else:
            bad_epochs += 1
        if bad_epochs >= config.patience:
            break
    params.load_arrays(best_arrays)
    return FitResult(params, history, best_epoch)


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def write_history(history: Sequence[dict], path) -> Path:
    atomic_write_text(path, history_csv(history))
    return Path(path)
