"""BCE loss, Adam with decoupled weight decay, and the single-sample loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .network import HAANet
from .tensor import Tensor, add, clamp, log, mul, softplus, sub, tsum


@dataclass
class TrainConfig:
    """Optimizer and loop settings; lr/weight_decay/beta1 are the paper defaults."""

    lr: float = 0.003
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 15
    seed: int = 0
    clamp_eps: float = 1e-7


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name, plus step count."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def bce_loss(y: Tensor, g: Tensor, clamp_eps: float = 1e-7) -> Tensor:
    """Pixel-mean binary cross-entropy of probabilities y against binary g.

    y is clamped into [clamp_eps, 1-clamp_eps] before the logs; g must be
    exactly 0/1 valued.
    """
    gd = g.data
    if not np.all((gd == 0.0) | (gd == 1.0)):
        raise ValueError("ground truth must be binary (0/1)")
    if y.shape != g.shape:
        raise ValueError(f"prediction {y.shape} and ground truth {g.shape} differ")
    n = y.size
    yc = clamp(y, clamp_eps, 1.0 - clamp_eps)
    pos = mul(Tensor(gd), log(yc))
    neg = mul(Tensor(1.0 - gd), log(yc.scale(-1.0).shift(1.0)))
    return tsum(add(pos, neg)).scale(-1.0 / n)


def bce_with_logits(logits: Tensor, g: Tensor) -> Tensor:
    """The same pixel-mean cross-entropy evaluated from pre-sigmoid scores.

    Equal in value to ``bce_loss(sigmoid(logits), g)`` away from the
    clamp, but its gradient (sigmoid(z) - g) stays alive when the head
    saturates, so the training loop uses this form.
    """
    gd = g.data
    if not np.all((gd == 0.0) | (gd == 1.0)):
        raise ValueError("ground truth must be binary (0/1)")
    if logits.shape != g.shape:
        raise ValueError(f"logits {logits.shape} and ground truth {g.shape} differ")
    n = logits.size
    return tsum(sub(softplus(logits), mul(Tensor(gd), logits))).scale(1.0 / n)


def adam_step(
    params: Sequence[Tuple[str, Tensor]], state: AdamState, cfg: TrainConfig
) -> None:
    """One Adam update over named parameters, reading their .grad buffers.

    Decoupled weight decay shrinks parameters before the adaptive update;
    missing grads count as zero. Moment buffers are created on first use
    and must keep their parameter's shape afterwards.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(
                f"optimizer state for {name} has shape {m.shape}, parameter is {p.data.shape}"
            )
        if cfg.weight_decay:
            p.data -= cfg.lr * cfg.weight_decay * p.data
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad * grad
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)


def _dice_percent(pred: np.ndarray, gt: np.ndarray) -> float:
    p = pred >= 0.5
    g = gt >= 0.5
    tp = np.sum(p & g)
    denom = 2 * tp + np.sum(p & ~g) + np.sum(~p & g)
    return 100.0 if denom == 0 else 200.0 * tp / denom


def fit(
    net: HAANet,
    train_samples: Sequence,
    cfg: TrainConfig,
    val_samples: Optional[Sequence] = None,
    log_path=None,
) -> List[Dict[str, float]]:
    """Train one sample per step over seeded-shuffled epochs.

    Returns one history row per epoch with mean loss, validation Dice,
    and the mean gate weights; optionally mirrors the rows to a CSV.
    """
    if not train_samples:
        raise ValueError("training needs a non-empty dataset")
    params = net.named_parameters()
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history: List[Dict[str, float]] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_samples))
        losses = []
        for i in order:
            sample = train_samples[i]
            logits = net.forward_logits(sample.image)
            loss = bce_with_logits(logits, sample.mask)
            value = loss.data.item()
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite loss at epoch {epoch}: {value}")
            loss.backward()
            adam_step(params, state, cfg)
            for _, p in params:
                p.grad = None
            losses.append(value)
        row = {
            "epoch": float(epoch),
            "mean_loss": float(np.mean(losses)),
            "val_dice": _validation_dice(net, val_samples),
            "gamma1_mean": float(np.mean([b.gamma1.data.item() for b in net.encoder])),
            "gamma2_mean": float(np.mean([b.gamma2.data.item() for b in net.encoder])),
        }
        history.append(row)
    if log_path is not None:
        write_training_log(log_path, history)
    return history


def _validation_dice(net: HAANet, val_samples) -> float:
    if not val_samples:
        return float("nan")
    scores = [
        _dice_percent(net.forward(s.image).data, s.mask.data) for s in val_samples
    ]
    return float(np.mean(scores))


def write_training_log(path, history: List[Dict[str, float]]) -> None:
    columns = ["epoch", "mean_loss", "val_dice", "gamma1_mean", "gamma2_mean"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([repr(row[c]) if c != "epoch" else int(row[c]) for c in columns])
