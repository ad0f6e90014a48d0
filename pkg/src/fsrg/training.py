"""Optimizer and schedule helpers shared by pretraining and fine-tuning."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np
import torch
from torch import nn


def warmup_cosine(step: int, total_steps: int, warmup_steps: int) -> float:
    """Multiplier on the base learning rate: linear warmup, then cosine decay to 0."""
    if total_steps <= 0:
        return 1.0
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def param_groups(named: Iterable[tuple[str, nn.Parameter]], weight_decay: float) -> list[dict]:
    """Weight decay on matrices and kernels only; biases, norms and scalars are exempt."""
    decay, no_decay = [], []
    for _, p in named:
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 else no_decay).append(p)
    groups = []
    if decay:
        groups.append({"params": decay, "weight_decay": weight_decay})
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return groups


def set_lr(optimizer: torch.optim.Optimizer, base_lr: float, factor: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = base_lr * factor


def epoch_order(n_items: int, n_draws: int, seed: int, epoch: int) -> np.ndarray:
    """Indices for one epoch: concatenated permutations of the items, truncated.

    A pure function of (seed, epoch), independent of worker count.
    """
    rng = np.random.default_rng([seed, epoch, 7])
    reps = -(-n_draws // n_items)
    return np.concatenate([rng.permutation(n_items) for _ in range(reps)])[:n_draws]


def clone_state(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}
