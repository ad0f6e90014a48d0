"""Symmetric contrastive pretraining of the encoder bundle on image-sentence pairs."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import AugmentationConfig, DatasetIndex, augment, sample_report_sentence
from .encoders import EncoderBundle, pixels_to_tensor
from .errors import ConfigError, DivergenceError
from .training import clone_state, epoch_order, param_groups, set_lr, warmup_cosine

log = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "split", "loss", "retrieval_top1"]
TEMPERATURE_BOUNDS = (1e-3, 1.0)


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    warmup_epochs: float = 1.0
    weight_decay: float = 0.1
    augment: bool = True
    val_batch_size: int = 64
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        if self.epochs < 0:
            raise ConfigError("pretrain.epochs must be >= 0")
        if self.batch_size < 2 or self.val_batch_size < 2:
            raise ConfigError("pretrain batch sizes must be >= 2 (in-batch negatives)")


def similarity_matrix(image_embeddings: torch.Tensor, text_embeddings: torch.Tensor,
                      temperature: float | torch.Tensor = 1.0) -> torch.Tensor:
    """B x B logits: entry (i, j) is <image_i, text_j> / temperature."""
    if image_embeddings.ndim != 2 or image_embeddings.shape != text_embeddings.shape:
        raise ValueError("expected two B x d matrices of equal shape")
    if image_embeddings.shape[0] < 2:
        raise ValueError("a contrastive batch needs at least 2 pairs")
    return image_embeddings @ text_embeddings.T / temperature


def contrastive_loss(logits: torch.Tensor) -> torch.Tensor:
    """Mean of the row-wise and column-wise cross-entropies, target = diagonal."""
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ValueError(f"expected a square logit matrix, got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    target = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def retrieval_top1(logits: torch.Tensor) -> float:
    """Fraction of rows whose largest entry is on the diagonal."""
    target = torch.arange(logits.shape[0], device=logits.device)
    return float((logits.argmax(1) == target).float().mean())


@dataclass
class PretrainResult:
    bundle: EncoderBundle
    metrics: list[dict[str, Any]]
    best_epoch: int | None
    state: dict[str, Any]


def _batch(bundle: EncoderBundle, dataset: DatasetIndex, records, sentences, cfg: PretrainConfig,
           rng: np.random.Generator | None) -> torch.Tensor:
    imgs = [dataset.pixels(r) for r in records]
    if rng is not None:
        imgs = [augment(x, cfg.augmentation, rng) for x in imgs]
    x = pixels_to_tensor(np.stack(imgs), bundle.config)
    img = bundle.embed_images(x)
    txt = bundle.embed_texts(sentences)
    return similarity_matrix(img, txt, bundle.temperature)


def _clamp_temperature(bundle: EncoderBundle) -> None:
    lo, hi = TEMPERATURE_BOUNDS
    with torch.no_grad():
        bundle.log_temperature.clamp_(math.log(lo), math.log(hi))


@torch.no_grad()
def evaluate_retrieval(bundle: EncoderBundle, dataset: DatasetIndex, seed: int,
                       batch_size: int = 64) -> tuple[float, float]:
    """Mean contrastive loss and in-batch top-1 retrieval over fixed held-out batches.

    Sentences are drawn once per (dataset, seed); only full batches count so
    chance level is exactly 1 / batch_size. A dataset smaller than one batch
    is scored as a single batch.
    """
    was_training = bundle.training
    bundle.eval()
    rng = np.random.default_rng([seed, 424242])
    records = list(dataset)
    sentences = [sample_report_sentence(r, rng) for r in records]
    n = len(records)
    size = batch_size if n >= batch_size else n
    losses, hits, rows = [], 0.0, 0
    for start in range(0, n - size + 1, size):
        sl = slice(start, start + size)
        logits = _batch(bundle, dataset, records[sl], sentences[sl], PretrainConfig(), None)
        losses.append(float(contrastive_loss(logits)))
        hits += retrieval_top1(logits) * size
        rows += size
    bundle.train(was_training)
    return float(np.mean(losses)), hits / rows


def _append_metrics(path: Path | None, rows: list[dict[str, Any]]) -> None:
    if path is None or not rows:
        return
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({"epoch": r["epoch"], "split": r["split"], "loss": f"{r['loss']:.6f}",
                        "retrieval_top1": f"{r['retrieval_top1']:.6f}"})


def pretrain(bundle: EncoderBundle, dataset: DatasetIndex, config: PretrainConfig,
             val: DatasetIndex | None = None, metrics_path: str | Path | None = None,
             resume: dict[str, Any] | None = None,
             on_epoch: Callable[[dict[str, Any]], None] | None = None) -> PretrainResult:
    """Train ``bundle`` in place; on return it holds the best-validation weights.

    Each epoch's batch composition, augmentation and sentence draws depend only
    on (seed, epoch). ``resume`` is the ``state`` of an earlier result and
    continues at the next epoch; ``on_epoch`` receives the same kind of state
    after every completed epoch (for periodic checkpoints). A non-finite loss restores the best (or last
    good) weights and raises DivergenceError.
    """
    metrics_path = Path(metrics_path) if metrics_path else None
    records = list(dataset)
    B = config.batch_size
    if len(records) < B:
        raise ConfigError(f"pretrain needs at least batch_size={B} training pairs, got {len(records)}")
    steps_per_epoch = len(records) // B
    total_steps = steps_per_epoch * config.epochs
    warmup = int(round(config.warmup_epochs * steps_per_epoch))

    optimizer = torch.optim.AdamW(param_groups(bundle.named_parameters(), config.weight_decay),
                                  lr=config.lr)
    start_epoch = 0
    best = {"metric": -1.0, "epoch": None, "weights": clone_state(bundle)}
    if resume:
        bundle.load_state_dict(resume["weights"])
        optimizer.load_state_dict(resume["optimizer"])
        start_epoch = resume["epoch"] + 1
        best = resume["best"]

    metrics: list[dict[str, Any]] = []
    last_good = clone_state(bundle)
    for epoch in range(start_epoch, config.epochs):
        bundle.train()
        order = epoch_order(len(records), steps_per_epoch * B, config.seed, epoch)
        rng = np.random.default_rng([config.seed, epoch, 1])
        losses, hits = [], 0.0
        for k in range(steps_per_epoch):
            batch = [records[i] for i in order[k * B:(k + 1) * B]]
            sentences = [sample_report_sentence(r, rng) for r in batch]
            set_lr(optimizer, config.lr, warmup_cosine(epoch * steps_per_epoch + k, total_steps, warmup))
            logits = _batch(bundle, dataset, batch, sentences, config,
                            rng if config.augment else None)
            if not torch.isfinite(logits).all():
                loss = torch.tensor(float("nan"))
            else:
                loss = contrastive_loss(logits)
            if not torch.isfinite(loss):
                bundle.load_state_dict(best["weights"] if best["epoch"] is not None else last_good)
                raise DivergenceError(f"non-finite contrastive loss at epoch {epoch}, step {k}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            _clamp_temperature(bundle)
            losses.append(float(loss.detach()))
            hits += retrieval_top1(logits.detach())
        rows = [{"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
                 "retrieval_top1": hits / steps_per_epoch}]
        score = rows[0]["retrieval_top1"]
        if val is not None and len(val) >= 2:
            vloss, vacc = evaluate_retrieval(bundle, val, config.seed, config.val_batch_size)
            rows.append({"epoch": epoch, "split": "validate", "loss": vloss, "retrieval_top1": vacc})
            score = vacc
        last_good = clone_state(bundle)
        if score > best["metric"]:
            best = {"metric": score, "epoch": epoch, "weights": last_good}
        metrics.extend(rows)
        _append_metrics(metrics_path, rows)
        log.info("epoch %d: %s", epoch, ", ".join(
            f"{r['split']} loss {r['loss']:.4f} top1 {r['retrieval_top1']:.3f}" for r in rows))
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "weights": last_good,
                      "optimizer": copy.deepcopy(optimizer.state_dict()), "best": best})

    if best["epoch"] is not None:
        bundle.load_state_dict(best["weights"])
    bundle.eval()
    state = {"epoch": config.epochs - 1 if config.epochs > start_epoch else start_epoch - 1,
             "weights": last_good, "optimizer": optimizer.state_dict(), "best": best}
    return PretrainResult(bundle, metrics, best["epoch"], state)
