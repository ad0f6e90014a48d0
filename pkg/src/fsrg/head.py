"""Prompt-initialised cosine classifier, the LSES loss and few-shot fine-tuning.

Each classifier row starts as the text embedding of one template sentence, so
before any training the class score is the cosine similarity between image and
prompt (zero-shot). Fine-tuning adjusts the rows and the image projection.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import read_container, write_container
from .data import AugmentationConfig, DatasetIndex, ImageRecord, LabelVector, augment
from .encoders import (EncoderBundle, bundle_from_parts, bundle_header, bundle_tensors,
                       encode_text, l2_normalize, pixels_to_tensor)
from .errors import CheckpointError, ConfigError, DatasetError, DivergenceError
from .templates import PromptSet, TemplateTree
from .training import epoch_order, param_groups, set_lr, warmup_cosine

log = logging.getLogger(__name__)

CLASSIFIER_KIND = "fsrg_classifier"


class PromptClassifier(nn.Module):
    """Bias-free linear layer whose rows are (re)normalised on every forward pass."""

    def __init__(self, weight: torch.Tensor, prompt_set: PromptSet, renormalize_weights: bool = True):
        super().__init__()
        if weight.ndim != 2 or weight.shape[0] != len(prompt_set):
            raise ValueError(f"weight must be {len(prompt_set)} x d, got {tuple(weight.shape)}")
        self.weight = nn.Parameter(weight.detach().clone().float())
        self.prompt_set = prompt_set
        self.renormalize_weights = renormalize_weights

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    def rows(self) -> torch.Tensor:
        return l2_normalize(self.weight) if self.renormalize_weights else self.weight

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return v @ self.rows().T


def init_classifier(prompt_set: PromptSet, bundle: EncoderBundle, random_init: bool = False,
                    seed: int = 0) -> PromptClassifier:
    """Rows = text embeddings of the prompts, or unit Gaussian rows for the ablation."""
    if len(set(prompt_set)) != len(prompt_set):
        raise ValueError("duplicate prompts would give identical classifier rows")
    if random_init:
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(len(prompt_set), bundle.d, generator=g) / bundle.d ** 0.5
        w = l2_normalize(w)
    else:
        w = torch.from_numpy(encode_text(bundle, list(prompt_set)))
    return PromptClassifier(w, prompt_set)


@torch.no_grad()
def classify(classifier: PromptClassifier, image_embedding: np.ndarray | torch.Tensor) -> np.ndarray:
    """Cosine similarity to every class row for one (d,) or many (N, d) embeddings."""
    v = torch.as_tensor(np.asarray(image_embedding) if not torch.is_tensor(image_embedding)
                        else image_embedding, dtype=classifier.weight.dtype)
    if v.shape[-1] != classifier.d:
        raise ValueError(f"embedding dimension {v.shape[-1]} != classifier dimension {classifier.d}")
    return classifier(v).numpy()


def lses_loss(s, y, gamma: float = 50.0, mask=None):
    """Log-Sum-Exp Sign loss, log(1 + sum_i exp(-y_i * gamma * s_i)).

    ``s`` and ``y`` are (C,) or (N, C); rows are averaged. Masked-out classes
    (mask False) drop out of the sum. The sum is evaluated as
    ``m + log1p(sum of the other shifted terms)`` where ``m`` is the largest
    exponent (including the constant 0), which neither overflows for large
    positive exponents nor rounds 1 + tiny to 1. Returns a tensor for tensor
    input, otherwise a float.
    """
    if gamma <= 0:
        raise ConfigError(f"LSES gamma must be > 0, got {gamma}")
    as_float = not torch.is_tensor(s)
    s_t = torch.as_tensor(s, dtype=torch.float64) if as_float else s
    y_t = torch.as_tensor(y, dtype=s_t.dtype, device=s_t.device)
    if s_t.shape != y_t.shape:
        raise ValueError(f"s has shape {tuple(s_t.shape)} but y has {tuple(y_t.shape)}")
    if s_t.ndim == 1:
        s_t, y_t = s_t[None], y_t[None]
    x = -y_t * gamma * s_t
    if mask is not None:
        m_t = torch.as_tensor(mask, dtype=torch.bool, device=s_t.device).reshape(x.shape)
        x = torch.where(m_t, x, torch.full_like(x, float("-inf")))
    terms = torch.cat([torch.zeros_like(x[:, :1]), x], dim=1)
    top, arg = terms.max(dim=1, keepdim=True)
    rest = torch.exp(terms - top).scatter(1, arg, 0.0).sum(1)
    loss = (top.squeeze(1) + torch.log1p(rest)).mean()
    return float(loss) if as_float else loss


def lses_gradient(s: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    """Closed-form dL/ds for a single (C,) vector."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x = -y * gamma * s
    top = max(0.0, x.max())
    e = np.exp(x - top)
    return -y * gamma * e / (np.exp(-top) + e.sum())


def predict_probabilities(tree: TemplateTree, s: np.ndarray, gamma: float = 50.0) -> np.ndarray:
    """Softmax of gamma*s inside each exclusive group, logistic sigmoid(gamma*s) elsewhere."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != tree.num_classes:
        raise ValueError(f"expected {tree.num_classes} scores, got {s.shape[-1]}")
    z = gamma * s
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    for group in tree.exclusive_groups():
        g = z[..., group]
        e = np.exp(g - g.max(axis=-1, keepdims=True))
        p[..., group] = e / e.sum(axis=-1, keepdims=True)
    return p


def template_loss(s: torch.Tensor, y: torch.Tensor, mask: torch.Tensor, tree: TemplateTree,
                  gamma: float) -> torch.Tensor:
    """LSES over non-exclusive classes plus softmax cross-entropy per exclusive group.

    A row contributes to a group's cross-entropy only when exactly one valid
    class of the group is positive.
    """
    total = s.new_zeros(())
    free = tree.non_exclusive_indices()
    if free:
        total = total + lses_loss(s[:, free], y[:, free], gamma, mask[:, free])
    for group in tree.exclusive_groups():
        pos = (y[:, group] == 1) & mask[:, group]
        ok = pos.sum(1) == 1
        if bool(ok.any()):
            total = total + F.cross_entropy(gamma * s[ok][:, group], pos[ok].float().argmax(1))
    return total


# -- fine-tuning ---------------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 256
    gamma: float = 50.0
    warmup_epochs: float = 1.0
    weight_decay: float = 0.0
    epoch_images_per_class: int = 128
    train_trunk: bool = False
    augment: bool = True
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        if self.gamma <= 0:
            raise ConfigError("finetune.gamma must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.epoch_images_per_class < 1:
            raise ConfigError("finetune: epochs >= 0, batch_size >= 1, epoch_images_per_class >= 1")


@dataclass
class FinetuneResult:
    classifier: PromptClassifier
    bundle: EncoderBundle
    metrics: list[dict[str, Any]]
    best_epoch: int | None


@torch.no_grad()
def image_features(bundle: EncoderBundle, dataset: DatasetIndex, records: Sequence[ImageRecord],
                   batch_size: int = 256) -> torch.Tensor:
    """Trunk features (before projection) of un-augmented images, inference mode."""
    was_training = bundle.training
    bundle.eval()
    out = []
    for i in range(0, len(records), batch_size):
        x = np.stack([dataset.pixels(r) for r in records[i:i + batch_size]])
        out.append(bundle.image_features(pixels_to_tensor(x, bundle.config)))
    bundle.train(was_training)
    return torch.cat(out) if out else torch.zeros(0, bundle.image_encoder.out_dim)


@torch.no_grad()
def score_dataset(classifier: PromptClassifier, bundle: EncoderBundle, dataset: DatasetIndex,
                  features: torch.Tensor | None = None) -> np.ndarray:
    """(N, C) cosine similarities for every record of ``dataset``."""
    if features is None:
        features = image_features(bundle, dataset, list(dataset))
    return classifier(bundle.embed_image_features(features)).numpy()


def finetune(classifier: PromptClassifier, bundle: EncoderBundle,
             episode: Sequence[tuple[ImageRecord, LabelVector]], config: FinetuneConfig,
             tree: TemplateTree, pixels: DatasetIndex, val: DatasetIndex | None = None) -> FinetuneResult:
    """Fine-tune copies of the classifier and image projection on one episode.

    An epoch shows ``epoch_images_per_class * C`` images drawn from the episode
    (concatenated shuffles). The trunk stays frozen unless ``train_trunk``.
    After every epoch the validation metric (see ``evaluation.evaluate_template``)
    decides which weights are returned. Inputs are not modified.
    """
    from .evaluation import ScoredPredictions, evaluate_template

    if not episode:
        raise DatasetError("cannot fine-tune on an empty episode")
    classifier = copy.deepcopy(classifier)
    bundle = copy.deepcopy(bundle)
    for p in bundle.parameters():
        p.requires_grad_(False)
    trainable = [("classifier.weight", classifier.weight),
                 ("image_projection.weight", bundle.image_projection.weight)]
    bundle.image_projection.weight.requires_grad_(True)
    if config.train_trunk:
        for name, p in bundle.image_encoder.named_parameters():
            p.requires_grad_(True)
            trainable.append((f"image_encoder.{name}", p))
    optimizer = torch.optim.AdamW(param_groups(trainable, config.weight_decay), lr=config.lr)

    n_epoch = config.epoch_images_per_class * classifier.num_classes
    B = config.batch_size
    steps_per_epoch = -(-n_epoch // B)
    total = steps_per_epoch * config.epochs
    warmup = int(round(config.warmup_epochs * steps_per_epoch))
    ys = torch.as_tensor(np.stack([lab.y for _, lab in episode]), dtype=torch.float32)
    ms = torch.as_tensor(np.stack([lab.valid_mask for _, lab in episode]))
    base = [pixels.pixels(r) for r, _ in episode]

    val_feats = val_preds = None
    if val is not None and len(val):
        val_feats = image_features(bundle, val, list(val))
        vy, vm = val.label_matrix()
        val_ids = [r.image_id for r in val]

    def snapshot():
        return (classifier.weight.detach().clone(), copy.deepcopy(bundle.image_encoder.state_dict())
                if config.train_trunk else None, bundle.image_projection.weight.detach().clone())

    def restore(snap):
        with torch.no_grad():
            classifier.weight.copy_(snap[0])
            bundle.image_projection.weight.copy_(snap[2])
        if snap[1] is not None:
            bundle.image_encoder.load_state_dict(snap[1])

    metrics: list[dict[str, Any]] = []
    best = {"metric": -np.inf, "epoch": None, "snap": snapshot()}
    for epoch in range(config.epochs):
        order = epoch_order(len(episode), n_epoch, config.seed, epoch)
        rng = np.random.default_rng([config.seed, epoch, 3])
        bundle.image_encoder.train(config.train_trunk)
        losses = []
        for k in range(steps_per_epoch):
            idx = order[k * B:(k + 1) * B]
            imgs = [base[i] for i in idx]
            if config.augment:
                imgs = [augment(x, config.augmentation, rng) for x in imgs]
            x = pixels_to_tensor(np.stack(imgs), bundle.config)
            set_lr(optimizer, config.lr, warmup_cosine(epoch * steps_per_epoch + k, total, warmup))
            if config.train_trunk:
                feats = bundle.image_features(x)
            else:
                with torch.no_grad():
                    feats = bundle.image_features(x)
            s = classifier(bundle.embed_image_features(feats))
            loss = template_loss(s, ys[idx], ms[idx], tree, config.gamma)
            if not torch.isfinite(loss):
                restore(best["snap"])
                raise DivergenceError(f"non-finite fine-tuning loss at epoch {epoch}, step {k}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        row: dict[str, Any] = {"epoch": epoch, "loss": float(np.mean(losses))}
        if val_feats is not None:
            bundle.eval()
            if config.train_trunk:
                val_feats = image_features(bundle, val, list(val))
            with torch.no_grad():
                scores = classifier(bundle.embed_image_features(val_feats)).numpy()
            val_preds = ScoredPredictions(val_ids, scores, vy, vm)
            row["val_macro_auc"] = evaluate_template(tree, val_preds, config.gamma)["macro_auc"]
            if row["val_macro_auc"] > best["metric"]:
                best = {"metric": row["val_macro_auc"], "epoch": epoch, "snap": snapshot()}
        metrics.append(row)
        log.debug("finetune epoch %d: %s", epoch, row)
    if val_feats is not None and best["epoch"] is not None:
        restore(best["snap"])
    bundle.eval()
    for p in bundle.parameters():
        p.requires_grad_(False)
    classifier.weight.requires_grad_(False)
    return FinetuneResult(classifier, bundle, metrics, best["epoch"])


# -- checkpoints -----------------------------------------------------------------

def save_classifier(classifier: PromptClassifier, bundle: EncoderBundle, path: str | Path,
                    extra: dict[str, Any] | None = None) -> None:
    """Self-describing checkpoint: encoder bundle + classifier rows + prompt list."""
    header = bundle_header(bundle)
    header.update({"kind": CLASSIFIER_KIND, "prompts": list(classifier.prompt_set),
                   "renormalize_weights": classifier.renormalize_weights, "extra": extra or {}})
    tensors = bundle_tensors(bundle)
    tensors["classifier.weight"] = classifier.weight.detach().cpu().numpy()
    write_container(path, header, tensors)


def load_checkpoint(path: str | Path) -> tuple[EncoderBundle, PromptClassifier | None, dict]:
    """Bundle, classifier (None for a pretrain-only bundle) and the raw header."""
    header, tensors = read_container(path)
    kind = header.get("kind")
    if kind not in ("encoder_bundle", CLASSIFIER_KIND):
        raise CheckpointError(f"{path}: unexpected checkpoint kind {kind!r}")
    bundle = bundle_from_parts(header, tensors, path)
    classifier = None
    if kind == CLASSIFIER_KIND:
        w = torch.from_numpy(tensors["classifier.weight"])
        classifier = PromptClassifier(w, PromptSet(tuple(header["prompts"])),
                                      header.get("renormalize_weights", True))
        classifier.weight.requires_grad_(False)
    return bundle, classifier, header
