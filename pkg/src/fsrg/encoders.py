"""Image and text encoders projected into a shared unit-norm embedding space.

The reference encoders are deliberately small so that a full pretraining run
on synthetic data fits on a laptop CPU. Anything with the same interface can
be swapped in: the image side needs ``features(pixels) -> (N, d_img)`` and the
text side ``features(token_ids, mask) -> (N, d_txt)``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import read_container, write_container
from .errors import CheckpointError, ConfigError

log = logging.getLogger(__name__)

PAD, OOV = "<pad>", "<oov>"
BUNDLE_KIND = "encoder_bundle"
BUNDLE_SCHEMA = 1
_WORD = re.compile(r"^\W+|\W+$")


@dataclass
class EncoderConfig:
    d: int = 128
    in_channels: int = 1
    resolution: int = 224
    image_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    pool_size: int = 3
    text_width: int = 128
    max_length: int = 32
    temperature: float = 0.07

    def __post_init__(self):
        if self.d < 1 or self.text_width < 1 or self.max_length < 1:
            raise ConfigError("encoder: d, text_width and max_length must be positive")
        if not 4 <= len(self.image_widths) <= 6:
            raise ConfigError("encoder.image_widths: expected 4 to 6 stages")
        if self.resolution < 2 ** len(self.image_widths):
            raise ConfigError("encoder.resolution too small for the number of stages")


class Tokenizer:
    """Lowercase whitespace tokenizer over a fixed vocabulary.

    Leading and trailing punctuation is stripped from each word. Unknown words
    map to the out-of-vocabulary id; id 0 is padding.
    """

    def __init__(self, vocab: Sequence[str], max_length: int = 32):
        vocab = list(vocab)
        if vocab[:2] != [PAD, OOV]:
            vocab = [PAD, OOV] + [w for w in vocab if w not in (PAD, OOV)]
        self.vocab = vocab
        self.max_length = max_length
        self._ids = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def build(cls, sentences: Iterable[str], max_length: int = 32) -> Tokenizer:
        words = sorted({w for s in sentences for w in cls.split(s)})
        return cls(words, max_length)

    @staticmethod
    def split(sentence: str) -> list[str]:
        out = []
        for raw in sentence.lower().split():
            w = _WORD.sub("", raw)
            if w:
                out.append(w)
        return out

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.vocab).encode("utf-8")).hexdigest()[:16]

    def encode(self, sentence: str) -> list[int]:
        if not sentence or not sentence.strip():
            raise ValueError("cannot encode an empty sentence")
        words = self.split(sentence)
        if not words:
            raise ValueError(f"sentence {sentence!r} has no tokens")
        if len(words) > self.max_length:
            log.warning("sentence truncated from %d to %d tokens: %r",
                        len(words), self.max_length, sentence)
            words = words[:self.max_length]
        return [self._ids.get(w, 1) for w in words]

    def batch(self, sentences: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        encoded = [self.encode(s) for s in sentences]
        length = max(len(e) for e in encoded)
        ids = torch.zeros(len(encoded), length, dtype=torch.long)
        for i, e in enumerate(encoded):
            ids[i, :len(e)] = torch.tensor(e, dtype=torch.long)
        return ids, ids != 0


class ImageEncoder(nn.Module):
    """Plain conv net; keeps a coarse spatial grid so location survives pooling."""

    def __init__(self, in_channels: int, widths: Sequence[int], pool_size: int):
        super().__init__()
        layers: list[nn.Module] = []
        c = in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w),
                       nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            c = w
        self.stages = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(pool_size)
        self.out_dim = c * pool_size * pool_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.stages(x)).flatten(1)


class TextEncoder(nn.Module):
    """Token plus position embeddings, a per-token residual MLP, masked mean pooling."""

    def __init__(self, vocab_size: int, width: int, max_length: int):
        super().__init__()
        self.token = nn.Embedding(vocab_size, width, padding_idx=0)
        self.position = nn.Embedding(max_length, width)
        self.norm = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))
        self.out_norm = nn.LayerNorm(width)
        self.out_dim = width
        nn.init.normal_(self.token.weight, std=0.02)
        nn.init.normal_(self.position.weight, std=0.01)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1], device=ids.device)
        h = self.token(ids) + self.position(pos)[None]
        h = h + self.mlp(self.norm(h))
        m = mask.unsqueeze(-1).to(h.dtype)
        pooled = (h * m).sum(1) / m.sum(1).clamp_min(1.0)
        return self.out_norm(pooled)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Unit-normalize along ``dim``; a zero vector is an error, never epsilon-padded."""
    norm = x.norm(dim=dim, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("cannot normalize a zero vector (encoder produced all-zero features)")
    return x / norm


class EncoderBundle(nn.Module):
    def __init__(self, config: EncoderConfig, tokenizer: Tokenizer):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        self.image_encoder = ImageEncoder(config.in_channels, config.image_widths, config.pool_size)
        self.text_encoder = TextEncoder(len(tokenizer), config.text_width, config.max_length)
        self.image_projection = nn.Linear(self.image_encoder.out_dim, config.d, bias=False)
        self.text_projection = nn.Linear(self.text_encoder.out_dim, config.d, bias=False)
        # log of the contrastive temperature, trained during pretraining only
        self.log_temperature = nn.Parameter(torch.tensor(math.log(config.temperature)))

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def image_features(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(pixels)

    def embed_image_features(self, features: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.image_projection(features))

    def embed_images(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.embed_image_features(self.image_features(pixels))

    def embed_texts(self, sentences: Sequence[str]) -> torch.Tensor:
        ids, mask = self.tokenizer.batch(sentences)
        ids, mask = ids.to(self.log_temperature.device), mask.to(self.log_temperature.device)
        return l2_normalize(self.text_projection(self.text_encoder(ids, mask)))


def build_bundle(config: EncoderConfig, sentences: Iterable[str], seed: int = 0) -> EncoderBundle:
    """Fresh bundle with a vocabulary built from ``sentences``; init is seeded."""
    tokenizer = Tokenizer.build(sentences, config.max_length)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EncoderBundle(config, tokenizer)


def pixels_to_tensor(pixels: np.ndarray | torch.Tensor, config: EncoderConfig) -> torch.Tensor:
    """(H, W), (N, H, W), (H, W, C) or (N, H, W, C) array -> (N, C, H, W) float tensor."""
    x = torch.as_tensor(np.asarray(pixels) if not torch.is_tensor(pixels) else pixels,
                        dtype=torch.float32)
    if config.in_channels == 1:
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise ValueError(f"expected (H, W) or (N, H, W) grayscale pixels, got {tuple(x.shape)}")
        x = x[:, None]
    else:
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != config.in_channels:
            raise ValueError(f"expected (N, H, W, {config.in_channels}) pixels, got {tuple(x.shape)}")
        x = x.permute(0, 3, 1, 2)
    r = config.resolution
    if tuple(x.shape[-2:]) != (r, r):
        raise ValueError(f"pixels must be {r}x{r}, got {tuple(x.shape[-2:])}")
    return x


@torch.no_grad()
def encode_image(bundle: EncoderBundle, pixels: np.ndarray | torch.Tensor) -> np.ndarray:
    """Unit embedding(s) for one image (H, W) or a batch (N, H, W); inference mode."""
    single = np.ndim(pixels) == (2 if bundle.config.in_channels == 1 else 3)
    was_training = bundle.training
    bundle.eval()
    try:
        x = pixels_to_tensor(pixels, bundle.config).to(bundle.log_temperature.device)
        v = bundle.embed_images(x).cpu().numpy()
    finally:
        bundle.train(was_training)
    return v[0] if single else v


@torch.no_grad()
def encode_text(bundle: EncoderBundle, sentence: str | Sequence[str]) -> np.ndarray:
    single = isinstance(sentence, str)
    sentences = [sentence] if single else list(sentence)
    was_training = bundle.training
    bundle.eval()
    try:
        v = bundle.embed_texts(sentences).cpu().numpy()
    finally:
        bundle.train(was_training)
    return v[0] if single else v


def bundle_header(bundle: EncoderBundle) -> dict:
    return {"kind": BUNDLE_KIND, "schema": BUNDLE_SCHEMA, "config": asdict(bundle.config),
            "d": bundle.d, "vocab": bundle.tokenizer.vocab,
            "vocab_hash": bundle.tokenizer.vocab_hash}


def bundle_tensors(bundle: EncoderBundle) -> dict[str, np.ndarray]:
    return {f"bundle.{k}": v.detach().cpu().numpy() for k, v in bundle.state_dict().items()}


def bundle_from_parts(header: dict, tensors: dict[str, np.ndarray], path: str | Path = "",
                      d: int | None = None) -> EncoderBundle:
    if header.get("schema") != BUNDLE_SCHEMA:
        raise CheckpointError(f"{path}: bundle schema {header.get('schema')}, expected {BUNDLE_SCHEMA}")
    config = EncoderConfig(**header["config"])
    if header.get("d") != config.d:
        raise ConfigError(f"{path}: header d={header.get('d')} disagrees with config d={config.d}")
    if d is not None and d != config.d:
        raise ConfigError(f"{path}: checkpoint has d={config.d}, expected d={d}")
    tokenizer = Tokenizer(header["vocab"], config.max_length)
    if tokenizer.vocab_hash != header.get("vocab_hash"):
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    bundle = EncoderBundle(config, tokenizer)
    state = {k[len("bundle."):]: torch.from_numpy(v) for k, v in tensors.items()
             if k.startswith("bundle.")}
    own = bundle.state_dict()
    for k, v in state.items():
        if k in own and tuple(own[k].shape) != tuple(v.shape):
            raise ConfigError(f"{path}: tensor {k} has shape {tuple(v.shape)}, "
                              f"config implies {tuple(own[k].shape)}")
    try:
        bundle.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    bundle.eval()
    return bundle


def save_bundle(bundle: EncoderBundle, path: str | Path) -> None:
    write_container(path, bundle_header(bundle), bundle_tensors(bundle))


def load_bundle(path: str | Path, d: int | None = None) -> EncoderBundle:
    header, tensors = read_container(path)
    if header.get("kind") not in (BUNDLE_KIND, "fsrg_classifier"):
        raise CheckpointError(f"{path}: unexpected checkpoint kind {header.get('kind')!r}")
    return bundle_from_parts(header, tensors, path, d)
