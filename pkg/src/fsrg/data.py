"""Dataset ingestion, label vectors, augmentation and episode sampling.

Label files are newline-delimited JSON, one image per line::

    {"image_id": "img_00001",
     "split": "train",                                   # optional
     "findings": [{"attribute": "consolidation", "location": "left lung", "polarity": 1},
                  {"prompt": "There is mild cardiomegaly.", "polarity": 1}],
     "sentences": [{"text": "Consolidation in the left lung.", "has_finding": true}]}

A finding names either an (attribute, location) pair of a product group or a
literal prompt. Polarity is 1 (present), -1 (explicitly absent) or 0
(uncertain; the class is masked out). Classes not mentioned are negative.
Images live at ``<image_root>/<image_id>.png``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DatasetError
from .templates import PromptSet, product_sentence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Finding:
    attribute: str | None
    location: str | None
    polarity: int = 1
    prompt: str | None = None

    def sentence(self) -> str:
        if self.prompt is not None:
            return self.prompt
        return product_sentence(self.attribute, self.location)

    def to_json(self) -> dict[str, Any]:
        if self.prompt is not None:
            return {"prompt": self.prompt, "polarity": self.polarity}
        return {"attribute": self.attribute, "location": self.location, "polarity": self.polarity}


@dataclass
class LabelVector:
    y: np.ndarray            # int8, values in {+1, -1}
    valid_mask: np.ndarray   # bool

    @classmethod
    def negative(cls, num_classes: int) -> LabelVector:
        return cls(-np.ones(num_classes, dtype=np.int8), np.ones(num_classes, dtype=bool))

    def positives(self) -> np.ndarray:
        return np.flatnonzero((self.y == 1) & self.valid_mask)


@dataclass
class ImageRecord:
    image_id: str
    image_path: Path
    findings: list[Finding]
    report_sentences: list[tuple[str, bool]]
    split: str = "train"
    labels: LabelVector | None = None
    unmapped: list[Finding] = field(default_factory=list)


@dataclass
class AugmentationConfig:
    crop_min_area_fraction: float = 0.75
    max_rotation_degrees: float = 15.0
    brightness_jitter: float = 0.10
    contrast_jitter: float = 0.20
    saturation_jitter: float = 0.20

    def __post_init__(self):
        for name in ("crop_min_area_fraction", "brightness_jitter", "contrast_jitter",
                     "saturation_jitter"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"augmentation.{name} must be in [0, 1], got {v}")
        if self.crop_min_area_fraction == 0.0:
            raise ValueError("augmentation.crop_min_area_fraction must be > 0")
        if self.max_rotation_degrees < 0:
            raise ValueError("augmentation.max_rotation_degrees must be >= 0")


@dataclass
class EpisodeSpec:
    k: int
    classes: list[int]
    seed: int = 0
    epoch_images_per_class: int = 128
    sampled: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("EpisodeSpec.k must be >= 1")
        if not self.classes:
            raise ValueError("EpisodeSpec.classes must not be empty")


# -- images ------------------------------------------------------------------

def preprocess_image(img: Image.Image, resolution: int, channels: int = 1) -> np.ndarray:
    """Pad to square (black), resize to ``resolution`` and scale to [-1, 1]."""
    img = img.convert("L" if channels == 1 else "RGB")
    w, h = img.size
    if w != h:
        side = max(w, h)
        canvas = Image.new(img.mode, (side, side), 0)
        canvas.paste(img, ((side - w) // 2, (side - h) // 2))
        img = canvas
    if img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32)
    return arr / 127.5 - 1.0


def load_image(path: str | Path, resolution: int, channels: int = 1) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return preprocess_image(img, resolution, channels)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


# -- ingestion ---------------------------------------------------------------

def _parse_finding(obj: Any, where: str) -> Finding:
    if not isinstance(obj, dict):
        raise DatasetError(f"{where}: finding must be an object")
    polarity = obj.get("polarity", 1)
    if polarity not in (1, -1, 0):
        raise DatasetError(f"{where}: polarity must be 1, -1 or 0, got {polarity!r}")
    if "prompt" in obj:
        if not isinstance(obj["prompt"], str):
            raise DatasetError(f"{where}: prompt must be a string")
        return Finding(None, None, polarity, obj["prompt"])
    if not isinstance(obj.get("attribute"), str) or not isinstance(obj.get("location"), str):
        raise DatasetError(f"{where}: finding needs string 'attribute' and 'location' (or 'prompt')")
    return Finding(obj["attribute"], obj["location"], polarity)


def build_label_vector(findings: Sequence[Finding], prompt_set: PromptSet,
                       strict: bool = False, image_id: str = "?") -> tuple[LabelVector, list[Finding]]:
    """Closed-world label vector: listed positives are +1, everything else -1.

    Findings that name no class in ``prompt_set`` are returned in the second
    element (and logged), or raise when ``strict``.
    """
    index = {s: i for i, s in enumerate(prompt_set)}
    labels = LabelVector.negative(len(prompt_set))
    unmapped = []
    for f in findings:
        ci = index.get(f.sentence())
        if ci is None:
            msg = f"{image_id}: finding {f.to_json()} matches no prompt"
            if strict:
                raise DatasetError(msg)
            log.warning("%s; excluded from labels", msg)
            unmapped.append(f)
            continue
        if f.polarity == 0:
            labels.valid_mask[ci] = False
        else:
            labels.y[ci] = f.polarity
    return labels, unmapped


class DatasetIndex:
    """Immutable view over ImageRecords with lazily loaded, cached pixels."""

    def __init__(self, records: list[ImageRecord], prompt_set: PromptSet, resolution: int = 224,
                 channels: int = 1):
        self.records = records
        self.prompt_set = prompt_set
        self.resolution = resolution
        self.channels = channels
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> ImageRecord:
        return self.records[i]

    def split(self, name: str) -> DatasetIndex:
        sub = DatasetIndex([r for r in self.records if r.split == name], self.prompt_set,
                           self.resolution, self.channels)
        sub._cache = self._cache
        return sub

    def pixels(self, record: ImageRecord) -> np.ndarray:
        arr = self._cache.get(record.image_id)
        if arr is None:
            arr = load_image(record.image_path, self.resolution, self.channels)
            arr.setflags(write=False)
            self._cache[record.image_id] = arr
        return arr

    def label_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        y = np.stack([r.labels.y for r in self.records])
        m = np.stack([r.labels.valid_mask for r in self.records])
        return y, m


def load_dataset(label_path: str | Path, image_root: str | Path, prompt_set: PromptSet,
                 resolution: int = 224, strict: bool = False, channels: int = 1) -> DatasetIndex:
    label_path, image_root = Path(label_path), Path(image_root)
    records = []
    seen = set()
    missing = []
    with open(label_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{label_path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: {exc.msg}") from exc
            for key in ("image_id", "findings", "sentences"):
                if key not in obj:
                    raise DatasetError(f"{where}: missing required key {key!r}")
            image_id = obj["image_id"]
            if image_id in seen:
                raise DatasetError(f"{where}: duplicate image_id {image_id!r}")
            seen.add(image_id)
            findings = [_parse_finding(f, f"{where} findings[{k}]")
                        for k, f in enumerate(obj["findings"])]
            sentences = []
            for k, s in enumerate(obj["sentences"]):
                if not isinstance(s, dict) or not isinstance(s.get("text"), str):
                    raise DatasetError(f"{where} sentences[{k}]: expected {{text, has_finding}}")
                sentences.append((s["text"], bool(s.get("has_finding", False))))
            path = image_root / f"{image_id}.png"
            if not path.is_file():
                missing.append(image_id)
            labels, unmapped = build_label_vector(findings, prompt_set, strict, image_id)
            records.append(ImageRecord(image_id, path, findings, sentences,
                                       obj.get("split", "train"), labels, unmapped))
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise DatasetError(f"{len(missing)} image file(s) missing under {image_root}: {shown}")
    return DatasetIndex(records, prompt_set, resolution, channels)


# -- augmentation ------------------------------------------------------------

def sample_crop_box(height: int, width: int, min_area_fraction: float,
                    rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Random crop (top, left, h, w) covering at least ``min_area_fraction`` of the image.

    Aspect ratio is drawn log-uniformly from [3/4, 4/3] and clipped to the
    image; the area bound is enforced after integer rounding.
    """
    area = height * width
    if min_area_fraction >= 1.0 or height < 2 or width < 2:
        return 0, 0, height, width
    target = area * rng.uniform(min_area_fraction, 1.0)
    ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    w = min(width, int(math.ceil(math.sqrt(target * ratio))))
    h = min(height, int(math.ceil(target / w)))
    while h * w < min_area_fraction * area:
        if h < height:
            h += 1
        else:
            w += 1
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def _warp(channel: np.ndarray, box: tuple[int, int, int, int], angle_deg: float,
          out_shape: tuple[int, int], fill: float) -> np.ndarray:
    top, left, h, w = box
    oh, ow = out_shape
    # output pixel centre -> crop coordinates (rotated about the crop centre)
    sy, sx = h / oh, w / ow
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    scale_rot = np.array([[c * sy, -s * sx], [s * sy, c * sx]])
    out_centre = np.array([(oh - 1) / 2, (ow - 1) / 2])
    in_centre = np.array([top + (h - 1) / 2, left + (w - 1) / 2])
    offset = in_centre - scale_rot @ out_centre
    return ndimage.affine_transform(channel, scale_rot, offset=offset, output_shape=out_shape,
                                    order=1, mode="constant", cval=fill)


def resize(pixels: np.ndarray, size: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    if (h, w) == (size, size):
        return pixels.astype(np.float32, copy=True)
    box = (0, 0, h, w)
    chans = [pixels] if pixels.ndim == 2 else [pixels[..., k] for k in range(pixels.shape[2])]
    out = [_warp(ch.astype(np.float64), box, 0.0, (size, size), -1.0) for ch in chans]
    return (out[0] if pixels.ndim == 2 else np.stack(out, -1)).astype(np.float32)


def augment(pixels: np.ndarray, config: AugmentationConfig, rng: np.random.Generator,
            output_size: int | None = None) -> np.ndarray:
    """Random crop + resize, rotation, then brightness/contrast/saturation jitter.

    ``pixels`` is (H, W) grayscale or (H, W, 3) RGB in [-1, 1]. Exposed
    border after rotation is filled with -1 (black). Saturation jitter only
    touches RGB input. Output is clipped to [-1, 1].
    """
    pixels = np.asarray(pixels)
    h, w = pixels.shape[:2]
    size = output_size or h
    out_shape = (size, size) if output_size else (h, w)
    box = sample_crop_box(h, w, config.crop_min_area_fraction, rng)
    angle = float(rng.uniform(-config.max_rotation_degrees, config.max_rotation_degrees))
    b = 1.0 + rng.uniform(-config.brightness_jitter, config.brightness_jitter)
    ct = 1.0 + rng.uniform(-config.contrast_jitter, config.contrast_jitter)
    sat = 1.0 + rng.uniform(-config.saturation_jitter, config.saturation_jitter)

    if box == (0, 0, h, w) and angle == 0.0 and out_shape == (h, w):
        x = pixels.astype(np.float64, copy=True)
    else:
        chans = [pixels] if pixels.ndim == 2 else [pixels[..., k] for k in range(pixels.shape[2])]
        warped = [_warp(ch.astype(np.float64), box, angle, out_shape, -1.0) for ch in chans]
        x = warped[0] if pixels.ndim == 2 else np.stack(warped, -1)

    if b != 1.0 or ct != 1.0 or (sat != 1.0 and x.ndim == 3):
        u = (x + 1.0) / 2.0
        u = u * b
        grey = u.mean(-1, keepdims=True) if u.ndim == 3 else u
        u = (u - grey.mean()) * ct + grey.mean()
        if u.ndim == 3:
            g = u.mean(-1, keepdims=True)
            u = (u - g) * sat + g
        x = u * 2.0 - 1.0
    return np.clip(x, -1.0, 1.0).astype(np.float32)


# -- sampling ----------------------------------------------------------------

def sample_report_sentence(record: ImageRecord, rng: np.random.Generator) -> str:
    """A uniform sentence describing a finding, or any sentence for a healthy report."""
    if not record.report_sentences:
        raise DatasetError(f"{record.image_id}: report has no sentences")
    finding = [t for t, has in record.report_sentences if has]
    pool = finding or [t for t, _ in record.report_sentences]
    return pool[int(rng.integers(len(pool)))]


def sample_episode(dataset: Sequence[ImageRecord], spec: EpisodeSpec,
                   rng: np.random.Generator) -> list[tuple[ImageRecord, LabelVector]]:
    """Training set for one few-shot configuration.

    k-shot: ``k`` distinct positives per requested class, in class order
    (drawn with replacement, and a warning, when fewer exist). An image
    positive for several classes may be drawn once per class. Sampled mode:
    ``epoch_images_per_class * len(classes)`` images drawn uniformly from the
    whole dataset.
    """
    records = list(dataset)
    if not records:
        raise DatasetError("cannot sample an episode from an empty dataset")
    if spec.sampled:
        n = spec.epoch_images_per_class * len(spec.classes)
        idx = rng.integers(0, len(records), size=n)
        return [(records[i], records[i].labels) for i in idx]
    y = np.stack([r.labels.y for r in records])
    m = np.stack([r.labels.valid_mask for r in records])
    episode = []
    for c in spec.classes:
        pos = np.flatnonzero((y[:, c] == 1) & m[:, c])
        if len(pos) == 0:
            raise DatasetError(f"class {c} has no positive images")
        if len(pos) < spec.k:
            log.warning("class %d has only %d positives for %d-shot; sampling with replacement",
                        c, len(pos), spec.k)
            chosen = rng.choice(pos, size=spec.k, replace=True)
        else:
            chosen = rng.choice(pos, size=spec.k, replace=False)
        episode.extend((records[i], records[i].labels) for i in chosen)
    return episode
