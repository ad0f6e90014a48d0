"""Synthetic chest-radiograph stand-in with programmatic ground truth.

Two worlds are supported:

* ``localization``: each attribute is a glyph shape, each location a cell of
  a grid laid over a noisy "chest". Finding (a, l) is positive iff glyph a is
  drawn inside cell l. At most one glyph per cell.
* ``severity``: a bright disc (the cardiac silhouette) whose radius encodes
  one of several exclusive severity levels.

Reports are built from the template sentences with paraphrase noise (synonym
substitution, alternative phrasings, filler clauses) so that text and image
are correlated without being string-identical to the prompts.
"""

from __future__ import annotations

import json
import shutil
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError
from .templates import LITERAL, PRODUCT, TemplateNode, TemplateTree, product_sentence, \
    serialize_template, validate_tree

GLYPHS = ("disc", "square", "cross", "triangle", "ring", "bar")

ATTRIBUTE_SYNONYMS = {
    "lung opacity": ["opacity", "pulmonary opacity", "opacification"],
    "pleural effusion": ["effusion", "pleural fluid", "fluid collection"],
    "atelectasis": ["volume loss", "atelectatic change", "subsegmental atelectasis"],
    "consolidation": ["airspace consolidation", "consolidative change", "airspace disease"],
    "enlarged cardiac silhouette": ["cardiomegaly", "enlarged heart"],
    "pulmonary edema/hazy opacity": ["pulmonary edema", "interstitial edema", "hazy opacity"],
    "pneumothorax": ["air in the pleural space", "collapsed lung"],
    "fluid overload/heart failure": ["fluid overload", "heart failure"],
    "pneumonia": ["infection", "pneumonic infiltrate"],
}
JOINER_SYNONYMS = ["within the", "involving the", "at the"]
LOCATION_SYNONYMS = {"lung zone": ["lung", "lung field", "zone"]}
FRAMES = ["{a} {j} {l}", "there is {a} {j} {l}", "{a} is seen {j} {l}",
          "{a} {j} {l} is noted", "findings of {a} {j} {l}"]
FILLERS = [", unchanged from prior", ", new since the prior study", ", likely small",
           " without significant interval change", ", possibly early"]
NORMAL_SENTENCES = [
    "No acute cardiopulmonary process.",
    "The lungs are otherwise clear.",
    "The mediastinal contours are within normal limits.",
    "Osseous structures are intact.",
    "Support devices are absent.",
    "Comparison is made to the prior radiograph.",
]

CARDIOMEGALY_LEVELS = [
    # prompt, radius as a fraction of image size, relative prior, counts as a
    # finding sentence
    ("The heart is normal in size.", 0.140, 3140, False),
    ("The heart is top normal in size.", 0.165, 635, False),
    ("There is mild cardiomegaly.", 0.195, 6084, True),
    ("There is moderate cardiomegaly.", 0.225, 8696, True),
    ("There is severe cardiomegaly.", 0.260, 2231, True),
    ("There is marked cardiomegaly.", 0.295, 246, True),
]
SEVERITY_PARAPHRASES = {
    "The heart is normal in size.": ["Heart size is normal.", "Normal heart size.",
                                     "The cardiac silhouette is normal in size."],
    "The heart is top normal in size.": ["Heart size is top normal.",
                                         "The cardiac silhouette is top normal in size.",
                                         "Top normal heart size."],
    "There is mild cardiomegaly.": ["Mild cardiomegaly is present.", "Mild enlargement of the heart.",
                                    "The heart is mildly enlarged, mild cardiomegaly."],
    "There is moderate cardiomegaly.": ["Moderate cardiomegaly is present.",
                                        "Moderate enlargement of the heart.",
                                        "The heart is moderately enlarged, moderate cardiomegaly."],
    "There is severe cardiomegaly.": ["Severe cardiomegaly is present.",
                                      "Severe enlargement of the heart.",
                                      "The heart is severely enlarged, severe cardiomegaly."],
    "There is marked cardiomegaly.": ["Marked cardiomegaly is present.",
                                      "Marked enlargement of the heart.",
                                      "The heart is markedly enlarged, marked cardiomegaly."],
}

DEFAULT_ATTRIBUTES = [
    {"name": "lung opacity", "glyph": "disc"},
    {"name": "pleural effusion", "glyph": "bar"},
    {"name": "atelectasis", "glyph": "cross"},
    {"name": "consolidation", "glyph": "square"},
]
DEFAULT_LOCATIONS = [
    {"name": "right upper lung zone", "cell": [0, 0]},
    {"name": "left upper lung zone", "cell": [0, 1]},
    {"name": "right mid lung zone", "cell": [1, 0]},
    {"name": "left mid lung zone", "cell": [1, 1]},
    {"name": "right lower lung zone", "cell": [2, 0]},
    {"name": "left lower lung zone", "cell": [2, 1]},
]


def _default_pairs() -> list[list[str]]:
    pairs = []
    for a in DEFAULT_ATTRIBUTES:
        for loc in DEFAULT_LOCATIONS:
            # effusions layer dependently; never in the upper zones
            if a["name"] == "pleural effusion" and "upper" in loc["name"]:
                continue
            pairs.append([a["name"], loc["name"]])
    return pairs


def _default_levels() -> list[dict[str, Any]]:
    return [{"prompt": p, "radius": r, "prior": n, "has_finding": f}
            for p, r, n, f in CARDIOMEGALY_LEVELS]


@dataclass
class SynthSpec:
    task: str = "localization"
    count: int = 2400
    image_size: int = 48
    seed: int = 0
    splits: dict[str, float] = field(
        default_factory=lambda: {"train": 0.7, "validate": 0.1, "test": 0.2})
    grid: list[int] = field(default_factory=lambda: [3, 2])
    attributes: list[dict[str, str]] = field(default_factory=lambda: [dict(a) for a in DEFAULT_ATTRIBUTES])
    locations: list[dict[str, Any]] = field(default_factory=lambda: [dict(loc) for loc in DEFAULT_LOCATIONS])
    pairs: list[list[str]] | None = field(default_factory=_default_pairs)
    prior: float = 0.05
    pair_priors: dict[str, float] = field(default_factory=dict)
    levels: list[dict[str, Any]] = field(default_factory=_default_levels)
    paraphrase: bool = True
    synonym_prob: float = 0.35
    filler_prob: float = 0.3
    normal_sentences: int = 2
    noise: float = 0.06
    glyph_contrast: list[float] = field(default_factory=lambda: [0.45, 0.8])

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SynthSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"synth: unknown field(s) {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def cells(self) -> dict[str, tuple[int, int, int, int]]:
        out = {}
        for loc in self.locations:
            c = list(loc["cell"])
            if len(c) == 2:
                c += [1, 1]
            out[loc["name"]] = tuple(int(v) for v in c)
        return out

    def observed_pairs(self) -> list[tuple[str, str]]:
        if self.pairs is None:
            return [(a["name"], loc["name"]) for a in self.attributes for loc in self.locations]
        return [(a, loc) for a, loc in self.pairs]

    def pair_prior(self, attribute: str, location: str) -> float:
        return float(self.pair_priors.get(f"{attribute}|{location}", self.prior))

    def validate(self) -> None:
        if self.task not in ("localization", "severity"):
            raise ConfigError(f"synth.task: expected 'localization' or 'severity', got {self.task!r}")
        if self.count < 1:
            raise ConfigError("synth.count: must be >= 1")
        if self.image_size < 16:
            raise ConfigError("synth.image_size: must be >= 16")
        if not self.splits or any(v < 0 for v in self.splits.values()) \
                or abs(sum(self.splits.values()) - 1.0) > 1e-9:
            raise ConfigError("synth.splits: fractions must be non-negative and sum to 1")
        if not 0 <= self.synonym_prob <= 1 or not 0 <= self.filler_prob <= 1:
            raise ConfigError("synth.synonym_prob / filler_prob: must be in [0, 1]")
        if self.task == "severity":
            if len(self.levels) < 2:
                raise ConfigError("synth.levels: need at least 2 severity levels")
            for k, lv in enumerate(self.levels):
                for key in ("prompt", "radius", "prior"):
                    if key not in lv:
                        raise ConfigError(f"synth.levels[{k}]: missing {key!r}")
                if not 0 < lv["radius"] < 0.5:
                    raise ConfigError(f"synth.levels[{k}].radius: must be in (0, 0.5)")
            if sum(lv["prior"] for lv in self.levels) <= 0:
                raise ConfigError("synth.levels: priors must not all be zero")
            return
        rows, cols = self.grid
        names = [a["name"] for a in self.attributes]
        if len(set(names)) != len(names) or not names:
            raise ConfigError("synth.attributes: names must be unique and non-empty")
        for k, a in enumerate(self.attributes):
            if a.get("glyph") not in GLYPHS:
                raise ConfigError(f"synth.attributes[{k}].glyph: expected one of {GLYPHS}")
        occupied: dict[tuple[int, int], str] = {}
        for name, (r, c, h, w) in self.cells().items():
            if r < 0 or c < 0 or h < 1 or w < 1 or r + h > rows or c + w > cols:
                raise ConfigError(f"synth.locations: cell of {name!r} lies outside the {rows}x{cols} grid")
            for rr in range(r, r + h):
                for cc in range(c, c + w):
                    if (rr, cc) in occupied:
                        raise ConfigError(
                            f"synth.locations: cells of {occupied[(rr, cc)]!r} and {name!r} overlap")
                    occupied[(rr, cc)] = name
        loc_names = set(self.cells())
        for a, loc in self.observed_pairs():
            if a not in names or loc not in loc_names:
                raise ConfigError(f"synth.pairs: unknown pair [{a!r}, {loc!r}]")
        for loc in loc_names:
            total = sum(self.pair_prior(a, l2) for a, l2 in self.observed_pairs() if l2 == loc)
            if total > 1.0:
                raise ConfigError(f"synth: priors of location {loc!r} sum to {total:.3f} > 1")

    def template(self) -> TemplateTree:
        if self.task == "severity":
            prompts = tuple(enumerate(lv["prompt"] for lv in self.levels))
            node = TemplateNode("cardiomegaly", LITERAL, prompts, True)
            tree = TemplateTree((node,), (), (), "1")
        else:
            nodes = []
            index = 0
            pairs = self.observed_pairs()
            for a in self.attributes:
                mine = [p for p in pairs if p[0] == a["name"]]
                if not mine:
                    continue
                prompts = tuple((index + k, product_sentence(*p)) for k, p in enumerate(mine))
                index += len(mine)
                nodes.append(TemplateNode(a["name"].replace(" ", "_").replace("/", "_"), PRODUCT,
                                          prompts, False, f"No {a['name']}.", tuple(mine)))
            tree = TemplateTree(tuple(nodes), tuple(a["name"] for a in self.attributes),
                                tuple(self.cells()), "1")
        validate_tree(tree)
        return tree


# -- rendering ---------------------------------------------------------------

def _glyph_mask(shape: str, h: int, w: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = radius
    if shape == "disc":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        outer = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        inner = (np.abs(dy) <= 0.5 * r) & (np.abs(dx) <= 0.5 * r)
        return outer & ~inner
    if shape == "cross":
        t = max(0.3 * r, 0.75)
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "bar":
        return (np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= 1.1 * r)
    raise ConfigError(f"unknown glyph {shape!r}")


def _background(size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    base = -0.55 + 0.15 * np.exp(-((xx - 0.5) ** 2) / 0.02)   # brighter mediastinum stripe
    smooth = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 8)
    smooth *= 0.12 / (smooth.std() + 1e-12)
    return base + smooth + rng.normal(scale=noise, size=(size, size))


def cell_box(spec: SynthSpec, location: str) -> tuple[int, int, int, int]:
    """Pixel box (top, left, height, width) of a location's grid cell."""
    rows, cols = spec.grid
    r, c, h, w = spec.cells()[location]
    s = spec.image_size
    top, bottom = round(r * s / rows), round((r + h) * s / rows)
    left, right = round(c * s / cols), round((c + w) * s / cols)
    return top, left, bottom - top, right - left


def render_localization(spec: SynthSpec, positives: list[tuple[str, str]],
                        rng: np.random.Generator) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Image in [-1, 1] plus the exact glyph mask drawn for each positive location."""
    size = spec.image_size
    img = _background(size, rng, spec.noise)
    glyph_of = {a["name"]: a["glyph"] for a in spec.attributes}
    masks = {}
    for attribute, location in positives:
        top, left, h, w = cell_box(spec, location)
        radius = 0.5 * min(h, w) * rng.uniform(0.5, 0.72)
        cy = top + h / 2 + rng.uniform(-1, 1) * max(0.0, h / 2 - radius - 1)
        cx = left + w / 2 + rng.uniform(-1, 1) * max(0.0, w / 2 - radius - 1)
        local = _glyph_mask(glyph_of[attribute], h, w, cy - top, cx - left, radius)
        mask = np.zeros((size, size), dtype=bool)
        mask[top:top + h, left:left + w] = local
        contrast = rng.uniform(*spec.glyph_contrast)
        img += contrast * ndimage.gaussian_filter(mask.astype(np.float64), 0.6)
        masks[location] = mask
    return np.clip(img, -1, 1), masks


def render_severity(spec: SynthSpec, level: int, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    img = _background(size, rng, spec.noise)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for side in (0.28, 0.72):   # lung fields
        lung = ((xx / size - side) / 0.2) ** 2 + ((yy / size - 0.45) / 0.38) ** 2 <= 1
        img -= 0.2 * ndimage.gaussian_filter(lung.astype(np.float64), 1.0)
    radius = spec.levels[level]["radius"] * size * (1 + rng.normal(scale=0.03))
    cy = size * (0.62 + rng.uniform(-0.03, 0.03))
    cx = size * (0.52 + rng.uniform(-0.04, 0.04))
    heart = (yy - cy) ** 2 + ((xx - cx) / 1.1) ** 2 <= radius ** 2
    img += rng.uniform(*spec.glyph_contrast) * ndimage.gaussian_filter(heart.astype(np.float64), 0.8)
    return np.clip(img, -1, 1)


# -- reports -----------------------------------------------------------------

def _cap(s: str) -> str:
    return s[0].upper() + s[1:] if s else s


def paraphrase_finding(attribute: str, location: str, spec: SynthSpec,
                       rng: np.random.Generator) -> str:
    if not spec.paraphrase:
        return _cap(product_sentence(attribute, location)) + "."
    p = spec.synonym_prob
    a, j, loc = attribute, "in the", location
    if rng.random() < p and attribute in ATTRIBUTE_SYNONYMS:
        a = str(rng.choice(ATTRIBUTE_SYNONYMS[attribute]))
    if rng.random() < p:
        j = str(rng.choice(JOINER_SYNONYMS))
    if rng.random() < p:
        for key, alts in LOCATION_SYNONYMS.items():
            if key in loc:
                loc = loc.replace(key, str(rng.choice(alts)))
    frame = FRAMES[0] if rng.random() >= p else str(rng.choice(FRAMES))
    text = frame.format(a=a, j=j, l=loc)
    if rng.random() < spec.filler_prob:
        text += str(rng.choice(FILLERS))
    return _cap(text) + "."


def paraphrase_level(prompt: str, spec: SynthSpec, rng: np.random.Generator) -> str:
    alts = SEVERITY_PARAPHRASES.get(prompt, [])
    if spec.paraphrase and alts and rng.random() < spec.synonym_prob * 1.5:
        return str(rng.choice(alts))
    return prompt


def _normal_sentences(spec: SynthSpec, rng: np.random.Generator) -> list[str]:
    n = min(spec.normal_sentences, len(NORMAL_SENTENCES))
    idx = rng.choice(len(NORMAL_SENTENCES), size=n, replace=False)
    return [NORMAL_SENTENCES[i] for i in sorted(idx)]


# -- dataset generation ------------------------------------------------------

def _sample_localization_findings(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[str, str]]:
    pairs = spec.observed_pairs()
    positives = []
    for loc in spec.cells():
        options = [(a, l2) for a, l2 in pairs if l2 == loc]
        probs = np.array([spec.pair_prior(a, l2) for a, l2 in options])
        u = rng.random()
        edges = np.cumsum(probs)
        k = int(np.searchsorted(edges, u, side="right"))
        if k < len(options):
            positives.append(options[k])
    return positives


def generate_record(spec: SynthSpec, i: int) -> dict[str, Any]:
    """Everything about image ``i``: pixels, findings, sentences, ground-truth masks."""
    r_find = np.random.default_rng([spec.seed, i, 0])
    r_img = np.random.default_rng([spec.seed, i, 1])
    r_txt = np.random.default_rng([spec.seed, i, 2])
    if spec.task == "severity":
        priors = np.array([lv["prior"] for lv in spec.levels], dtype=np.float64)
        level = int(r_find.choice(len(priors), p=priors / priors.sum()))
        pixels = render_severity(spec, level, r_img)
        lv = spec.levels[level]
        findings = [{"prompt": lv["prompt"], "polarity": 1}]
        sentences = [{"text": paraphrase_level(lv["prompt"], spec, r_txt),
                      "has_finding": bool(lv.get("has_finding", True))}]
        sentences += [{"text": s, "has_finding": False} for s in _normal_sentences(spec, r_txt)]
        return {"pixels": pixels, "findings": findings, "sentences": sentences,
                "masks": {}, "level": level}
    positives = _sample_localization_findings(spec, r_find)
    pixels, masks = render_localization(spec, positives, r_img)
    findings = [{"attribute": a, "location": loc, "polarity": 1} for a, loc in positives]
    sentences = [{"text": paraphrase_finding(a, loc, spec, r_txt), "has_finding": True}
                 for a, loc in positives]
    sentences += [{"text": s, "has_finding": False} for s in _normal_sentences(spec, r_txt)]
    return {"pixels": pixels, "findings": findings, "sentences": sentences, "masks": masks}


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round((pixels + 1.0) * 127.5), 0, 255).astype(np.uint8)


def assign_splits(spec: SynthSpec) -> list[str]:
    order = np.random.default_rng([spec.seed, 10_000_019]).permutation(spec.count)
    names = list(spec.splits)
    bounds = np.cumsum([spec.splits[n] for n in names]) * spec.count
    splits = [""] * spec.count
    for rank, i in enumerate(order):
        k = int(np.searchsorted(bounds, rank, side="right"))
        splits[i] = names[min(k, len(names) - 1)]
    return splits


def image_id(i: int) -> str:
    return f"img_{i:06d}"


def synth_generate(spec: SynthSpec, out_dir: str | Path, force: bool = False) -> Path:
    """Write ``images/*.png``, ``labels.jsonl``, ``template.json`` and ``synth_spec.json``."""
    spec.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use force to overwrite)")
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    splits = assign_splits(spec)
    lines = []
    for i in range(spec.count):
        rec = generate_record(spec, i)
        Image.fromarray(to_uint8(rec["pixels"]), mode="L").save(out / "images" / f"{image_id(i)}.png")
        lines.append(json.dumps({"image_id": image_id(i), "split": splits[i],
                                 "findings": rec["findings"], "sentences": rec["sentences"]},
                                sort_keys=True))
    (out / "labels.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "template.json").write_text(serialize_template(spec.template()), encoding="utf-8")
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return out


def class_counts(label_path: str | Path, template: TemplateTree) -> dict[str, Counter]:
    """Positive count per prompt and split, in the shape of a split-count table."""
    from .data import _parse_finding
    counts: dict[str, Counter] = {}
    for line in Path(label_path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        split = obj.get("split", "train")
        for f in obj["findings"]:
            finding = _parse_finding(f, "")
            if finding.polarity == 1:
                counts.setdefault(finding.sentence(), Counter())[split] += 1
    return counts
