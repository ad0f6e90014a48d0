"""Experiment configuration files and run manifests.

One YAML (or JSON) file describes an experiment. Every key has a default, so
an empty file is a valid config. Dotted ``--set`` overrides are applied on top
of the file before validation::

    output_dir: runs/localization      # FSRG_OUTPUT_ROOT, when set, is prepended to relative paths
    seed: 0
    threads: 1
    template: null                     # path, "fsrg:<bundled name>", or null = <data.dir>/template.json
    synth: {}                          # SynthSpec fields for synth-data
    data:
      dir: null                        # directory holding labels.jsonl and images/
      labels: null                     # or explicit paths
      images: null
      strict: false
    encoder: {...}                     # EncoderConfig fields
    pretrain: {...}                    # PretrainConfig fields (augmentation comes from `augment`)
    finetune:
      shots: [1, 5, 10, 100]           # integers, or "all" for sampled (full-data) training
      seeds: [0, 1, 2, 3, 4]
      inits: [prompt, random]
      ...                              # FinetuneConfig fields
    eval:
      split: test
      threshold: 0.0
    augment: {...}                     # AugmentationConfig fields
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
import platform
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import __version__
from .data import AugmentationConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .head import FinetuneConfig
from .pretrain import PretrainConfig

OUTPUT_ROOT_ENV = "FSRG_OUTPUT_ROOT"
DEVICE_ENV = "FSRG_DEVICE"
MANIFEST_KIND = "fsrg_run_manifest"


@dataclass
class DataConfig:
    dir: str | None = None
    labels: str | None = None
    images: str | None = None
    strict: bool = False

    def paths(self) -> tuple[Path, Path]:
        if self.labels or self.images:
            if not (self.labels and self.images):
                raise ConfigError("data: give both data.labels and data.images, or data.dir")
            return Path(self.labels), Path(self.images)
        if not self.dir:
            raise ConfigError("data: no dataset configured (set data.dir)")
        return Path(self.dir) / "labels.jsonl", Path(self.dir) / "images"


@dataclass
class SweepConfig:
    shots: list[int | str] = field(default_factory=lambda: [1, 5, 10, 100])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    inits: list[str] = field(default_factory=lambda: ["prompt", "random"])
    epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 256
    gamma: float = 50.0
    warmup_epochs: float = 1.0
    weight_decay: float = 0.0
    epoch_images_per_class: int = 128
    train_trunk: bool = False
    augment: bool = True

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("finetune.seeds must not be empty")
        if not self.shots:
            raise ConfigError("finetune.shots must not be empty")
        for s in self.shots:
            if not (s == "all" or (isinstance(s, int) and not isinstance(s, bool) and s >= 1)):
                raise ConfigError(f"finetune.shots: expected positive integers or 'all', got {s!r}")
        for i in self.inits:
            if i not in ("prompt", "random"):
                raise ConfigError(f"finetune.inits: expected 'prompt' or 'random', got {i!r}")
        if not self.inits:
            raise ConfigError("finetune.inits must not be empty")

    def cell_config(self, seed: int, augmentation: AugmentationConfig) -> FinetuneConfig:
        return FinetuneConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                              gamma=self.gamma, warmup_epochs=self.warmup_epochs,
                              weight_decay=self.weight_decay,
                              epoch_images_per_class=self.epoch_images_per_class,
                              train_trunk=self.train_trunk, augment=self.augment, seed=seed,
                              augmentation=augmentation)


@dataclass
class EvalConfig:
    split: str = "test"
    threshold: float = 0.0


@dataclass
class PretrainSection:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    warmup_epochs: float = 1.0
    weight_decay: float = 0.1
    augment: bool = True
    val_batch_size: int = 64

    def build(self, seed: int, augmentation: AugmentationConfig) -> PretrainConfig:
        return PretrainConfig(**asdict(self), seed=seed, augmentation=augmentation)


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    threads: int = 1
    template: str | None = None
    synth: dict[str, Any] = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(resolution=48))
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: SweepConfig = field(default_factory=SweepConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


_SECTIONS = {"data": DataConfig, "encoder": EncoderConfig, "pretrain": PretrainSection,
             "finetune": SweepConfig, "eval": EvalConfig, "augment": AugmentationConfig}


def _build(cls, default: Any, values: Any, where: str):
    """Section dataclass from ``values`` layered over the section's default."""
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; valid keys are {sorted(known)}")
    try:
        return cls(**{**asdict(default), **values})
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {unknown}; valid keys are {sorted(known)}")
    kwargs = {k: v for k, v in raw.items() if k not in _SECTIONS}
    defaults = ExperimentConfig()
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, getattr(defaults, name), raw[name], name)
    if "synth" in kwargs and not isinstance(kwargs["synth"], dict):
        raise ConfigError("synth: expected a mapping")
    for key, typ in (("seed", int), ("threads", int)):
        if key in kwargs and (not isinstance(kwargs[key], typ) or isinstance(kwargs[key], bool)):
            raise ConfigError(f"{key}: expected an integer, got {kwargs[key]!r}")
    return ExperimentConfig(**kwargs)


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars or lists."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key.path=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override {item!r}: empty key segment")
        node = out
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = _parse_value(value)
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Raw mapping from a YAML/JSON config, or the snapshot inside a run manifest."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    raw = raw or {}
    if isinstance(raw, dict) and raw.get("kind") == MANIFEST_KIND:
        raw = raw["config_snapshot"]
    return raw


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw = read_config_file(path) if path else {}
    return config_from_dict(apply_overrides(raw, list(overrides or [])))


# -- manifests ---------------------------------------------------------------

def code_version() -> str:
    here = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class RunManifest:
    """JSON record of one command invocation, rewritten as the run progresses.

    Written before any work starts and finalised in ``close`` (also on
    failure) with status, wall-clock and any error message.
    """

    def __init__(self, path: Path, command: str, config: ExperimentConfig):
        self.path = Path(path)
        self.started = time.time()
        self.data: dict[str, Any] = {
            "kind": MANIFEST_KIND,
            "command": command,
            "status": "running",
            "config_snapshot": config.to_dict(),
            "seed": config.seed,
            "code_version": code_version(),
            "python": platform.python_version(),
            "checkpoints": {},
            "metric_files": {},
            "failures": [],
            "wall_clock_seconds": None,
        }
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n",
                       encoding="utf-8")
        tmp.replace(self.path)

    def checkpoint(self, name: str, path: Path) -> None:
        self.data["checkpoints"][name] = str(path)
        self.write()

    def metric_file(self, name: str, path: Path) -> None:
        self.data["metric_files"][name] = str(path)
        self.write()

    def failure(self, what: str, message: str) -> None:
        self.data["failures"].append({"cell": what, "error": message})
        self.write()

    def close(self, status: str, error: str | None = None) -> None:
        self.data["status"] = status
        if error:
            self.data["error"] = error
        self.data["wall_clock_seconds"] = round(time.time() - self.started, 3)
        self.write()
