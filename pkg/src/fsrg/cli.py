"""``fsrg`` command-line interface.

Every command reads one experiment config (``--config``, YAML, JSON or a run
manifest written by an earlier command) plus ``--set key.path=value``
overrides. Outputs land under ``output_dir``::

    <output_dir>/manifests/<command>.json
    <output_dir>/pretrain/{bundle.fsrgc, resume.pt, metrics.csv}
    <output_dir>/finetune/{cells/, cells.csv, results.csv, results.txt, summary.json}
    <output_dir>/eval/{metrics.json, predictions.csv, results.csv, results.txt}
    <output_dir>/plot/shots_auc.png
    <output_dir>/reports/<image>.json

Exit status: 0 success, 1 user or configuration error, 2 internal failure.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import sys
import traceback
from collections import defaultdict
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator

import click
import numpy as np
import torch

from .config import DEVICE_ENV, ExperimentConfig, RunManifest, load_config
from .data import DatasetIndex, EpisodeSpec, load_dataset, load_image, sample_episode
from .encoders import build_bundle, encode_image, save_bundle
from .errors import ConfigError, DatasetError, DivergenceError, FSRGError
from .evaluation import (ScoredPredictions, emit_results_table, evaluate_template,
                         write_prediction_dump)
from .head import (classify, finetune, image_features, init_classifier, load_checkpoint,
                   predict_probabilities, save_classifier, score_dataset)
from .pretrain import PretrainConfig, pretrain
from .synth import SynthSpec, class_counts, synth_generate
from .templates import (DecisionConfig, TemplateTree, bundled_template, expand_prompts,
                        load_template, render_report)

log = logging.getLogger("fsrg")

CELL_FIELDS = ["init", "shots", "seed", "macro_auc", "status"]


class UserError(click.ClickException):
    exit_code = 1


# -- shared plumbing -------------------------------------------------------------

def _device() -> None:
    dev = os.environ.get(DEVICE_ENV, "cpu")
    if dev != "cpu":
        raise ConfigError(f"{DEVICE_ENV}={dev!r}: this build runs on 'cpu' only")


def _setup(cfg: ExperimentConfig) -> Path:
    _device()
    torch.set_num_threads(cfg.threads)
    torch.use_deterministic_algorithms(True, warn_only=True)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    return out


@contextmanager
def _manifest(cfg: ExperimentConfig, command: str) -> Iterator[RunManifest]:
    out = _setup(cfg)
    manifest = RunManifest(out / "manifests" / f"{command}.json", command, cfg)
    try:
        yield manifest
    except BaseException as exc:
        manifest.close("failed", f"{type(exc).__name__}: {exc}")
        raise
    else:
        manifest.close("succeeded")


def _template(cfg: ExperimentConfig, override: str | None = None) -> TemplateTree:
    ref = override or cfg.template
    if ref is None:
        if not cfg.data.dir:
            raise ConfigError("template: not set and no data.dir/template.json to fall back on")
        ref = str(Path(cfg.data.dir) / "template.json")
    if ref.startswith("fsrg:"):
        return bundled_template(ref[len("fsrg:"):])
    if not Path(ref).is_file():
        raise ConfigError(f"template file not found: {ref}")
    return load_template(ref)


def _dataset(cfg: ExperimentConfig, tree: TemplateTree) -> DatasetIndex:
    labels, images = cfg.data.paths()
    if not labels.is_file():
        raise DatasetError(f"label file not found: {labels}")
    if not images.is_dir():
        raise DatasetError(f"image directory not found: {images}")
    return load_dataset(labels, images, expand_prompts(tree), resolution=cfg.encoder.resolution,
                        strict=cfg.data.strict, channels=cfg.encoder.in_channels)


def _split(ds: DatasetIndex, name: str) -> DatasetIndex:
    sub = ds.split(name)
    if not len(sub):
        raise DatasetError(f"split {name!r} is empty")
    return sub


def _checkpoint_path(cfg: ExperimentConfig, given: str | None) -> Path:
    path = Path(given) if given else cfg.output_path() / "pretrain" / "bundle.fsrgc"
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


def _metrics_row(result: dict[str, Any]) -> dict[str, float]:
    row = {}
    for name, v in sorted(result.get("pathology_auc", {}).items()):
        row[name] = float(v)
    for name, levels in sorted(result.get("level_auc", {}).items()):
        for prompt, v in levels.items():
            row[prompt] = float(v)
    row["macro AUC"] = float(result["macro_auc"])
    return row


def _dump_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _evaluate(tree, classifier, bundle, ds: DatasetIndex, gamma: float, features=None):
    scores = score_dataset(classifier, bundle, ds, features)
    y, m = ds.label_matrix()
    preds = ScoredPredictions([r.image_id for r in ds], scores, y, m)
    return preds, evaluate_template(tree, preds, gamma)


# -- commands --------------------------------------------------------------------

config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                             help="Experiment config (YAML/JSON) or a run manifest.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY.PATH=VALUE",
                          help="Override a config key; repeatable.")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def cli(verbose: int) -> None:
    """Few-shot structured report generation from chest radiographs."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command("synth-data")
@config_option
@set_option
@click.option("--out", type=click.Path(file_okay=False), help="Dataset directory (default data.dir).")
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
def cmd_synth_data(config_path, overrides, out, force):
    """Generate a synthetic dataset and print per-split class counts."""
    cfg = load_config(config_path, overrides)
    spec = SynthSpec.from_dict(cfg.synth)
    target = Path(out or cfg.data.dir or cfg.output_path() / "data")
    with _manifest(cfg, "synth-data") as manifest:
        try:
            synth_generate(spec, target, force=force)
        except FileExistsError as exc:
            raise UserError(str(exc)) from exc
        tree = spec.template()
        counts = class_counts(target / "labels.jsonl", tree)
        splits = list(spec.splits)
        width = max(len(p) for p in expand_prompts(tree))
        click.echo(f"{'class'.ljust(width)}  " + "  ".join(s.rjust(8) for s in splits))
        for prompt in expand_prompts(tree):
            c = counts.get(prompt, {})
            click.echo(f"{prompt.ljust(width)}  " + "  ".join(str(c.get(s, 0)).rjust(8) for s in splits))
        click.echo(f"{spec.count} images written to {target}")
        manifest.data["dataset_dir"] = str(target)
        manifest.write()


@cli.command("pretrain")
@config_option
@set_option
@click.option("--resume", is_flag=True, help="Continue from <output_dir>/pretrain/resume.pt.")
def cmd_pretrain(config_path, overrides, resume):
    """Contrastive image-text pretraining; keeps the best-validation bundle."""
    cfg = load_config(config_path, overrides)
    with _manifest(cfg, "pretrain") as manifest:
        tree = _template(cfg)
        ds = _dataset(cfg, tree)
        train, val = _split(ds, "train"), ds.split("validate")
        out = cfg.output_path() / "pretrain"
        out.mkdir(parents=True, exist_ok=True)
        metrics_path, state_path, ckpt = out / "metrics.csv", out / "resume.pt", out / "bundle.fsrgc"
        sentences = sorted({t for r in train for t, _ in r.report_sentences} | set(expand_prompts(tree)))
        bundle = build_bundle(cfg.encoder, sentences, seed=cfg.seed)
        state = None
        if resume:
            if not state_path.is_file():
                raise ConfigError(f"--resume: no resume state at {state_path}")
            state = torch.load(state_path, weights_only=False)
            if state.get("vocab") != bundle.tokenizer.vocab:
                raise ConfigError("--resume: vocabulary differs from the interrupted run")
        elif metrics_path.exists():
            metrics_path.unlink()
        pcfg: PretrainConfig = cfg.pretrain.build(cfg.seed, cfg.augment)

        def save_state(st: dict[str, Any]) -> None:
            torch.save({**st, "vocab": bundle.tokenizer.vocab}, state_path)

        manifest.metric_file("pretrain", metrics_path)
        result = pretrain(bundle, train, pcfg, val if len(val) else None, metrics_path, state,
                          on_epoch=save_state)
        save_bundle(result.bundle, ckpt)
        manifest.checkpoint("bundle", ckpt)
        manifest.checkpoint("resume_state", state_path)
        manifest.data["best_epoch"] = result.best_epoch
        for row in result.metrics:
            click.echo(f"epoch {row['epoch']:3d} {row['split']:8s} loss {row['loss']:.4f} "
                       f"top1 {row['retrieval_top1']:.4f}")
        click.echo(f"best epoch {result.best_epoch}; bundle written to {ckpt}")


def _episode_classes(train: DatasetIndex) -> list[int]:
    y, m = train.label_matrix()
    has = ((y == 1) & m).any(0)
    missing = np.flatnonzero(~has)
    if len(missing):
        log.warning("classes %s have no positive training image and get no few-shot examples",
                    missing.tolist())
    return np.flatnonzero(has).tolist()


def _cell_name(init: str, shots, seed: int) -> str:
    return f"{init}_{shots}shot_seed{seed}"


@cli.command("finetune")
@config_option
@set_option
@click.option("--checkpoint", type=click.Path(dir_okay=False),
              help="Pretrained bundle (default <output_dir>/pretrain/bundle.fsrgc).")
def cmd_finetune(config_path, overrides, checkpoint):
    """Few-shot sweep over shots x seeds x initialisations."""
    cfg = load_config(config_path, overrides)
    with _manifest(cfg, "finetune") as manifest:
        tree = _template(cfg)
        ckpt = _checkpoint_path(cfg, checkpoint)
        bundle, _, _ = load_checkpoint(ckpt)
        prompts = expand_prompts(tree)
        ds = _dataset(cfg, tree)
        train, val, test = _split(ds, "train"), ds.split("validate"), _split(ds, cfg.eval.split)
        out = cfg.output_path() / "finetune"
        (out / "cells").mkdir(parents=True, exist_ok=True)
        sweep = cfg.finetune
        classes = _episode_classes(train)
        test_feats = image_features(bundle, test, list(test))

        _, zero = _evaluate(tree, init_classifier(prompts, bundle), bundle, test, sweep.gamma, test_feats)
        table = [("zero-shot", _metrics_row(zero))]
        cells: list[dict[str, Any]] = []
        per_cell_rows: dict[tuple[str, Any], list[dict[str, float]]] = defaultdict(list)
        for shots in sweep.shots:
            for init in sweep.inits:
                for seed in sweep.seeds:
                    name = _cell_name(init, shots, seed)
                    try:
                        spec = EpisodeSpec(1 if shots == "all" else int(shots), classes, seed,
                                           sweep.epoch_images_per_class, sampled=shots == "all")
                        episode = sample_episode(train, spec, np.random.default_rng(
                            [seed, 0 if shots == "all" else int(shots)]))
                        clf = init_classifier(prompts, bundle, random_init=init == "random", seed=seed)
                        res = finetune(clf, bundle, episode, sweep.cell_config(seed, cfg.augment), tree,
                                       ds, val if len(val) else None)
                        _, metrics = _evaluate(tree, res.classifier, res.bundle, test, sweep.gamma)
                        save_classifier(res.classifier, res.bundle, out / "cells" / f"{name}.fsrgc",
                                        {"init": init, "shots": shots, "seed": seed})
                        _dump_json(out / "cells" / f"{name}.json",
                                   {"init": init, "shots": shots, "seed": seed, "metrics": metrics,
                                    "train_log": res.metrics, "best_epoch": res.best_epoch})
                        per_cell_rows[(init, shots)].append(_metrics_row(metrics))
                        cells.append({"init": init, "shots": shots, "seed": seed,
                                      "macro_auc": f"{metrics['macro_auc']:.6f}", "status": "ok"})
                        click.echo(f"{name}: macro AUC {metrics['macro_auc']:.4f}")
                    except (FSRGError, ValueError) as exc:
                        log.error("cell %s failed: %s", name, exc)
                        manifest.failure(name, f"{type(exc).__name__}: {exc}")
                        cells.append({"init": init, "shots": shots, "seed": seed,
                                      "macro_auc": "", "status": f"failed: {exc}"})
        with open(out / "cells.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CELL_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(cells)
        summary = {}
        for (init, shots), rows in per_cell_rows.items():
            mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
            table.append((f"{init} init / {shots}-shot", mean))
            summary[f"{init}/{shots}"] = {"runs": len(rows), "mean": mean}
        _dump_json(out / "summary.json", summary)
        csv_path, txt_path = emit_results_table(table, out / "results", "configuration")
        manifest.metric_file("cells", out / "cells.csv")
        manifest.metric_file("summary", out / "summary.json")
        manifest.metric_file("results", csv_path)
        click.echo(txt_path.read_text(encoding="utf-8"), nl=False)
        if not per_cell_rows:
            raise FSRGError("every fine-tuning cell failed; see the manifest")


@cli.command("eval")
@config_option
@set_option
@click.option("--checkpoint", type=click.Path(dir_okay=False),
              help="Bundle (zero-shot) or fine-tuned classifier checkpoint.")
def cmd_eval(config_path, overrides, checkpoint):
    """Evaluate a checkpoint on the configured split and dump raw predictions."""
    cfg = load_config(config_path, overrides)
    with _manifest(cfg, "eval") as manifest:
        tree = _template(cfg)
        ckpt = _checkpoint_path(cfg, checkpoint)
        bundle, classifier, _ = load_checkpoint(ckpt)
        prompts = expand_prompts(tree)
        if classifier is None:
            classifier = init_classifier(prompts, bundle)
            mode = "zero-shot"
        else:
            if list(classifier.prompt_set) != list(prompts):
                raise ConfigError(f"{ckpt}: checkpoint prompts do not match template "
                                  f"({len(classifier.prompt_set)} vs {len(prompts)} classes)")
            mode = "fine-tuned"
        ds = _dataset(cfg, tree)
        split = _split(ds, cfg.eval.split)
        preds, metrics = _evaluate(tree, classifier, bundle, split, cfg.finetune.gamma)
        out = cfg.output_path() / "eval"
        out.mkdir(parents=True, exist_ok=True)
        write_prediction_dump(preds, out / "predictions.csv")
        _dump_json(out / "metrics.json", {"mode": mode, "split": cfg.eval.split, "metrics": metrics})
        csv_path, txt_path = emit_results_table([(mode, _metrics_row(metrics))], out / "results",
                                                "model")
        for name, p in (("predictions", out / "predictions.csv"), ("metrics", out / "metrics.json"),
                        ("results", csv_path)):
            manifest.metric_file(name, p)
        click.echo(txt_path.read_text(encoding="utf-8"), nl=False)


@cli.command("report")
@config_option
@set_option
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Checkpoint to run.")
@click.option("--image", "image_path", required=True, type=click.Path(dir_okay=False))
@click.option("--template", "template_ref", help="Template path or fsrg:<name> (default from config).")
@click.option("--sidecar", type=click.Path(dir_okay=False),
              help="Provenance JSON path (default <output_dir>/reports/<image>.json).")
def cmd_report(config_path, overrides, checkpoint, image_path, template_ref, sidecar):
    """Render the structured report for one image."""
    cfg = load_config(config_path, overrides)
    _setup(cfg)
    tree = _template(cfg, template_ref)
    ckpt = _checkpoint_path(cfg, checkpoint)
    bundle, classifier, _ = load_checkpoint(ckpt)
    prompts = expand_prompts(tree)
    if classifier is None:
        classifier = init_classifier(prompts, bundle)
    elif list(classifier.prompt_set) != list(prompts):
        raise ConfigError(f"{ckpt}: checkpoint prompts do not match the template")
    if not Path(image_path).is_file():
        raise DatasetError(f"cannot read image {image_path}: no such file")
    pixels = load_image(image_path, bundle.config.resolution, bundle.config.in_channels)
    scores = classify(classifier, encode_image(bundle, pixels)).astype(np.float64)
    decision = DecisionConfig(threshold=cfg.eval.threshold, gamma=cfg.finetune.gamma)
    report = render_report(tree, scores, decision)
    probs = predict_probabilities(tree, scores, decision.gamma)
    click.echo(report.to_text(), nl=False)
    side = Path(sidecar) if sidecar else cfg.output_path() / "reports" / f"{Path(image_path).stem}.json"
    side.parent.mkdir(parents=True, exist_ok=True)
    payload = report.provenance()
    payload.update({"image": str(image_path), "checkpoint": str(ckpt),
                    "scores": [float(v) for v in scores], "probabilities": [float(v) for v in probs]})
    _dump_json(side, payload)


@cli.command("plot")
@config_option
@set_option
@click.option("--metrics-dir", type=click.Path(file_okay=False),
              help="Directory with cells.csv (default <output_dir>/finetune).")
def cmd_plot(config_path, overrides, metrics_dir):
    """Shots-vs-AUC curves, one per initialisation."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = load_config(config_path, overrides)
    src = Path(metrics_dir) if metrics_dir else cfg.output_path() / "finetune"
    cells_path = src / "cells.csv"
    if not cells_path.is_file():
        raise ConfigError(f"no metrics found: {cells_path} does not exist")
    with open(cells_path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(fh) if r["status"] == "ok"]
    if not rows:
        raise ConfigError(f"no successful cells in {cells_path}")
    curves: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r["shots"] == "all":
            continue
        curves[r["init"]][int(r["shots"])].append(float(r["macro_auc"]))
    if not curves:
        raise ConfigError(f"no k-shot cells in {cells_path}")
    out = cfg.output_path() / "plot"
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "fsrg"
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for init in sorted(curves):
        ks = sorted(curves[init])
        means = [float(np.mean(curves[init][k])) for k in ks]
        ax.plot(ks, means, marker="o", label=f"{init} init")
    ax.set_xscale("log")
    ax.set_xlabel("training images per class")
    ax.set_ylabel("macro AUC")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = out / "shots_auc.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    click.echo(str(path))


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="fsrg", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except DivergenceError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except (FSRGError, FileExistsError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception:  # noqa: BLE001 - last-resort handler
        click.echo("internal error:\n" + traceback.format_exc(), err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
