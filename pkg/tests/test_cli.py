import csv
import json

import numpy as np
import pytest
import yaml
from PIL import Image

from fsrg.cli import main
from fsrg.config import apply_overrides, config_from_dict, load_config
from fsrg.errors import ConfigError
from fsrg.synth import SynthSpec, generate_record, to_uint8

TINY = {
    "synth": {"count": 160, "image_size": 32, "prior": 0.12, "seed": 2},
    "encoder": {"d": 16, "resolution": 32, "image_widths": [4, 8, 8, 8], "text_width": 16},
    "pretrain": {"epochs": 2, "batch_size": 16, "val_batch_size": 8},
    "finetune": {"shots": [1, 2], "seeds": [0, 1], "epochs": 2, "batch_size": 64,
                 "epoch_images_per_class": 4, "lr": 1e-3},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = dict(TINY, output_dir=str(root / "run"), data={"dir": str(root / "data")})
    path = root / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["synth-data", "--config", str(path)]) == 0
    assert main(["pretrain", "--config", str(path)]) == 0
    assert main(["finetune", "--config", str(path)]) == 0
    return root, path


def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config(None, ["finetune.shots=[1, 5]", "encoder.d=32", "seed=3"])
    assert cfg.finetune.shots == [1, 5] and cfg.encoder.d == 32 and cfg.seed == 3
    assert cfg.encoder.resolution == 48 and cfg.finetune.epoch_images_per_class == 128
    assert cfg.finetune.gamma == 50.0 and cfg.finetune.lr == 1e-4 and cfg.finetune.epochs == 10
    assert apply_overrides({"a": {"b": 1}}, ["a.c=x"]) == {"a": {"b": 1, "c": "x"}}


@pytest.mark.parametrize("raw, fragment", [
    ({"finetune": {"seeds": []}}, "seeds"),
    ({"encoder": {"dd": 3}}, "unknown key"),
    ({"bogus": 1}, "unknown key"),
    ({"finetune": {"shots": [0]}}, "shots"),
    ({"augment": {"crop_min_area_fraction": 2}}, "augment"),
])
def test_config_errors_name_the_field(raw, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config_from_dict(raw)


def test_synth_summary_and_refusal(run, capsys):
    root, path = run
    assert main(["synth-data", "--config", str(path)]) == 1
    assert "not empty" in capsys.readouterr().err
    out = root / "sev"
    cfg = str(path)
    assert main(["synth-data", "--config", cfg, "--out", str(out), "--set", "synth.task=severity",
                 "--set", "synth.count=60"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split()[-3:] == ["train", "validate", "test"]
    assert sum("cardiomegaly" in ln or "heart" in ln for ln in lines[1:7]) == 6
    assert main(["synth-data", "--config", cfg, "--out", str(out), "--force", "--set",
                 "synth.task=severity", "--set", "synth.count=60"]) == 0


def test_invalid_synth_spec_exit_code(run, capsys):
    root, path = run
    rc = main(["synth-data", "--config", str(path), "--out", str(root / "bad"), "--set", "synth.grid=[1, 1]"])
    assert rc == 1 and "synth.locations" in capsys.readouterr().err


def test_manifests_written_and_finalised(run):
    root, _ = run
    for cmd in ("synth-data", "pretrain", "finetune"):
        m = json.loads((root / "run" / "manifests" / f"{cmd}.json").read_text())
        assert m["status"] == "succeeded" and m["wall_clock_seconds"] is not None
        assert m["config_snapshot"]["seed"] == 0 and m["code_version"]


def test_failed_run_finalises_manifest(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"output_dir": str(tmp_path / "r"), "data": {"dir": str(tmp_path / "nope")},
                                    "template": "fsrg:synthetic_localization"}))
    assert main(["pretrain", "--config", str(path)]) == 1
    m = json.loads((tmp_path / "r" / "manifests" / "pretrain.json").read_text())
    assert m["status"] == "failed" and "not found" in m["error"]


def test_finetune_sweep_counts(run):
    root, _ = run
    with open(root / "run" / "finetune" / "cells.csv") as fh:
        cells = list(csv.DictReader(fh))
    assert len(cells) == 2 * 2 * 2 and all(c["status"] == "ok" for c in cells)
    rows = (root / "run" / "finetune" / "results.csv").read_text().splitlines()
    assert len(rows) == 1 + 1 + 4      # header, zero-shot, shots x inits


def test_pretrain_resume_continues_numbering(run, tmp_path):
    root, path = run
    cfg = yaml.safe_load(path.read_text())
    cfg["output_dir"] = str(tmp_path / "r")
    p2 = tmp_path / "c.yaml"
    p2.write_text(yaml.safe_dump(cfg))
    assert main(["pretrain", "--config", str(p2), "--set", "pretrain.epochs=3"]) == 0
    full = (tmp_path / "r" / "pretrain" / "metrics.csv").read_text()
    assert main(["pretrain", "--config", str(p2), "--resume", "--set", "pretrain.epochs=4"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "r" / "pretrain" / "metrics.csv")))
    assert [r["epoch"] for r in rows if r["split"] == "train"] == ["0", "1", "2", "3"]
    assert (tmp_path / "r" / "pretrain" / "metrics.csv").read_text().startswith(full)


def test_eval_zero_shot_is_repeatable(run):
    root, path = run
    assert main(["eval", "--config", str(path)]) == 0
    first = {p: (root / "run" / "eval" / p).read_bytes() for p in ("metrics.json", "predictions.csv")}
    assert main(["eval", "--config", str(path)]) == 0
    for p, data in first.items():
        assert (root / "run" / "eval" / p).read_bytes() == data
    assert json.loads(first["metrics.json"])["mode"] == "zero-shot"


def test_eval_prompt_mismatch_and_corrupt_checkpoint(run, tmp_path, capsys):
    root, path = run
    cell = root / "run" / "finetune" / "cells" / "prompt_1shot_seed0.fsrgc"
    assert main(["eval", "--config", str(path), "--checkpoint", str(cell),
                 "--set", "template=fsrg:cardiomegaly"]) == 1
    assert "do not match" in capsys.readouterr().err
    bad = tmp_path / "bad.fsrgc"
    bad.write_bytes(cell.read_bytes()[:-10])
    assert main(["eval", "--config", str(path), "--checkpoint", str(bad)]) == 1
    assert "checksum" in capsys.readouterr().err


def test_report_prints_sentences_and_sidecar(run, tmp_path, capsys):
    root, path = run
    cell = root / "run" / "finetune" / "cells" / "prompt_2shot_seed0.fsrgc"
    img = root / "data" / "images" / "img_000000.png"
    side = tmp_path / "r.json"
    assert main(["report", "--config", str(path), "--checkpoint", str(cell), "--image", str(img),
                 "--sidecar", str(side)]) == 0
    text = capsys.readouterr().out
    payload = json.loads(side.read_text())
    assert text == "".join(line["text"] + "\n" for line in payload["lines"])
    assert len(payload["scores"]) == 22


def test_report_severity_exactly_one_line(run, tmp_path, capsys):
    root, path = run
    img = tmp_path / "heart.png"
    Image.fromarray(to_uint8(generate_record(SynthSpec(task="severity", image_size=32), 0)["pixels"])).save(img)
    assert main(["report", "--config", str(path), "--image", str(img), "--template", "fsrg:cardiomegaly",
                 "--sidecar", str(tmp_path / "s.json")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1 and ("heart" in lines[0] or "cardiomegaly" in lines[0])


def test_report_unreadable_image(run, tmp_path, capsys):
    _, path = run
    junk = tmp_path / "x.png"
    junk.write_text("not an image")
    assert main(["report", "--config", str(path), "--image", str(junk)]) == 1
    assert "cannot read image" in capsys.readouterr().err


def test_plot_deterministic_and_empty_dir_error(run, tmp_path, capsys):
    root, path = run
    assert main(["plot", "--config", str(path)]) == 0
    png = (root / "run" / "plot" / "shots_auc.png").read_bytes()
    assert main(["plot", "--config", str(path)]) == 0
    assert (root / "run" / "plot" / "shots_auc.png").read_bytes() == png
    assert b"Software" not in png
    assert main(["plot", "--config", str(path), "--metrics-dir", str(tmp_path)]) == 1


def test_device_env_and_bad_override(run, monkeypatch, capsys):
    _, path = run
    monkeypatch.setenv("FSRG_DEVICE", "tpu")
    assert main(["eval", "--config", str(path)]) == 1
    monkeypatch.delenv("FSRG_DEVICE")
    assert main(["eval", "--config", str(path), "--set", "novalue"]) == 1


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("FSRG_OUTPUT_ROOT", str(tmp_path))
    assert load_config(None, ["output_dir=rel"]).output_path() == tmp_path / "rel"


def test_manifest_reproduces_finetune_cell(run, tmp_path):
    """Re-running from a manifest snapshot gives byte-identical metric files."""
    root, _ = run
    manifest = root / "run" / "manifests" / "finetune.json"
    snap = json.loads(manifest.read_text())["config_snapshot"]
    assert main(["finetune", "--config", str(manifest), "--set", f"output_dir={tmp_path}",
                 "--checkpoint", str(root / "run" / "pretrain" / "bundle.fsrgc")]) == 0
    for name in ("cells.csv", "summary.json", "results.csv"):
        assert (tmp_path / "finetune" / name).read_bytes() == \
            (root / "run" / "finetune" / name).read_bytes()
    assert snap["finetune"]["shots"] == [1, 2]
    assert np.isfinite(json.loads((tmp_path / "finetune" / "summary.json").read_text())
                       ["prompt/1"]["mean"]["macro AUC"])
