"""ROC-AUC and the aggregation schemes used to compare models.

All averages are unweighted. A class whose evaluation labels contain only one
polarity has no defined AUC; it is skipped (with a log line) rather than
counted as 0 or 0.5.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import UndefinedMetricError

log = logging.getLogger(__name__)


@dataclass
class ScoredPredictions:
    image_ids: list[str]
    scores: np.ndarray   # (N, C)
    labels: np.ndarray   # (N, C) in {+1, -1}
    mask: np.ndarray     # (N, C) bool; False = excluded from every metric

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not (self.scores.shape == self.labels.shape == self.mask.shape):
            raise ValueError("scores, labels and mask must share one (N, C) shape")
        if len(self.image_ids) != self.scores.shape[0]:
            raise ValueError("one image id per row required")
        if not np.isfinite(self.scores[self.mask]).all():
            raise ValueError("scores must be finite")


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney estimate of the ROC-AUC; tied scores count one half.

    Sort once, give tied scores their average rank, and turn the positive
    rank sum into U. Labels are +1 / -1 (1 / 0 are accepted too).
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) > 0
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # runs of equal scores share the mean of their 1-based ranks
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], ss.size]
    run_rank = (starts + 1 + ends) / 2.0
    ranks[order] = np.repeat(run_rank, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc(preds: ScoredPredictions) -> dict[int, float]:
    """AUC of every class with both polarities present among unmasked rows."""
    out = {}
    for c in range(preds.scores.shape[1]):
        m = preds.mask[:, c]
        try:
            out[c] = roc_auc(preds.scores[m, c], preds.labels[m, c])
        except UndefinedMetricError as exc:
            log.info("class %d skipped: %s", c, exc)
    return out


def _mean(values: Sequence[float]) -> float:
    return math.fsum(sorted(values)) / len(values)


def location_averaged_auc(preds: ScoredPredictions,
                          grouping: Mapping[str, Sequence[int]]) -> tuple[dict[str, float], float]:
    """Per-pathology mean AUC over its location classes, and the macro average."""
    C = preds.scores.shape[1]
    seen: set[int] = set()
    for name, idx in grouping.items():
        for i in idx:
            if not 0 <= i < C:
                raise ValueError(f"grouping {name!r}: class {i} out of range 0..{C - 1}")
            if i in seen:
                raise ValueError(f"grouping: class {i} appears in more than one pathology")
            seen.add(i)
    aucs = per_class_auc(preds)
    result = {}
    for name, idx in grouping.items():
        vals = [aucs[i] for i in idx if i in aucs]
        if not vals:
            log.warning("pathology %r excluded: no location class has a defined AUC", name)
            continue
        result[name] = _mean(vals)
    if not result:
        raise UndefinedMetricError("no pathology has a defined AUC")
    return result, _mean(list(result.values()))


def severity_auc(probabilities: np.ndarray, levels: Sequence[int],
                 num_levels: int | None = None) -> tuple[dict[int, float], float]:
    """Macro one-vs-rest AUC, scoring each level by its own softmax probability.

    ``levels[n]`` is the true level index of image n. Levels absent from the
    evaluation set are left out with a warning.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    lv = np.asarray(levels)
    K = num_levels or p.shape[1]
    present = sorted(set(int(v) for v in lv))
    if len(present) < 2:
        raise UndefinedMetricError(f"severity AUC undefined with levels {present} present")
    per_level = {}
    for k in range(K):
        if k not in present:
            log.warning("severity level %d absent from evaluation set; excluded", k)
            continue
        per_level[k] = roc_auc(p[:, k], np.where(lv == k, 1, -1))
    return per_level, _mean(list(per_level.values()))


def exclusive_levels(labels: np.ndarray, mask: np.ndarray, group: Sequence[int]) -> np.ndarray:
    """Row-wise true level inside an exclusive group; -1 where not exactly one positive."""
    sub = (labels[:, group] == 1) & mask[:, group]
    out = np.full(labels.shape[0], -1, dtype=np.int64)
    one = sub.sum(1) == 1
    out[one] = sub[one].argmax(1)
    return out


# -- tables and dumps --------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def emit_results_table(runs: Sequence[tuple[str, Mapping[str, float]]], path: str | Path,
                       label_header: str = "method") -> tuple[Path, Path]:
    """Write ``<path>.csv`` and an aligned ``<path>.txt``; one row per labelled run.

    Every run must report the same metric names; column order is taken from
    the first run.
    """
    if not runs:
        raise ValueError("no runs to tabulate")
    columns = list(runs[0][1].keys())
    for label, metrics in runs:
        if set(metrics) != set(columns):
            raise ValueError(f"run {label!r} has columns {sorted(metrics)}, expected {sorted(columns)}")
    header = [label_header] + columns
    rows = [[label] + [_fmt(float(m[c])) for c in columns] for label, m in runs]
    path = Path(path)
    csv_path, txt_path = path.with_suffix(".csv"), path.with_suffix(".txt")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    widths = [max(len(r[k]) for r in [header] + rows) for k in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[k]) if k == 0 else cell.rjust(widths[k])
                       for k, cell in enumerate(r)).rstrip() for r in [header] + rows]
    lines.insert(1, "-" * len(lines[0]))
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return csv_path, txt_path


def write_prediction_dump(preds: ScoredPredictions, path: str | Path) -> None:
    """Long-format CSV: image_id, class_index, score, label, mask."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "class_index", "score", "label", "mask"])
        N, C = preds.scores.shape
        for n in range(N):
            for c in range(C):
                w.writerow([preds.image_ids[n], c, repr(float(preds.scores[n, c])),
                            int(preds.labels[n, c]), int(preds.mask[n, c])])


def read_prediction_dump(path: str | Path) -> ScoredPredictions:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    ids = list(dict.fromkeys(r["image_id"] for r in rows))
    C = max(int(r["class_index"]) for r in rows) + 1
    pos = {i: k for k, i in enumerate(ids)}
    scores = np.zeros((len(ids), C))
    labels = np.zeros((len(ids), C), dtype=np.int8)
    mask = np.zeros((len(ids), C), dtype=bool)
    for r in rows:
        n, c = pos[r["image_id"]], int(r["class_index"])
        scores[n, c] = float(r["score"])
        labels[n, c] = int(r["label"])
        mask[n, c] = r["mask"] == "1"
    return ScoredPredictions(ids, scores, labels, mask)


def evaluate_template(tree, preds: ScoredPredictions, gamma: float = 50.0) -> dict[str, object]:
    """Metrics appropriate to a template's structure.

    Product groups get location-averaged AUC per attribute; every exclusive
    group gets a macro one-vs-rest AUC from its softmax probabilities.
    ``macro_auc`` is the unweighted mean of the parts that are defined.
    """
    from .head import predict_probabilities

    out: dict[str, object] = {}
    parts = []
    grouping = tree.pathology_grouping()
    if grouping:
        try:
            per, macro = location_averaged_auc(preds, grouping)
            out["pathology_auc"] = per
            out["localization_auc"] = macro
            parts.append(macro)
        except UndefinedMetricError as exc:
            log.warning("localization AUC undefined: %s", exc)
    if tree.exclusive_groups():
        probs = predict_probabilities(tree, preds.scores, gamma)
        for node in tree.nodes:
            if not node.exclusive:
                continue
            group = node.class_indices
            levels = exclusive_levels(preds.labels, preds.mask, group)
            keep = levels >= 0
            try:
                per, macro = severity_auc(probs[keep][:, group], levels[keep], len(group))
            except UndefinedMetricError as exc:
                log.warning("group %r: %s", node.node_id, exc)
                continue
            out.setdefault("group_auc", {})[node.node_id] = macro
            out.setdefault("level_auc", {})[node.node_id] = {node.prompts[k][1]: v for k, v in per.items()}
            parts.append(macro)
    out["macro_auc"] = _mean(parts) if parts else float("nan")
    return out
