"""Scoring of open-set sessions: per-group accuracies, confusion matrix,
rejection rates, and 2-D projections of embeddings for plotting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._linalg import pca
from .errors import ConfigurationError
from .openset import UNKNOWN, OpenSetDecision

UNKNOWN_COLUMN = "UNKNOWN"
UNMATCHED_COLUMN = "UNMATCHED"


@dataclass(frozen=True)
class EvalReport:
    acc_old: float                      # percent over samples of original classes
    acc_new: float                      # percent over samples of discovered classes
    confusion: np.ndarray               # rows: truth labels; cols: labels + 2 extra
    confusion_labels: tuple[str, ...]   # row label order
    rejection_rate_known: float         # percent of known-truth samples rejected
    rejection_rate_unknown: float       # percent of novel-truth samples rejected
    n_old: int
    n_new: int
    clustering: tuple[str, ...] = ()    # names of the cluster reports backing acc_new
    wall_time: float = 0.0              # informational only; never serialized

    @property
    def overall_accuracy(self) -> float:
        total = self.confusion.sum()
        if total == 0:
            return 0.0
        n_labels = len(self.confusion_labels)
        return float(np.trace(self.confusion[:, :n_labels]) / total * 100.0)


def _predicted_id(decision: OpenSetDecision | int) -> int:
    return decision.predicted if isinstance(decision, OpenSetDecision) else int(decision)


def score_session(
    decisions: Sequence[OpenSetDecision | int],
    truth: Sequence,
    known_label_by_id: Mapping[int, str],
    novel_label_by_id: Mapping[int, str] | None = None,
) -> EvalReport:
    """Score aligned (decision, truth-label) pairs.

    ``known_label_by_id`` maps original class ids to truth labels;
    ``novel_label_by_id`` maps discovered class ids to the majority truth
    label of their founding cluster (a discovered id without a majority is
    treated as unmatched and every prediction of it counts as an error).
    Truth labels present in neither mapping's value set are scored as novel.
    """
    if len(decisions) != len(truth):
        raise ConfigurationError(
            f"{len(decisions)} decisions vs {len(truth)} truth labels"
        )
    if not decisions:
        raise ConfigurationError("nothing to score")
    novel_label_by_id = dict(novel_label_by_id or {})
    known_labels = set(known_label_by_id.values())
    label_of: dict[int, str] = dict(known_label_by_id)
    label_of.update(novel_label_by_id)

    row_labels = sorted({str(t) for t in truth})
    columns = row_labels + [UNKNOWN_COLUMN, UNMATCHED_COLUMN]
    col_index = {c: i for i, c in enumerate(columns)}
    confusion = np.zeros((len(row_labels), len(columns)), dtype=np.int64)

    old_total = old_hit = new_total = new_hit = 0
    known_rejected = unknown_rejected = 0
    for decision, t in zip(decisions, truth):
        t = str(t)
        pred = _predicted_id(decision)
        row = row_labels.index(t)
        if pred == UNKNOWN:
            col = UNKNOWN_COLUMN
        else:
            mapped = label_of.get(pred)
            col = mapped if mapped in col_index else UNMATCHED_COLUMN
        confusion[row, col_index[col]] += 1

        is_old = t in known_labels
        if is_old:
            old_total += 1
            old_hit += int(col == t)
            known_rejected += int(pred == UNKNOWN)
        else:
            new_total += 1
            new_hit += int(col == t)
            unknown_rejected += int(pred == UNKNOWN)

    def pct(hit: int, total: int) -> float:
        return 100.0 * hit / total if total else 0.0

    return EvalReport(
        acc_old=pct(old_hit, old_total),
        acc_new=pct(new_hit, new_total),
        confusion=confusion,
        confusion_labels=tuple(row_labels),
        rejection_rate_known=pct(known_rejected, old_total),
        rejection_rate_unknown=pct(unknown_rejected, new_total),
        n_old=old_total,
        n_new=new_total,
    )


def majority_label(members_truth: Sequence) -> str | None:
    """Most common truth label; None on a tie (unmatched cluster)."""
    values, counts = np.unique(
        np.asarray([str(t) for t in members_truth], dtype=object), return_counts=True
    )
    top = counts.max()
    winners = values[counts == top]
    if len(winners) != 1:
        return None
    return str(winners[0])


def project_2d(z: np.ndarray) -> np.ndarray:
    """Top-2 principal-component coordinates with a deterministic sign.

    Each component's sign is fixed so its largest-magnitude projected
    coordinate is positive (first index wins ties); this makes the output
    invariant to negating all inputs.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 3:
        raise ConfigurationError("project_2d needs at least 3 samples")
    result = pca(z, min(2, z.shape[1]))
    coords = result.scores
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 1))])
    coords = coords.copy()
    for j in range(coords.shape[1]):
        col = coords[:, j]
        pivot = int(np.argmax(np.abs(col)))
        if col[pivot] < 0:
            coords[:, j] = -col
    return coords


def projection_explained_variance(z: np.ndarray) -> np.ndarray:
    """Eigenvalues of the top-2 components (for verification and reporting)."""
    return pca(np.asarray(z, dtype=np.float64), 2).explained_variance


# ---------------------------------------------------------------------------
# Serialization


def report_to_dict(report: EvalReport) -> dict:
    """JSON-ready dict; percentages at one decimal; wall time excluded so the
    serialized report is byte-reproducible."""
    return {
        "acc_old": round(report.acc_old, 1),
        "acc_new": round(report.acc_new, 1),
        "overall_accuracy": round(report.overall_accuracy, 1),
        "rejection_rate_known": round(report.rejection_rate_known, 1),
        "rejection_rate_unknown": round(report.rejection_rate_unknown, 1),
        "n_old": report.n_old,
        "n_new": report.n_new,
        "clustering": list(report.clustering),
        "confusion_labels": list(report.confusion_labels),
        "confusion_columns": list(report.confusion_labels)
        + [UNKNOWN_COLUMN, UNMATCHED_COLUMN],
        "confusion": report.confusion.tolist(),
    }


def write_report_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n"
    )


def write_confusion_csv(report: EvalReport, path: str | Path) -> None:
    columns = list(report.confusion_labels) + [UNKNOWN_COLUMN, UNMATCHED_COLUMN]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["truth"] + columns)
        for label, row in zip(report.confusion_labels, report.confusion):
            writer.writerow([label] + [int(v) for v in row])


def write_projection_csv(
    coords: np.ndarray,
    truth: Sequence,
    predictions: Sequence,
    path: str | Path,
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "truth", "prediction"])
        for (x, y), t, p in zip(coords, truth, predictions):
            writer.writerow([repr(float(x)), repr(float(y)), t, p])
