"""Evaluation metrics for score regression and frame-wise action labels.

Score metrics: Spearman rank correlation (average ranks on ties) and the
mean squared range-normalized score error, reported x100 in CLI output.
Label metrics: frame accuracy, segmental edit score, and segment F1 at
overlap thresholds 10/25/50%, computed on maximal-run segment lists.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ACTION_LEXICON",
    "MetricError",
    "TooFewSamplesError",
    "ConstantRanksError",
    "Segment",
    "segments_of",
    "validate_labels",
    "average_ranks",
    "spearman",
    "relative_l2",
    "frame_accuracy",
    "levenshtein",
    "segmental_edit_score",
    "f1_at_k",
    "metric_report",
    "REPORT_SCHEMA",
]

# Closed label lexicon: six shared action types, five required elements,
# and the free element.  Anything else is rejected at load time.
ACTION_LEXICON = (
    "upper",
    "lower",
    "float",
    "none",
    "acrobatic",
    "cadence",
    "required_1",
    "required_2",
    "required_3",
    "required_4",
    "required_5",
    "free",
)

_LEXICON_SET = frozenset(ACTION_LEXICON)


class MetricError(ValueError):
    """Base class for metric input failures."""


class TooFewSamplesError(MetricError):
    """Rank correlation needs at least two observations."""


class ConstantRanksError(MetricError):
    """All-tied input has zero rank variance; correlation is undefined."""


def validate_labels(labels: Sequence[str]) -> list[str]:
    """Check a frame label sequence against the closed lexicon."""
    labels = list(labels)
    if not labels:
        raise MetricError("label sequence must be nonempty")
    for i, label in enumerate(labels):
        if label not in _LEXICON_SET:
            raise MetricError(f"unknown action label {label!r} at frame {i}")
    return labels


@dataclass(frozen=True)
class Segment:
    """Maximal run of one label over a half-open frame interval."""

    label: str
    start: int
    end: int

    def __post_init__(self):
        if self.end <= self.start:
            raise MetricError(f"empty segment [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


def segments_of(labels: Sequence[str]) -> list[Segment]:
    """Collapse a frame label sequence into its maximal-run segments."""
    labels = list(labels)
    if not labels:
        raise MetricError("label sequence must be nonempty")
    segments = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            segments.append(Segment(labels[start], start, i))
            start = i
    return segments


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of their rank block."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(y: Sequence[float], y_hat: Sequence[float]) -> float:
    """Rank correlation: Pearson correlation of the average-rank vectors."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise MetricError("inputs must be equal-length 1-D sequences")
    if len(y) < 2:
        raise TooFewSamplesError("need at least 2 observations")
    ra, rb = average_ranks(y), average_ranks(y_hat)
    da, db = ra - ra.mean(), rb - rb.mean()
    va, vb = float(da @ da), float(db @ db)
    if va == 0.0 or vb == 0.0:
        raise ConstantRanksError("rank variance is zero (all values tied)")
    return float((da @ db) / np.sqrt(va * vb))


def relative_l2(y: Sequence[float], y_hat: Sequence[float],
                y_min: float, y_max: float) -> float:
    """Mean squared residual after normalizing by the score range."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1 or len(y) == 0:
        raise MetricError("inputs must be equal-length nonempty 1-D sequences")
    span = float(y_max) - float(y_min)
    if span <= 0.0:
        raise MetricError("degenerate score range: y_max must exceed y_min")
    return float(np.mean(((y - y_hat) / span) ** 2))


def frame_accuracy(gt: Sequence[str], pred: Sequence[str]) -> float:
    """Percentage of frames whose labels agree."""
    gt, pred = list(gt), list(pred)
    if len(gt) != len(pred):
        raise MetricError(f"length mismatch: {len(gt)} vs {len(pred)}")
    if not gt:
        raise MetricError("label sequences must be nonempty")
    hits = sum(1 for a, b in zip(gt, pred) if a == b)
    return 100.0 * hits / len(gt)


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Classic edit distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1,
                           cur[j - 1] + 1,
                           prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[len(b)]


def _segment_labels(segments) -> list[str]:
    if segments and isinstance(segments[0], str):
        segments = segments_of(segments)
    return [s.label for s in segments]


def _as_segments(segments) -> list[Segment]:
    if segments and isinstance(segments[0], str):
        return segments_of(segments)
    return list(segments)


def segmental_edit_score(gt, pred) -> float:
    """100 * (1 - edit distance between segment label strings / max length).

    Accepts either segment lists or raw frame label sequences; raw
    sequences are collapsed to maximal runs first, so splitting a segment
    at its midpoint (same label on both halves) does not change the score.
    """
    la, lb = _segment_labels(gt), _segment_labels(pred)
    if not la or not lb:
        raise MetricError("segment lists must be nonempty")
    return 100.0 * (1.0 - levenshtein(la, lb) / max(len(la), len(lb)))


def _interval_iou(a: Segment, b: Segment) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union if union > 0 else 0.0


def f1_at_k(gt, pred, k: float) -> float:
    """Segment F1 at overlap threshold ``k`` (inclusive: IoU >= k counts).

    Candidate pairs must share a label; matching is greedy best-IoU-first
    with one-to-one consumption of ground-truth segments, so the score is
    monotone non-increasing in ``k``.
    """
    if not (0.0 < k < 1.0):
        raise MetricError(f"overlap threshold must be in (0, 1), got {k}")
    gt, pred = _as_segments(gt), _as_segments(pred)
    if not gt and not pred:
        return 100.0
    candidates = []
    for pi, p in enumerate(pred):
        for gi, g in enumerate(gt):
            if p.label != g.label:
                continue
            iou = _interval_iou(p, g)
            if iou >= k:
                candidates.append((-iou, pi, gi))
    candidates.sort()
    used_pred, used_gt = set(), set()
    tp = 0
    for _, pi, gi in candidates:
        if pi in used_pred or gi in used_gt:
            continue
        used_pred.add(pi)
        used_gt.add(gi)
        tp += 1
    fp = len(pred) - tp
    fn = len(gt) - tp
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 100.0 * 2.0 * precision * recall / (precision + recall)


# JSON shape of a metric report; segmentation entries are null when no
# label predictions were supplied.
REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "rho": {"type": ["number", "null"]},
        "r_l2_x100": {"type": ["number", "null"]},
        "acc": {"type": ["number", "null"]},
        "edit": {"type": ["number", "null"]},
        "f1": {
            "type": "object",
            "properties": {
                "10": {"type": ["number", "null"]},
                "25": {"type": ["number", "null"]},
                "50": {"type": ["number", "null"]},
            },
            "required": ["10", "25", "50"],
            "additionalProperties": False,
        },
    },
    "required": ["rho", "r_l2_x100", "acc", "edit", "f1"],
    "additionalProperties": True,
}


def metric_report(y=None, y_hat=None, y_min=None, y_max=None,
                  label_pairs=None) -> dict:
    """Assemble the standard metric report.

    ``label_pairs`` is an optional list of (gt_labels, pred_labels)
    sequences; frame accuracy is pooled over frames, edit and F1 scores
    are averaged per sequence, matching the usual segmentation protocol.
    """
    report = {
        "rho": None,
        "r_l2_x100": None,
        "acc": None,
        "edit": None,
        "f1": {"10": None, "25": None, "50": None},
    }
    if y is not None and y_hat is not None:
        report["rho"] = spearman(y, y_hat)
        report["r_l2_x100"] = 100.0 * relative_l2(y, y_hat, y_min, y_max)
    if label_pairs:
        total = correct = 0
        edits = []
        f1s = {k: [] for k in (0.10, 0.25, 0.50)}
        for gt, pred in label_pairs:
            gt = validate_labels(gt)
            pred = validate_labels(pred)
            total += len(gt)
            correct += sum(1 for a, b in zip(gt, pred) if a == b)
            edits.append(segmental_edit_score(gt, pred))
            for k in f1s:
                f1s[k].append(f1_at_k(gt, pred, k))
        report["acc"] = 100.0 * correct / total
        report["edit"] = float(np.mean(edits))
        report["f1"] = {"10": float(np.mean(f1s[0.10])),
                        "25": float(np.mean(f1s[0.25])),
                        "50": float(np.mean(f1s[0.50]))}
    return report
