"""Evaluation: confusion metrics in two weightings, EDF matching, error attribution.

Diastole (label 1) is the positive class everywhere.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyEvaluation, ShapeError

log = logging.getLogger(__name__)

RATE_NAMES = ("accuracy", "sensitivity", "specificity", "ppv", "npv")
HR_EDGES = (30.0, 55.0, 65.0, 75.0, 85.0, 95.0)
HR_LABELS = ("30-55", "55-65", "65-75", "75-85", "85-95", ">95")
OUT_OF_RANGE = "out of range"


def eligibility(gt) -> np.ndarray:
    """Frames whose label is exactly 0 or 1 and equal to every existing neighbour."""
    g = np.asarray(gt, dtype=np.float64)
    ok = (g == 0.0) | (g == 1.0)
    if len(g) > 1:
        same = g[1:] == g[:-1]
        ok[:-1] &= same
        ok[1:] &= same
    return ok


@dataclass
class EvalPair:
    """Ground truth and binary prediction for one sequence."""

    gt: np.ndarray
    pred: np.ndarray
    eligible: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.float64)
        self.pred = np.asarray(self.pred, dtype=np.int8)
        if self.eligible is None:
            self.eligible = eligibility(self.gt)
        self.eligible = np.asarray(self.eligible, dtype=bool)
        if not (len(self.gt) == len(self.pred) == len(self.eligible)):
            raise ShapeError(
                f"length mismatch: gt {len(self.gt)}, pred {len(self.pred)}, eligible {len(self.eligible)}"
            )

    def counts(self) -> dict:
        e = self.eligible
        t = self.gt[e] == 1.0
        p = self.pred[e] == 1
        return {
            "tp": int(np.sum(t & p)),
            "tn": int(np.sum(~t & ~p)),
            "fp": int(np.sum(~t & p)),
            "fn": int(np.sum(t & ~p)),
        }


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def rates_from_counts(c: dict) -> dict:
    """Rates from a confusion table; a rate with an empty denominator is ``None``."""
    tp, tn, fp, fn = c["tp"], c["tn"], c["fp"], c["fn"]
    return {
        "accuracy": _ratio(tp + tn, tp + tn + fp + fn),
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "ppv": _ratio(tp, tp + fp),
        "npv": _ratio(tn, tn + fn),
    }


def confusion_metrics(pairs, weighting: str = "per-angiography") -> dict:
    """Rates under ``"per-angiography"`` or ``"per-frame"`` weighting.

    Per-angiography averages each sequence's rates, skipping sequences where a
    rate is undefined (for instance sensitivity without positive frames).
    Sequences without eligible frames do not take part.
    """
    if weighting not in ("per-angiography", "per-frame"):
        raise ValueError(f"unknown weighting {weighting!r}")
    tables = [p.counts() for p in pairs]
    tables = [c for c in tables if sum(c.values()) > 0]
    if not tables:
        raise EmptyEvaluation("no eligible frames in the evaluation set")
    if weighting == "per-frame":
        total = {k: sum(c[k] for c in tables) for k in tables[0]}
        return rates_from_counts(total)
    per_seq = [rates_from_counts(c) for c in tables]
    out = {}
    for name in RATE_NAMES:
        vals = [r[name] for r in per_seq if r[name] is not None]
        # exact rational mean: correctly rounded and independent of order
        out[name] = float(statistics.mean(vals)) if vals else None
    return out


def edf_frames(labels, source: str = "prediction") -> list[int]:
    """EDF indices: diastolic frames followed by a systolic frame.

    For ``source="ground_truth"`` an intermediate successor also counts.
    """
    y = np.asarray(labels, dtype=np.float64)
    if source == "prediction":
        nxt = y[1:] == 0.0
    elif source == "ground_truth":
        nxt = (y[1:] >= 0.0) & (y[1:] < 1.0)
    else:
        raise ValueError(f"unknown source {source!r}")
    return [int(i) for i in np.flatnonzero((y[:-1] == 1.0) & nxt)]


def edf_match(pred, gt, tol: int = 1) -> dict:
    """Greedy one-to-one matching in increasing index order within ``±tol`` frames."""
    pred = sorted(int(v) for v in pred)
    gt = sorted(int(v) for v in gt)
    used = [False] * len(gt)
    matched = 0
    for p in pred:
        for j, g in enumerate(gt):
            if not used[j] and abs(p - g) <= tol:
                used[j] = True
                matched += 1
                break
    if not pred and not gt:
        return {"precision": 1.0, "recall": 1.0, "f1": 1.0, "matched": 0, "n_pred": 0, "n_gt": 0}
    precision = matched / len(pred) if pred else 0.0
    recall = matched / len(gt) if gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "matched": matched,
            "n_pred": len(pred), "n_gt": len(gt)}


def transitions(gt) -> list[tuple[float, str]]:
    """Ground-truth transitions as ``(position, kind)``.

    A transition is a maximal run of label changes between two binary frames;
    its position is the midpoint of the run in frame units. ``kind`` is
    ``"S->D"`` for 0 to 1 and ``"D->S"`` for 1 to 0. Runs that start and end
    on the same value are not transitions.
    """
    g = np.asarray(gt, dtype=np.float64)
    binary = (g == 0.0) | (g == 1.0)
    out = []
    i = 0
    n = len(g)
    while i < n - 1:
        if g[i + 1] == g[i]:
            i += 1
            continue
        start = i
        j = i + 1
        while j < n and not binary[j]:
            j += 1
        end = min(j, n - 1)
        before = g[start]
        after = g[end]
        if before != after and binary[start] and binary[end]:
            kind = "S->D" if after == 1.0 else "D->S"
            out.append(((start + end) / 2.0, kind))
        i = end if end > start else start + 1
    return out


def transition_error_split(pairs) -> dict:
    """Share of misclassified eligible frames nearest to each transition kind.

    Ties go to the preceding transition. Returns ``None`` fractions when there
    is no attributable error.
    """
    counts = {"S->D": 0, "D->S": 0}
    for pair in pairs:
        trans = transitions(pair.gt)
        if not trans:
            continue
        wrong = pair.eligible & ((pair.gt == 1.0) != (pair.pred == 1))
        for f in np.flatnonzero(wrong):
            best = min(trans, key=lambda t: (abs(f - t[0]), t[0]))
            counts[best[1]] += 1
    total = counts["S->D"] + counts["D->S"]
    if total == 0:
        return {"systole_to_diastole": None, "diastole_to_systole": None, "errors": 0}
    return {
        "systole_to_diastole": counts["S->D"] / total,
        "diastole_to_systole": counts["D->S"] / total,
        "errors": total,
    }


def hr_bin(bpm: float) -> str:
    """Table bin for a heart rate; edges are half-open ``[lo, hi)``."""
    if not bpm >= HR_EDGES[0]:
        return OUT_OF_RANGE
    k = int(np.searchsorted(HR_EDGES, bpm, side="right")) - 1
    return HR_LABELS[k]


def heart_rate_bins(accuracies, bpms) -> list[dict]:
    """Mean per-sequence accuracy and population share per heart-rate bin."""
    accuracies = list(accuracies)
    bpms = list(bpms)
    if len(accuracies) != len(bpms):
        raise ShapeError("one bpm value per sequence is required")
    groups: dict[str, list[float]] = {b: [] for b in (*HR_LABELS, OUT_OF_RANGE)}
    for acc, bpm in zip(accuracies, bpms):
        b = hr_bin(bpm)
        if b == OUT_OF_RANGE:
            log.warning("heart rate %.1f bpm is below the lowest bin", bpm)
        groups[b].append(acc)
    n = len(accuracies)
    rows = []
    for b, vals in groups.items():
        vals = [v for v in vals if v is not None]
        rows.append({
            "bin": b,
            "count": len(groups[b]),
            "share": len(groups[b]) / n if n else 0.0,
            "accuracy": math.fsum(vals) / len(vals) if vals else None,
        })
    return rows


@dataclass
class MetricReport:
    per_angiography: dict
    per_frame: dict
    edf: dict
    transition_split: dict
    heart_rate: list = field(default_factory=list)
    n_sequences: int = 0

    def to_dict(self) -> dict:
        return {
            "n_sequences": self.n_sequences,
            "per_angiography": self.per_angiography,
            "per_frame": self.per_frame,
            "edf": self.edf,
            "transition_split": self.transition_split,
            "heart_rate": self.heart_rate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Flat ``section,metric,value`` table."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "metric", "value"])
        for section in ("per_angiography", "per_frame", "edf", "transition_split"):
            for k, v in getattr(self, section).items():
                w.writerow([section, k, "" if v is None else repr(v)])
        for row in self.heart_rate:
            for k in ("count", "share", "accuracy"):
                v = row[k]
                w.writerow([f"heart_rate:{row['bin']}", k, "" if v is None else repr(v)])
        return buf.getvalue()


def evaluate(pairs, bpms=None, tol: int = 1) -> MetricReport:
    """Full report over ``pairs``; ``bpms`` (one per pair) enables the heart-rate table."""
    pairs = list(pairs)
    n_pred = n_gt = matched = 0
    for p in pairs:
        m = edf_match(edf_frames(p.pred, "prediction"), edf_frames(p.gt, "ground_truth"), tol)
        n_pred += m["n_pred"]
        n_gt += m["n_gt"]
        matched += m["matched"]
    precision = matched / n_pred if n_pred else (1.0 if n_gt == 0 else 0.0)
    recall = matched / n_gt if n_gt else (1.0 if n_pred == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    edf = {"precision": precision, "recall": recall, "f1": f1, "tolerance": tol,
           "matched": matched, "n_pred": n_pred, "n_gt": n_gt}
    hr = []
    if bpms is not None:
        accs = [rates_from_counts(p.counts())["accuracy"] for p in pairs]
        hr = heart_rate_bins(accs, bpms)
    return MetricReport(
        per_angiography=confusion_metrics(pairs, "per-angiography"),
        per_frame=confusion_metrics(pairs, "per-frame"),
        edf=edf,
        transition_split=transition_error_split(pairs),
        heart_rate=hr,
        n_sequences=len(pairs),
    )


def plot_sequence(path, gt, probs, labels=None, title: str = "") -> None:
    """SVG plot of predicted probabilities against ground truth (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 2.5))
    x = np.arange(len(gt))
    ax.step(x, gt, where="mid", color="0.3", label="ground truth")
    ax.plot(x, probs, color="tab:blue", label="probability")
    if labels is not None:
        ax.step(x, labels, where="mid", color="tab:orange", alpha=0.7, label="label")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("frame")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_heart_rate(path, rows) -> None:
    """SVG bar chart of per-bin accuracy (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in rows if r["bin"] != OUT_OF_RANGE]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar([r["bin"] for r in rows], [r["accuracy"] or 0.0 for r in rows], color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.set_xlabel("heart rate (bpm)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
