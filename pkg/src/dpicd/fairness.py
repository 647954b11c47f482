"""Per-group performance metrics and pairwise gaps.

Micro metrics pool all (instance, label) cells.  "Parity" here is the micro
predicted-positive rate (TP + FP) / n_pairs; its absolute difference across
demographic groups is the parity gap.  Degenerate ratios (0/0) follow the
0 convention.  Report percentages are rounded half-even to two decimals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GENDERS = ("male", "female")
ETHNICITIES = ("white", "black", "hispanic", "asian")
OTHER_GROUP = "other"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n_pairs(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def confusion(pred: np.ndarray, gold: np.ndarray) -> ConfusionCounts:
    """Counts over all cells of two equal-shape binary matrices."""
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gold.shape}")
    p = pred.astype(bool)
    g = gold.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def micro_recall(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fn)


def micro_precision(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fp)


def micro_f1(counts: ConfusionCounts) -> float:
    return _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn)


def parity(counts: ConfusionCounts, n_pairs: int | None = None) -> float:
    """Predicted-positive rate over all instance-label pairs."""
    if n_pairs is None:
        n_pairs = counts.n_pairs
    return _ratio(counts.tp + counts.fp, n_pairs)


def group_metrics(counts: ConfusionCounts) -> dict[str, float]:
    return {
        "f1": micro_f1(counts),
        "parity": parity(counts),
        "recall": micro_recall(counts),
    }


@dataclass
class GroupReport:
    group_key: str                       # "gender" or "ethnicity"
    metrics: dict[str, dict[str, float]] # group -> metric -> value
    counts: dict[str, ConfusionCounts]
    gaps: dict[str, dict[tuple[str, str], float]]  # metric -> pair -> |diff|
    max_gap: dict[str, float]

    def rounded(self) -> dict:
        """JSON-friendly view with table-precision (2-decimal) rounding."""
        pairs = {
            metric: {f"{a}|{b}": round(v, 2) for (a, b), v in table.items()}
            for metric, table in self.gaps.items()
        }
        return {
            "group_key": self.group_key,
            "metrics": {
                g: {m: round(v, 2) for m, v in row.items()}
                for g, row in self.metrics.items()
            },
            "gaps": pairs,
            "max_gap": {m: round(v, 2) for m, v in self.max_gap.items()},
        }


def group_gaps(
    preds: np.ndarray,
    golds: np.ndarray,
    group_labels: list[str] | np.ndarray,
    group_key: str = "group",
    known_groups: tuple[str, ...] | None = None,
) -> GroupReport:
    """Metrics per demographic group plus all pairwise absolute gaps.

    Instances outside `known_groups` are pooled under "other" and excluded
    from pairwise gaps; a group with zero instances is absent from the
    report, never reported as 0.
    """
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    groups = np.asarray(group_labels)
    if preds.shape != golds.shape or preds.shape[0] != len(groups):
        raise ValueError("preds, golds and group_labels sizes disagree")
    if known_groups is None:
        known_groups = tuple(dict.fromkeys(groups.tolist()))

    canonical = np.array(
        [g if g in known_groups else OTHER_GROUP for g in groups.tolist()]
    )
    counts: dict[str, ConfusionCounts] = {}
    for g in (*known_groups, OTHER_GROUP):
        mask = canonical == g
        if not np.any(mask):
            continue
        counts[g] = confusion(preds[mask], golds[mask])
    metrics = {g: group_metrics(c) for g, c in counts.items()}

    gap_groups = [g for g in counts if g != OTHER_GROUP]
    gaps: dict[str, dict[tuple[str, str], float]] = {}
    max_gap: dict[str, float] = {}
    for metric in ("f1", "parity", "recall"):
        table: dict[tuple[str, str], float] = {}
        for i, a in enumerate(gap_groups):
            for b in gap_groups[i + 1 :]:
                table[(a, b)] = abs(metrics[a][metric] - metrics[b][metric])
        gaps[metric] = table
        max_gap[metric] = max(table.values()) if table else 0.0
    return GroupReport(
        group_key=group_key, metrics=metrics, counts=counts, gaps=gaps, max_gap=max_gap
    )


def format_group_table(report: GroupReport) -> str:
    """Aligned plain-text table in the style of the per-group results tables."""
    lines = [
        f"Group metrics by {report.group_key} "
        "(parity = micro predicted-positive rate)",
        f"{'Group':<12} {'F1':>6} {'Parity':>8} {'Recall':>8}",
    ]
    for g, row in report.metrics.items():
        lines.append(
            f"{g:<12} {row['f1']:>6.2f} {row['parity']:>8.2f} {row['recall']:>8.2f}"
        )
    for metric, table in report.gaps.items():
        for (a, b), v in table.items():
            lines.append(f"gap[{metric}] {a} vs {b}: {v:.2f}")
    for metric, v in report.max_gap.items():
        lines.append(f"max gap[{metric}]: {v:.2f}")
    return "\n".join(lines) + "\n"
