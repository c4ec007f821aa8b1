"""Ranking metrics, frequency/recency baselines, and evaluation reports.

Accuracy@k is the fraction of test cases whose true app appears in the top-k
prediction list; MRR@k is the mean reciprocal rank of the true app within the
top k, counting zero when it is absent. Both are computed with exact rational
arithmetic internally so the metric-ordering invariants hold exactly, and
converted to floats only at the report boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

__all__ = [
    "EvalReport",
    "accuracy_at_k",
    "baseline_mfu",
    "baseline_mru",
    "compute_metrics",
    "make_report",
    "mfu_ranking",
    "mrr_at_k",
    "mru_rankings",
    "render_report_table",
    "write_reports",
]

METRIC_ACCURACY_KS = (1, 3, 5)
METRIC_MRR_KS = (3, 5)


def _check_aligned(predictions: Sequence, truths: Sequence) -> None:
    if len(predictions) != len(truths):
        raise ValueError(
            f"{len(predictions)} predictions for {len(truths)} truths"
        )
    if not truths:
        raise ValueError("cannot evaluate an empty test set")


def _exact_accuracy(predictions: Sequence[Sequence[int]], truths: Sequence[int], k: int) -> Fraction:
    hits = sum(1 for pred, truth in zip(predictions, truths) if truth in list(pred)[:k])
    return Fraction(hits, len(truths))


def _exact_mrr(predictions: Sequence[Sequence[int]], truths: Sequence[int], k: int) -> Fraction:
    total = Fraction(0)
    for pred, truth in zip(predictions, truths):
        top = list(pred)[:k]
        if truth in top:
            total += Fraction(1, top.index(truth) + 1)
    return total / len(truths)


def accuracy_at_k(
    predictions: Sequence[Sequence[int]], truths: Sequence[int], k: int
) -> float:
    """Mean of per-case hits: 1 when the truth is in the top-k, else 0."""
    if k < 1:
        raise ValueError("k must be at least 1")
    _check_aligned(predictions, truths)
    return float(_exact_accuracy(predictions, truths, k))


def mrr_at_k(predictions: Sequence[Sequence[int]], truths: Sequence[int], k: int) -> float:
    """Mean reciprocal rank within the top-k; ranks beyond k count zero."""
    if k < 1:
        raise ValueError("k must be at least 1")
    _check_aligned(predictions, truths)
    return float(_exact_mrr(predictions, truths, k))


def compute_metrics(
    predictions: Sequence[Sequence[int]],
    truths: Sequence[int],
    accuracy_ks: Sequence[int] = METRIC_ACCURACY_KS,
    mrr_ks: Sequence[int] = METRIC_MRR_KS,
) -> dict[str, float]:
    """The standard metric block, with its ordering invariants verified.

    Raises if A@k ever decreases in k or if any MRR@k falls outside
    [A@1, A@k]; both hold mathematically, so a violation means corrupt
    inputs.
    """
    _check_aligned(predictions, truths)
    acc = {k: _exact_accuracy(predictions, truths, k) for k in accuracy_ks}
    mrr = {k: _exact_mrr(predictions, truths, k) for k in mrr_ks}
    ordered = sorted(accuracy_ks)
    for low, high in zip(ordered, ordered[1:]):
        if acc[low] > acc[high]:
            raise ValueError(f"A@{low} > A@{high}: metric invariant violated")
    a1 = acc[min(accuracy_ks)]
    for k, value in mrr.items():
        if not (a1 <= value <= acc.get(k, Fraction(1))):
            raise ValueError(f"MRR@{k} outside [A@1, A@{k}]: metric invariant violated")
    metrics = {f"A@{k}": float(acc[k]) for k in accuracy_ks}
    metrics.update({f"MRR@{k}": float(mrr[k]) for k in mrr_ks})
    return metrics


# -- baselines -----------------------------------------------------------


def mfu_ranking(train_app_ids: Sequence[int], k: int) -> list[int]:
    """Most-frequently-used ranking over a training stream, ties by app id."""
    counts: dict[int, int] = {}
    for app in train_app_ids:
        counts[app] = counts.get(app, 0) + 1
    ranked = sorted(counts, key=lambda app: (-counts[app], app))
    return ranked[:k]


def mru_rankings(
    stream_app_ids: Sequence[int], test_positions: Sequence[int], k: int
) -> list[list[int]]:
    """Most-recently-used rankings at each test position of a full stream.

    The ranking at a position uses the true preceding stream, including
    earlier test-point truths, ordered most recent first.
    """
    last_seen: dict[int, int] = {}
    out: list[list[int]] = []
    positions = iter(sorted(test_positions))
    next_pos = next(positions, None)
    for i, app in enumerate(stream_app_ids):
        while next_pos == i:
            out.append(sorted(last_seen, key=lambda a: -last_seen[a])[:k])
            next_pos = next(positions, None)
        last_seen[app] = i
    if next_pos is not None:
        raise ValueError(f"test position {next_pos} beyond the stream")
    return out


def baseline_mfu(train: Sequence[int], test: Sequence[int], k: int) -> list[list[int]]:
    """One MFU prediction list per test case of a single user."""
    ranking = mfu_ranking(train, k)
    return [list(ranking) for _ in test]


def baseline_mru(
    stream: Sequence[int], test_positions: Sequence[int], k: int
) -> list[list[int]]:
    """One MRU prediction list per test position of a single user."""
    return mru_rankings(stream, test_positions, k)


# -- reports --------------------------------------------------------------


@dataclass
class EvalReport:
    """Metrics for one configuration row, plus run metadata.

    ``elapsed_seconds`` is informational only and never serialized into the
    canonical report artifact, which must be byte-identical across reruns.
    """

    label: str
    config: Mapping[str, object] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    case_count: int = 0
    elapsed_seconds: float | None = None

    def to_row(self) -> dict:
        return {
            "label": self.label,
            "config": dict(self.config),
            "metrics": self.metrics,
            "case_count": self.case_count,
        }


def make_report(
    label: str,
    predictions: Sequence[Sequence[int]],
    truths: Sequence[int],
    config: Mapping[str, object] | None = None,
    elapsed_seconds: float | None = None,
) -> EvalReport:
    metrics = compute_metrics(predictions, truths)
    return EvalReport(label, dict(config or {}), metrics, len(truths), elapsed_seconds)


def render_report_table(reports: Sequence[EvalReport]) -> str:
    """Fixed-width table, one model row per report, metric columns."""
    columns = [f"A@{k}" for k in METRIC_ACCURACY_KS] + [f"M@{k}" for k in METRIC_MRR_KS]
    keys = [f"A@{k}" for k in METRIC_ACCURACY_KS] + [f"MRR@{k}" for k in METRIC_MRR_KS]
    label_width = max([len("Model")] + [len(r.label) for r in reports])
    header = "Model".ljust(label_width) + "".join(c.rjust(9) for c in columns)
    lines = [header, "-" * len(header)]
    for report in reports:
        cells = "".join(f"{report.metrics[key]:9.4f}" for key in keys)
        lines.append(report.label.ljust(label_width) + cells)
    return "\n".join(lines) + "\n"


def write_reports(
    directory: str | Path,
    name: str,
    reports: Sequence[EvalReport],
    config_hash: str,
) -> tuple[Path, Path]:
    """Write the line-delimited report and its human-readable table.

    Timing sidecar data is deliberately left out of both files; rerunning
    the same configuration must reproduce them byte for byte.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    jsonl_path = directory / f"{name}.jsonl"
    with jsonl_path.open("w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {"kind": "eval_report", "config_hash": config_hash}, sort_keys=True
            )
            + "\n"
        )
        for report in reports:
            fh.write(json.dumps(report.to_row(), sort_keys=True) + "\n")
    table_path = directory / f"{name}.txt"
    table_path.write_text(render_report_table(reports), encoding="utf-8")
    return jsonl_path, table_path
