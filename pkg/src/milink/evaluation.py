"""Linking at test time (with optional abstention) and the evaluation
protocol: micro precision/recall/F1 under the "all" and "in-positive"
settings, per-NE-type error rates, and the noise-detector accuracy curve.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .candidates import DataPoint, Mention
from .model import LinkingModel, forward_batch

__all__ = [
    "Prediction",
    "EvalReport",
    "link",
    "link_with_abstain",
    "link_batch",
    "link_by_prominence",
    "evaluate",
    "per_type_errors",
    "nd_accuracy_curve",
    "format_report",
    "report_records",
]

SETTINGS = ("all", "in-e-plus")


@dataclass(frozen=True)
class Prediction:
    """Linking decision for one mention; ``predicted`` is None when the
    model abstained or the candidate set was empty."""
    mention: Mention
    predicted: str | None
    p_noise: float | None = None
    best_score: float | None = None


def link_batch(model: LinkingModel, points, tau: float | None = None) -> list[Prediction]:
    """Link every data point; abstain where the noise probability exceeds
    ``tau`` (no abstention when ``tau`` is None).  Points with an empty
    positive set yield an empty prediction."""
    points = list(points)
    preds: list[Prediction | None] = [None] * len(points)
    scored = [(i, dp) for i, dp in enumerate(points) if dp.positive]
    for i, dp in enumerate(points):
        if not dp.positive:
            preds[i] = Prediction(dp.mention, None)
    if scored:
        fb = forward_batch(model, [dp for _, dp in scored], tape=None,
                           with_negatives=False, with_noise=True)
        values = fb.pos_scores.value[:, 0]
        pn = fb.p_noise.value[:, 0]
        for row, (i, dp) in enumerate(scored):
            lo, hi = fb.pos_starts[row], fb.pos_starts[row + 1]
            best = int(np.argmax(values[lo:hi]))  # first max = most prominent on ties
            choice: str | None = dp.positive[best]
            if tau is not None and pn[row] > tau:
                choice = None
            preds[i] = Prediction(dp.mention, choice,
                                  p_noise=float(pn[row]),
                                  best_score=float(values[lo + best]))
    return preds  # type: ignore[return-value]


def link(model: LinkingModel, datapoint: DataPoint) -> Prediction:
    """Pick the highest-scoring positive candidate (ties go to the most
    prominent); empty candidate sets produce an empty prediction."""
    return link_batch(model, [datapoint])[0]


def link_with_abstain(model: LinkingModel, datapoint: DataPoint,
                      tau: float | None = None) -> Prediction:
    """Like :func:`link`, but output nothing when the predicted noise
    probability exceeds ``tau`` (default from the model config)."""
    t = model.config.tau if tau is None else tau
    return link_batch(model, [datapoint], tau=t)[0]


def link_by_prominence(datapoint: DataPoint) -> Prediction:
    """Surface-matching baseline: the most prominent candidate wins."""
    choice = datapoint.positive[0] if datapoint.positive else None
    return Prediction(datapoint.mention, choice)


@dataclass
class EvalReport:
    setting: str
    precision: float
    recall: float
    f1: float
    n_mentions: int
    n_emitted: int
    n_correct: int
    per_type_error: dict[str, float] = field(default_factory=dict)


def _in_setting(dp: DataPoint, setting: str) -> bool:
    if setting == "all":
        return True
    if setting == "in-e-plus":
        return dp.gold_in_positive()
    raise ValueError(f"unknown setting '{setting}'; expected one of {SETTINGS}")


def evaluate(predictions, points, setting: str = "all") -> EvalReport:
    """Micro precision/recall/F1 over aligned predictions and data points.

    Precision counts only emitted predictions; recall counts every mention
    in the setting's universe, so mentions with an empty candidate set are
    automatic recall misses under "all" and are excluded from "in-e-plus"
    by definition.  Every point must carry a gold annotation.
    """
    predictions = list(predictions)
    points = list(points)
    if len(predictions) != len(points):
        raise ValueError(f"{len(predictions)} predictions vs {len(points)} points")
    total = emitted = correct = 0
    for pred, dp in zip(predictions, points):
        if dp.mention.gold is None:
            raise ValueError(f"evaluate: point {dp.point_id} lacks a gold entity")
        if not _in_setting(dp, setting):
            continue
        total += 1
        if pred.predicted is not None:
            emitted += 1
            if pred.predicted == dp.mention.gold:
                correct += 1
    precision = correct / emitted if emitted else 0.0
    recall = correct / total if total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return EvalReport(
        setting=setting, precision=precision, recall=recall, f1=f1,
        n_mentions=total, n_emitted=emitted, n_correct=correct,
        per_type_error=per_type_errors(predictions, points, setting),
    )


def per_type_errors(predictions, points, setting: str = "all") -> dict[str, float]:
    """Error fraction per named-entity type: 1 - correct/total within the
    setting's universe.  Mentions without a type annotation are skipped."""
    totals: dict[str, int] = {}
    wrong: dict[str, int] = {}
    for pred, dp in zip(predictions, points):
        ne = dp.mention.ne_type
        if ne is None or not _in_setting(dp, setting):
            continue
        totals[ne] = totals.get(ne, 0) + 1
        if pred.predicted is None or pred.predicted != dp.mention.gold:
            wrong[ne] = wrong.get(ne, 0) + 1
    return {ne: wrong.get(ne, 0) / n for ne, n in sorted(totals.items())}


def nd_accuracy_curve(pairs, tau_grid) -> list[tuple[float, float | None]]:
    """Noise-detector accuracy per threshold.

    ``pairs`` is a list of (noise probability, is_valid) tuples; accuracy
    at a threshold is the fraction of valid points among those predicted
    confident (noise probability below the threshold).  Thresholds whose
    denominator is empty report None.
    """
    pairs = [(float(p), bool(v)) for p, v in pairs]
    curve = []
    for tau in tau_grid:
        kept = [v for p, v in pairs if p < tau]
        curve.append((float(tau), sum(kept) / len(kept) if kept else None))
    return curve


# ---------------------------------------------------------------------------
# report serialization


def format_report(reports) -> str:
    """Human-readable table for one or more evaluation reports."""
    lines = []
    header = f"{'setting':<10} {'P':>8} {'R':>8} {'F1':>8} {'mentions':>9} {'emitted':>8} {'correct':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for r in reports:
        lines.append(f"{r.setting:<10} {r.precision:>8.4f} {r.recall:>8.4f} {r.f1:>8.4f} "
                     f"{r.n_mentions:>9d} {r.n_emitted:>8d} {r.n_correct:>8d}")
    for r in reports:
        if r.per_type_error:
            lines.append("")
            lines.append(f"error rate by NE type ({r.setting}):")
            for ne, err in r.per_type_error.items():
                lines.append(f"  {ne:<6} {err:.4f}")
    return "\n".join(lines) + "\n"


def report_records(reports) -> list[dict]:
    """Line-delimited record form of the reports (one dict per line)."""
    records = []
    for r in reports:
        records.append({
            "kind": "metrics", "setting": r.setting,
            "precision": r.precision, "recall": r.recall, "f1": r.f1,
            "n_mentions": r.n_mentions, "n_emitted": r.n_emitted, "n_correct": r.n_correct,
        })
        for ne, err in r.per_type_error.items():
            records.append({"kind": "type_error", "setting": r.setting,
                            "ne_type": ne, "error": err})
    return records


def write_report(path_txt, path_jsonl, reports) -> None:
    with open(path_txt, "w", encoding="utf-8") as fh:
        fh.write(format_report(reports))
    with open(path_jsonl, "w", encoding="utf-8") as fh:
        for rec in report_records(reports):
            fh.write(json.dumps(rec) + "\n")
