"""Scoring: micro F1 for three-way and two-way verification, best-variant
evidence F1, confusion matrices, and the long-input bucket breakdown.

Verification scores are percentages in [0, 100]; evidence scores are
fractions in [0, 1] (reports render them as percentages). Reported
numbers round half-up to two decimals.

Each official scorer has a deliberately naive reference twin (suffix
``_reference``) computing the same quantity along an independent code
path; tests cross-check the pair on randomized inputs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Iterable, Sequence

from .table_model import VERDICT_ORDER, Verdict


def round2(x: float) -> float:
    """Half-up rounding to 2 decimals, as in the reported tables."""
    return float(Decimal(repr(x)).quantize(Decimal("0.01"), ROUND_HALF_UP))


def _check_lengths(gold: Sequence, pred: Sequence) -> None:
    if len(gold) != len(pred):
        raise ValueError(
            f"gold and prediction lengths differ: {len(gold)} vs {len(pred)}"
        )


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@dataclass(frozen=True)
class ThreeWayResult:
    micro: float                       # percentage
    per_class: dict[Verdict, float]    # one-vs-rest F1 percentages

    def __iter__(self):
        yield self.micro
        yield self.per_class


def f1_micro_3way(gold: Sequence[Verdict], pred: Sequence[Verdict]) -> ThreeWayResult:
    """Micro F1 over the three classes plus per-class one-vs-rest F1.

    For single-label prediction micro F1 equals accuracy, which is how
    the aggregate is computed here; the reference twin counts TP/FP/FN.
    """
    _check_lengths(gold, pred)
    if not gold:
        return ThreeWayResult(0.0, {v: 0.0 for v in VERDICT_ORDER})
    correct = sum(g == p for g, p in zip(gold, pred))
    per_class = {}
    for label in VERDICT_ORDER:
        tp = sum(1 for g, p in zip(gold, pred) if g == label and p == label)
        fp = sum(1 for g, p in zip(gold, pred) if g != label and p == label)
        fn = sum(1 for g, p in zip(gold, pred) if g == label and p != label)
        per_class[label] = 100.0 * _f1(tp, fp, fn)
    return ThreeWayResult(100.0 * correct / len(gold), per_class)


def f1_micro_2way(
    gold: Sequence[Verdict],
    pred: Sequence[Verdict],
    unknown_as_error: bool = False,
) -> float:
    """Micro F1 restricted to entailed/refuted gold statements.

    Unknown-gold statements are dropped. An unknown prediction on a kept
    statement is excluded from the precision denominator but still costs
    recall; with ``unknown_as_error`` it instead counts as a plain wrong
    prediction, collapsing the score to accuracy on the kept statements.
    """
    _check_lengths(gold, pred)
    kept = [(g, p) for g, p in zip(gold, pred) if g is not Verdict.UNKNOWN]
    if not kept:
        return 0.0
    correct = sum(g == p for g, p in kept)
    if unknown_as_error:
        predicted = len(kept)
    else:
        predicted = sum(1 for _, p in kept if p is not Verdict.UNKNOWN)
    total = len(kept)
    if correct == 0:
        return 0.0
    precision = correct / predicted
    recall = correct / total
    return 100.0 * 2 * precision * recall / (precision + recall)


def evidence_f1(
    pred: Iterable[tuple[int, int]],
    variants: Sequence[Iterable[tuple[int, int]]],
) -> float:
    """Best-variant cell F1 for one statement, in [0, 1].

    Relevant cells are the positive class; the statement scores the
    maximum F1 over its ground-truth variants.
    """
    if not variants:
        raise ValueError("statement has zero evidence variants")
    pred_set = set(pred)
    best = 0.0
    for variant in variants:
        vset = set(variant)
        denom = len(pred_set) + len(vset)
        score = 1.0 if denom == 0 else 2 * len(pred_set & vset) / denom
        best = max(best, score)
    return best


def evidence_f1_corpus(scores: Sequence[float]) -> float:
    """Unweighted mean of per-statement evidence F1, in [0, 1]."""
    return sum(scores) / len(scores) if scores else 0.0


def evidence_f1_micro_cells(
    preds: dict[str, set[tuple[int, int]]],
    golds: dict[str, Sequence[Iterable[tuple[int, int]]]],
) -> float:
    """Alternative aggregate: micro F1 over cells, best variant per
    statement (the variant maximizing the statement's own F1)."""
    tp = fp = fn = 0
    for sid in sorted(golds):
        variants = golds[sid]
        if not variants:
            raise ValueError(f"statement {sid!r} has zero evidence variants")
        pred = preds.get(sid, set())
        best = max(
            (set(v) for v in variants),
            key=lambda vset: evidence_f1(pred, [vset]),
        )
        tp += len(pred & best)
        fp += len(pred - best)
        fn += len(best - pred)
    return _f1(tp, fp, fn)


# ---------------------------------------------------------------------------
# Confusion matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are gold labels, columns predictions, in entailed/refuted/
    unknown order; percentages are row-normalized."""

    counts: tuple[tuple[int, ...], ...]

    @property
    def row_percent(self) -> tuple[tuple[float, ...], ...]:
        out = []
        for row in self.counts:
            total = sum(row)
            out.append(tuple(100.0 * v / total if total else 0.0 for v in row))
        return tuple(out)

    def format(self) -> str:
        labels = [v.value for v in VERDICT_ORDER]
        width = max(len(lab) for lab in labels) + 2
        head = " " * width + "".join(f"{lab:>12}" for lab in labels)
        lines = [head]
        for lab, row, pcts in zip(labels, self.counts, self.row_percent):
            cells = "".join(
                f"{count:>5}({round2(pct):5.1f}%)" for count, pct in zip(row, pcts)
            )
            lines.append(f"{lab:<{width}}" + cells)
        return "\n".join(lines)


def confusion_matrix(
    gold: Sequence[Verdict], pred: Sequence[Verdict]
) -> ConfusionMatrix:
    _check_lengths(gold, pred)
    index = {v: i for i, v in enumerate(VERDICT_ORDER)}
    counts = [[0] * 3 for _ in range(3)]
    for g, p in zip(gold, pred):
        counts[index[g]][index[p]] += 1
    return ConfusionMatrix(counts=tuple(tuple(row) for row in counts))


# ---------------------------------------------------------------------------
# Long-input buckets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BucketReport:
    """Sample distribution and per-bucket metrics split at a length
    boundary (pre-truncation sequence lengths)."""

    boundary: int
    counts: tuple[int, int]            # (<= boundary, > boundary)
    metrics: dict[str, tuple[float | None, float | None]] = field(
        default_factory=dict
    )

    @property
    def percentages(self) -> tuple[float, float]:
        total = sum(self.counts)
        if total == 0:
            return (0.0, 0.0)
        return (100.0 * self.counts[0] / total, 100.0 * self.counts[1] / total)

    def format(self) -> str:
        short = f"Length(<={self.boundary})"
        long = f"Length(>{self.boundary})"
        name_w = max(
            [len("samples")] + [len(name) for name in self.metrics]
        ) + 2
        lines = [f"{'':<{name_w}}{short:>18}{long:>18}"]
        pcts = self.percentages
        sample_cells = [
            f"{n}({round2(p):.2f}%)" for n, p in zip(self.counts, pcts)
        ]
        lines.append(
            f"{'samples':<{name_w}}{sample_cells[0]:>18}{sample_cells[1]:>18}"
        )
        for name, (a, b) in self.metrics.items():
            cell_a = "—" if a is None else f"{round2(a):.2f}"
            cell_b = "—" if b is None else f"{round2(b):.2f}"
            lines.append(f"{name:<{name_w}}{cell_a:>18}{cell_b:>18}")
        return "\n".join(lines)


def length_bucket_report(
    full_lengths: Sequence[int],
    gold: Sequence,
    pred: Sequence,
    metric_fns: dict[str, Callable[[Sequence, Sequence], float | None]],
    boundary: int = 512,
) -> BucketReport:
    """Split statements at the length boundary and score each bucket.

    ``metric_fns`` map a metric name to a function of (gold subset,
    pred subset); empty buckets report None (rendered as a dash).
    """
    _check_lengths(gold, pred)
    if len(full_lengths) != len(gold):
        raise ValueError("full_lengths must align with gold/pred")
    short_idx = [i for i, n in enumerate(full_lengths) if n <= boundary]
    long_idx = [i for i, n in enumerate(full_lengths) if n > boundary]
    metrics: dict[str, tuple[float | None, float | None]] = {}
    for name, fn in metric_fns.items():
        values: list[float | None] = []
        for idx in (short_idx, long_idx):
            if not idx:
                values.append(None)
            else:
                values.append(
                    fn([gold[i] for i in idx], [pred[i] for i in idx])
                )
        metrics[name] = (values[0], values[1])
    return BucketReport(
        boundary=boundary,
        counts=(len(short_idx), len(long_idx)),
        metrics=metrics,
    )


# ---------------------------------------------------------------------------
# Reference implementations (independent oracle path)
# ---------------------------------------------------------------------------

def f1_micro_3way_reference(
    gold: Sequence[Verdict], pred: Sequence[Verdict]
) -> float:
    """Micro F1 from pooled per-class TP/FP/FN counts, as a percentage."""
    _check_lengths(gold, pred)
    tp = fp = fn = 0
    for label in VERDICT_ORDER:
        for g, p in zip(gold, pred):
            if p == label and g == label:
                tp += 1
            elif p == label and g != label:
                fp += 1
            elif g == label and p != label:
                fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def f1_micro_2way_reference(
    gold: Sequence[Verdict], pred: Sequence[Verdict]
) -> float:
    """Two-way micro F1 recomputed per the metric's verbal definition."""
    _check_lengths(gold, pred)
    scored = Counter()
    for g, p in zip(gold, pred):
        if g is Verdict.UNKNOWN:
            continue
        scored["gold"] += 1
        if p is not Verdict.UNKNOWN:
            scored["predicted"] += 1
        if p == g:
            scored["hit"] += 1
    if scored["gold"] == 0 and scored["predicted"] == 0:
        return 0.0
    p = scored["hit"] / scored["predicted"] if scored["predicted"] else 0.0
    r = scored["hit"] / scored["gold"] if scored["gold"] else 0.0
    return 100.0 * (2 * p * r / (p + r) if p + r else 0.0)


def evidence_f1_reference(
    pred: Iterable[tuple[int, int]],
    variants: Sequence[Iterable[tuple[int, int]]],
) -> float:
    """Best-variant evidence F1 via explicit precision/recall."""
    if not variants:
        raise ValueError("statement has zero evidence variants")
    pred_set = set(pred)
    best = 0.0
    for variant in variants:
        vset = set(variant)
        if not pred_set and not vset:
            best = max(best, 1.0)
            continue
        hits = sum(1 for cell in pred_set if cell in vset)
        precision = hits / len(pred_set) if pred_set else 0.0
        recall = hits / len(vset) if vset else 0.0
        if precision + recall:
            best = max(best, 2 * precision * recall / (precision + recall))
    return best
