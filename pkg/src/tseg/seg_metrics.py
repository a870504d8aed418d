"""Segmentation evaluation: MAE on segment counts, WindowDiff, boundary F1.

WindowDiff slides a window of ``k`` utterances and penalizes (by 1) every
window whose reference and predicted boundary counts differ; boundaries
count when they fall strictly inside the window span, i.e. boundary ``b``
is inside window ``(x, x+k)`` iff ``x <= b <= x+k-1``. F1 uses exact
boundary positions with no tolerance.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import Dialogue, TopicSegmentation


class SegMetricsError(ValueError):
    pass


def mae(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    """Mean absolute difference in segment counts over (pred, gold) pairs."""
    if not pairs:
        raise SegMetricsError("mae: no dialogues to evaluate")
    total = 0
    for pred, gold in pairs:
        total += abs((len(pred) + 1) - (len(gold) + 1))
    return total / len(pairs)


def _count_inside(boundaries: Sequence[int], lo: int, hi: int) -> int:
    """Number of boundaries b with lo <= b <= hi, for a sorted sequence."""
    return bisect_right(boundaries, hi) - bisect_left(boundaries, lo)


def window_diff(pred: Sequence[int], gold: Sequence[int], n: int, k: int = 4) -> float:
    """WindowDiff between two boundary sets over an ``n``-utterance dialogue."""
    if k < 1:
        raise SegMetricsError(f"window_diff: k must be >= 1, got {k}")
    for name, bounds in (("pred", pred), ("gold", gold)):
        prev = 0
        for b in bounds:
            if b <= prev or b > n - 1:
                raise SegMetricsError(
                    f"window_diff: invalid {name} boundaries {list(bounds)} for n={n}")
            prev = b
    pred = sorted(pred)
    gold = sorted(gold)
    if n <= k:
        return 0.0 if _count_inside(pred, 1, n - 1) == _count_inside(gold, 1, n - 1) else 1.0
    penalties = 0
    for start in range(1, n - k + 1):
        if _count_inside(pred, start, start + k - 1) != _count_inside(gold, start, start + k - 1):
            penalties += 1
    return penalties / (n - k)


def boundary_f1(pred: Sequence[int], gold: Sequence[int]) -> tuple[float, float, float]:
    """Exact-position precision, recall, and F1 of boundary sets."""
    pred_set, gold_set = set(pred), set(gold)
    hits = len(pred_set & gold_set)
    if pred_set:
        precision = hits / len(pred_set)
    else:
        precision = 1.0 if not gold_set else 0.0
    if gold_set:
        recall = hits / len(gold_set)
    else:
        recall = 1.0 if not pred_set else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


@dataclass
class SegEvalReport:
    """Corpus-level segmentation scores with a per-dialogue breakdown.

    Precision/recall/F1 are micro-averaged over pooled boundary counts;
    WindowDiff is the unweighted mean over dialogues.
    """

    mae: float
    window_diff: float
    precision: float
    recall: float
    f1: float
    wd_window: int
    per_dialogue: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "window_diff": self.window_diff,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "wd_window": self.wd_window,
            "per_dialogue": self.per_dialogue,
        }


def evaluate_segmentations(predictions: Sequence[TopicSegmentation],
                           gold_dialogues: Sequence[Dialogue],
                           wd_window: int = 4) -> SegEvalReport:
    """Pair predictions with gold dialogues by id and compute all metrics."""
    gold_by_id = {d.id: d for d in gold_dialogues}
    pred_by_id = {p.dialogue_id: p for p in predictions}
    missing_gold = sorted(set(pred_by_id) - set(gold_by_id))
    missing_pred = sorted(g for g in gold_by_id if g not in pred_by_id)
    if missing_gold or missing_pred:
        raise SegMetricsError(
            f"id mismatch: predictions without gold {missing_gold}, "
            f"gold without predictions {missing_pred}")
    if not predictions:
        raise SegMetricsError("no predictions to evaluate")

    rows = []
    wd_sum = 0.0
    abs_diff_sum = 0
    hits = pred_total = gold_total = 0
    for dlg_id in sorted(gold_by_id):
        dlg = gold_by_id[dlg_id]
        gold = list(dlg.gold_boundaries or ())
        pred = list(pred_by_id[dlg_id].boundaries)
        n = len(dlg.utterances)
        wd = window_diff(pred, gold, n, wd_window)
        p, r, f1 = boundary_f1(pred, gold)
        wd_sum += wd
        abs_diff_sum += abs(len(pred) - len(gold))
        hits += len(set(pred) & set(gold))
        pred_total += len(pred)
        gold_total += len(gold)
        rows.append({
            "dialogue_id": dlg_id, "n_utterances": n,
            "pred_boundaries": pred, "gold_boundaries": gold,
            "window_diff": wd, "precision": p, "recall": r, "f1": f1,
        })

    count = len(rows)
    precision = hits / pred_total if pred_total else (1.0 if gold_total == 0 else 0.0)
    recall = hits / gold_total if gold_total else (1.0 if pred_total == 0 else 0.0)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return SegEvalReport(mae=abs_diff_sum / count, window_diff=wd_sum / count,
                         precision=precision, recall=recall, f1=f1,
                         wd_window=wd_window, per_dialogue=rows)
