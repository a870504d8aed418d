"""Ranking metrics over grouped candidate lists: R_n@k, MAP, MRR, P@1.

Candidates are sorted by score descending with ties broken by original
index, so every metric is invariant under strictly monotone score
transformations. R_n@k gives proportional credit when a group has several
positives (positives found in the top k over total positives), which
reduces to the usual 0/1 rule for single-positive groups.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

log = logging.getLogger(__name__)


class RetrievalMetricsError(ValueError):
    pass


@dataclass(frozen=True)
class RankedGroup:
    """One context's candidate pool: parallel score and 0/1 label lists."""

    group_id: str
    scores: tuple[float, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.scores) != len(self.labels):
            raise RetrievalMetricsError(
                f"group {self.group_id!r}: {len(self.scores)} scores vs "
                f"{len(self.labels)} labels")
        if not self.scores:
            raise RetrievalMetricsError(f"group {self.group_id!r}: empty candidate list")
        if any(lab not in (0, 1) for lab in self.labels):
            raise RetrievalMetricsError(f"group {self.group_id!r}: labels must be 0/1")

    def ranked_labels(self) -> list[int]:
        order = sorted(range(len(self.scores)), key=lambda i: (-self.scores[i], i))
        return [self.labels[i] for i in order]


def _groups_with_positives(groups: Sequence[RankedGroup], metric: str) -> list[RankedGroup]:
    kept = []
    for g in groups:
        if any(g.labels):
            kept.append(g)
        else:
            log.warning("%s: group %r has no positive candidate, excluded", metric, g.group_id)
    if not kept:
        raise RetrievalMetricsError(f"{metric}: no group has a positive candidate")
    return kept


def recall_at_k(groups: Sequence[RankedGroup], k: int) -> float:
    kept = _groups_with_positives(groups, "recall_at_k")
    total = 0.0
    for g in kept:
        if k > len(g.scores):
            raise RetrievalMetricsError(
                f"recall_at_k: k={k} exceeds group {g.group_id!r} size {len(g.scores)}")
        ranked = g.ranked_labels()
        total += sum(ranked[:k]) / sum(ranked)
    return total / len(kept)


def mean_average_precision(groups: Sequence[RankedGroup]) -> float:
    kept = _groups_with_positives(groups, "mean_average_precision")
    total = 0.0
    for g in kept:
        ranked = g.ranked_labels()
        hits = 0
        ap = 0.0
        for rank, lab in enumerate(ranked, start=1):
            if lab:
                hits += 1
                ap += hits / rank
        total += ap / hits
    return total / len(kept)


def mean_reciprocal_rank(groups: Sequence[RankedGroup]) -> float:
    kept = _groups_with_positives(groups, "mean_reciprocal_rank")
    total = 0.0
    for g in kept:
        ranked = g.ranked_labels()
        first = next(rank for rank, lab in enumerate(ranked, start=1) if lab)
        total += 1.0 / first
    return total / len(kept)


def p_at_1(groups: Sequence[RankedGroup]) -> float:
    kept = _groups_with_positives(groups, "p_at_1")
    return sum(g.ranked_labels()[0] for g in kept) / len(kept)


# ---------------------------------------------------------------------------
# scores file: group_id TAB candidate_index TAB score TAB label
# ---------------------------------------------------------------------------

def load_scores_file(path) -> list[RankedGroup]:
    rows: dict[str, list[tuple[int, float, int]]] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise RetrievalMetricsError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
            gid, idx_s, score_s, label_s = fields
            try:
                idx, score, label = int(idx_s), float(score_s), int(label_s)
            except ValueError as exc:
                raise RetrievalMetricsError(f"{path}:{lineno}: {exc}") from exc
            if gid not in rows:
                rows[gid] = []
                order.append(gid)
            rows[gid].append((idx, score, label))
    groups = []
    for gid in order:
        entries = sorted(rows[gid])
        groups.append(RankedGroup(group_id=gid,
                                  scores=tuple(score for _, score, _ in entries),
                                  labels=tuple(label for _, _, label in entries)))
    return groups
