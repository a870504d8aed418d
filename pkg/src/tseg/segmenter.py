"""Unsupervised topic segmentation of dialogues.

Two segmenters live here. The primary one greedily scans utterance
intervals: from the current start it grows candidate centers on a jump
grid, scores each center by its maximum cosine similarity to the
neighboring context windows, and cuts at the least-similar candidate when
that similarity falls at or below a threshold. The baseline is classic
TextTiling over pseudo-sentences with depth scoring.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .corpus import Dialogue, TopicSegmentation
from .encoders import cosine_flagged, encode

log = logging.getLogger(__name__)


class SegmenterError(ValueError):
    pass


@dataclass(frozen=True)
class SegmenterConfig:
    """Scan parameters: candidate range, jump step, context window, cut threshold."""

    max_range: int = 8
    jump: int = 2
    context_window: int = 2
    cost_threshold: float = 0.6

    def __post_init__(self):
        if self.jump < 1:
            raise SegmenterError(f"jump must be >= 1, got {self.jump}")
        if self.max_range < self.jump:
            raise SegmenterError(
                f"max_range ({self.max_range}) must be >= jump ({self.jump})")
        if self.context_window < 1:
            raise SegmenterError(f"context_window must be >= 1, got {self.context_window}")
        if not -1.0 <= self.cost_threshold <= 1.0:
            raise SegmenterError(
                f"cost_threshold must lie in [-1, 1], got {self.cost_threshold}")


def candidate_cost(encoder, center, left, right,
                   center_keys=None, left_keys=None, right_keys=None) -> tuple[float, bool]:
    """Cost of cutting after a candidate center segment.

    ``center``/``left``/``right`` are lists of per-utterance token lists;
    absent sides are ``None``. The cost is the maximum similarity to the
    available sides; with no side at all it is ``-inf`` (a forced cut).
    Returns ``(cost, degenerate)`` where ``degenerate`` means every
    computed similarity came from a zero-norm encoding.
    """
    if left is None and right is None:
        return float("-inf"), False
    center_vec = encode(encoder, center, keys=center_keys)
    sims = []
    degenerate = True
    for side, keys in ((left, left_keys), (right, right_keys)):
        if side is None:
            continue
        side_vec = encode(encoder, side, keys=keys)
        sim, flag = cosine_flagged(center_vec, side_vec)
        sims.append(sim)
        degenerate = degenerate and flag
    return max(sims), degenerate


def segment_dialogue(dialogue: Dialogue, encoder,
                     config: SegmenterConfig = SegmenterConfig()) -> TopicSegmentation:
    """Greedy left-to-right topic segmentation of one dialogue.

    From start ``i`` (1-based), candidate centers span ``jump, 2*jump, ...``
    utterances up to ``min(max_range, n-i+1)``; each is scored against up
    to ``context_window`` utterances on either side. The lowest-cost
    candidate wins (ties to the shortest); a cut is recorded when its cost
    is at or below the threshold, otherwise the scanned utterances extend
    the open segment and the scan advances by ``max_range``.

    A candidate with neither side available cannot outbid candidates with
    real context; it forces a cut only when it is the only candidate. If
    every candidate is degenerate (zero-norm encodings throughout), the cut
    falls at the largest evaluated candidate.
    """
    tokens = [list(u.tokens) for u in dialogue.utterances]
    keys = [(dialogue.id, idx) for idx in range(len(tokens))]
    n = len(tokens)
    d = config.context_window
    boundaries: list[int] = []

    i = 1
    while i <= n:
        left = tokens[max(0, i - 1 - d):i - 1] or None
        left_keys = keys[max(0, i - 1 - d):i - 1] or None
        evaluated: list[tuple[int, float, bool]] = []  # (j, cost, degenerate)
        max_j = min(config.max_range, n - i + 1)
        for j in range(config.jump, max_j + 1, config.jump):
            center = tokens[i - 1:i - 1 + j]
            center_keys = keys[i - 1:i - 1 + j]
            right = tokens[i - 1 + j:i - 1 + j + d] or None
            right_keys = keys[i - 1 + j:i - 1 + j + d] or None
            cost, degenerate = candidate_cost(
                encoder, center, left, right,
                center_keys=center_keys, left_keys=left_keys, right_keys=right_keys)
            evaluated.append((j, cost, degenerate))

        if not evaluated:
            break  # trailing utterances shorter than one jump close the final segment

        contextual = [(j, cost) for j, cost, _ in evaluated if cost != float("-inf")]
        if not contextual:
            # sole candidate covers the rest of the dialogue with no context: forced cut
            best_j = evaluated[-1][0]
            cut = True
        elif all(deg for _, cost, deg in evaluated if cost != float("-inf")):
            # nothing but zero-norm encodings: cut at the largest evaluated candidate
            best_j = evaluated[-1][0]
            cut = True
        else:
            best_j, best_cost = min(contextual, key=lambda jc: (jc[1], jc[0]))
            cut = best_cost <= config.cost_threshold

        if cut:
            boundary = i + best_j - 1
            if boundary < n:
                boundaries.append(boundary)
            i += best_j
        else:
            i += config.max_range

    return TopicSegmentation(dialogue_id=dialogue.id, boundaries=tuple(boundaries))


# ---------------------------------------------------------------------------
# TextTiling baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextTilingConfig:
    """Pseudo-sentence length, peak-search window, block size, cutoff policy.

    ``window_size`` bounds how far the depth-score peak search walks on
    each side of a gap. The cutoff follows the mean-minus-half-stddev rule.
    """

    pseudo_sentence_len: int = 10
    window_size: int = 6
    block_size: int = 6
    cutoff_policy: str = "mean-minus-half-std"

    def __post_init__(self):
        if self.pseudo_sentence_len < 1 or self.window_size < 1 or self.block_size < 1:
            raise SegmenterError("TextTiling sizes must be >= 1")
        if self.cutoff_policy != "mean-minus-half-std":
            raise SegmenterError(f"unknown cutoff policy {self.cutoff_policy!r}")


def _block_similarity(blocks_left, blocks_right, embedding_table):
    from .encoders import EmbeddingEncoder, TfEncoder

    if embedding_table is None:
        enc = TfEncoder()
    else:
        enc = EmbeddingEncoder(embedding_table)
    a = enc.encode([blocks_left])
    b = enc.encode([blocks_right])
    return cosine_flagged(a, b)[0]


def texttiling(dialogue: Dialogue, config: TextTilingConfig = TextTilingConfig(),
               embedding_table=None) -> TopicSegmentation:
    """TextTiling over the dialogue's token stream, mapped back to utterance cuts.

    Tokens from all utterances are concatenated into pseudo-sentences of
    fixed length; gap similarities between adjacent blocks (term-frequency
    cosine, or embedding-mean cosine when a table is given) yield depth
    scores, and gaps deeper than the cutoff become boundaries snapped to
    the nearest utterance edge.
    """
    n = len(dialogue.utterances)
    flat: list[str] = []
    for utt in dialogue.utterances:
        flat.extend(utt.tokens)
    w = config.pseudo_sentence_len
    pseudo = [flat[p:p + w] for p in range(0, len(flat), w)]
    if n < 2 or len(pseudo) < 2:
        return TopicSegmentation(dialogue_id=dialogue.id, boundaries=())

    bs = config.block_size
    n_gaps = len(pseudo) - 1
    sims = np.empty(n_gaps, dtype=np.float64)
    for g in range(n_gaps):
        left = [tok for ps in pseudo[max(0, g - bs + 1):g + 1] for tok in ps]
        right = [tok for ps in pseudo[g + 1:g + 1 + bs] for tok in ps]
        sims[g] = _block_similarity(left, right, embedding_table)

    win = config.window_size
    depths = np.zeros(n_gaps, dtype=np.float64)
    for g in range(n_gaps):
        lpeak = sims[g]
        for s in sims[max(0, g - win):g][::-1]:
            if s >= lpeak:
                lpeak = s
            else:
                break
        rpeak = sims[g]
        for s in sims[g + 1:g + 1 + win]:
            if s >= rpeak:
                rpeak = s
            else:
                break
        depths[g] = (lpeak - sims[g]) + (rpeak - sims[g])

    cutoff = float(np.mean(depths) - np.std(depths) / 2.0)
    chosen = [g for g in range(n_gaps) if depths[g] > cutoff]

    # utterance boundary b sits at token offset cum[b]; snap each chosen gap there
    cum = np.cumsum([len(u.tokens) for u in dialogue.utterances])
    boundaries: set[int] = set()
    for g in chosen:
        gap_offset = (g + 1) * w
        best = min(range(1, n), key=lambda b: (abs(int(cum[b - 1]) - gap_offset), b))
        boundaries.add(best)
    return TopicSegmentation(dialogue_id=dialogue.id, boundaries=tuple(sorted(boundaries)))
