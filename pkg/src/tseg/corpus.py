"""Dialogue corpus data model, tokenization, and file formats.

Boundary convention, fixed here and inherited by every other module:
a boundary index ``b`` means "cut between utterance ``b`` and ``b+1``",
1-based, so valid boundaries lie in ``1..n-1`` and a dialogue with ``k``
boundaries has ``k+1`` segments.

File formats:

* dialogues: JSONL, one object per line with keys ``id``,
  ``utterances`` (list of ``{"speaker": str|null, "text": str}``) and
  ``gold_boundaries`` (list of ints or null).
* segmentations: JSONL with keys ``dialogue_id`` and ``boundaries``.
* retrieval data: TSV, ``label \\t utt_1 \\t ... \\t utt_k \\t response``.

All files are UTF-8.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

Tokenizer = Callable[[str], list]


class CorpusError(ValueError):
    """Malformed corpus file or violated data invariant."""


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split on non-alphanumeric runs.

    Punctuation tokens are dropped entirely; the result is deterministic
    and idempotent on already-tokenized lowercase words.
    """
    return _TOKEN_RE.findall(text.lower())


def _validate_boundaries(boundaries: Sequence[int], n: int | None, owner: str) -> tuple[int, ...]:
    out = tuple(int(b) for b in boundaries)
    prev = 0
    for b in out:
        if b <= prev:
            raise CorpusError(
                f"{owner}: boundaries must be strictly increasing positive integers, got {list(out)}"
            )
        prev = b
    if n is not None and out and out[-1] > n - 1:
        raise CorpusError(
            f"{owner}: boundary {out[-1]} out of range for {n} utterances (max {n - 1})"
        )
    return out


@dataclass(frozen=True)
class Utterance:
    """One conversational turn; ``tokens`` is derived from ``text``."""

    speaker: str | None
    text: str
    tokens: tuple[str, ...]

    @classmethod
    def from_text(cls, text: str, speaker: str | None = None,
                  tokenizer: Tokenizer = tokenize) -> "Utterance":
        return cls(speaker=speaker, text=text, tokens=tuple(tokenizer(text)))


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple[Utterance, ...]
    gold_boundaries: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.utterances:
            raise CorpusError(f"dialogue {self.id!r}: needs at least one utterance")
        if self.gold_boundaries is not None:
            object.__setattr__(
                self, "gold_boundaries",
                _validate_boundaries(self.gold_boundaries, len(self.utterances),
                                     f"dialogue {self.id!r}"))

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass(frozen=True)
class TopicSegmentation:
    """Sorted boundary set over one dialogue; segment count = len(boundaries) + 1."""

    dialogue_id: str
    boundaries: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "boundaries",
            _validate_boundaries(self.boundaries, None, f"segmentation {self.dialogue_id!r}"))

    def segment_count(self) -> int:
        return len(self.boundaries) + 1


@dataclass(frozen=True)
class RetrievalExample:
    """(context, candidate response, 0/1 label) triple for response selection."""

    context: tuple[Utterance, ...]
    response: Utterance
    label: int

    def __post_init__(self):
        if not self.context:
            raise CorpusError("retrieval example: context must be non-empty")
        if self.label not in (0, 1):
            raise CorpusError(f"retrieval example: label must be 0 or 1, got {self.label!r}")


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def load_dialogues(path, tokenizer: Tokenizer = tokenize) -> list[Dialogue]:
    dialogues: list[Dialogue] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "id" not in obj or "utterances" not in obj:
                raise CorpusError(f"{path}:{lineno}: record needs 'id' and 'utterances'")
            utts = tuple(
                Utterance.from_text(u.get("text", ""), u.get("speaker"), tokenizer)
                for u in obj["utterances"]
            )
            gold = obj.get("gold_boundaries")
            try:
                dlg = Dialogue(id=str(obj["id"]), utterances=utts,
                               gold_boundaries=tuple(gold) if gold is not None else None)
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            if dlg.id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate dialogue id {dlg.id!r}")
            seen.add(dlg.id)
            dialogues.append(dlg)
    return dialogues


def write_dialogues(path, dialogues: Iterable[Dialogue]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for dlg in dialogues:
            obj = {
                "id": dlg.id,
                "utterances": [{"speaker": u.speaker, "text": u.text} for u in dlg.utterances],
                "gold_boundaries": list(dlg.gold_boundaries) if dlg.gold_boundaries is not None else None,
            }
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def read_segmentations(path) -> list[TopicSegmentation]:
    out: list[TopicSegmentation] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(TopicSegmentation(dialogue_id=str(obj["dialogue_id"]),
                                             boundaries=tuple(obj["boundaries"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad segmentation record: {exc}") from exc
    return out


def write_segmentations(path, segmentations: Iterable[TopicSegmentation]) -> None:
    rows = []
    for seg in segmentations:
        _validate_boundaries(seg.boundaries, None, f"segmentation {seg.dialogue_id!r}")
        rows.append(json.dumps({"dialogue_id": seg.dialogue_id,
                                "boundaries": list(seg.boundaries)}, sort_keys=True))
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row + "\n")


def load_retrieval_tsv(path, tokenizer: Tokenizer = tokenize) -> list[RetrievalExample]:
    """Read ``label \\t utt_1 \\t ... \\t response`` rows.

    The last field is the candidate response, everything between the label
    and it is the context in order.
    """
    examples: list[RetrievalExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise CorpusError(
                    f"{path}:{lineno}: need at least 3 tab-separated fields, got {len(fields)}")
            if fields[0] not in ("0", "1"):
                raise CorpusError(f"{path}:{lineno}: label must be 0 or 1, got {fields[0]!r}")
            context = tuple(Utterance.from_text(t, tokenizer=tokenizer) for t in fields[1:-1])
            response = Utterance.from_text(fields[-1], tokenizer=tokenizer)
            examples.append(RetrievalExample(context=context, response=response,
                                             label=int(fields[0])))
    return examples


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

def splice_synthetic_corpus(dialogues: Sequence[Dialogue], seed: int,
                            topics_per_dialogue: tuple[int, int] = (2, 4),
                            count: int | None = None,
                            id_prefix: str = "spliced") -> list[Dialogue]:
    """Concatenate randomly drawn single-topic dialogues into multi-topic ones.

    Gold boundaries are placed at every junction. Each output draws its
    sources without replacement, so ``len(dialogues)`` must cover the
    largest topic count. Deterministic under a fixed seed.
    """
    lo, hi = topics_per_dialogue
    if lo < 1 or hi < lo:
        raise CorpusError(f"invalid topics_per_dialogue range ({lo}, {hi})")
    if len(dialogues) < hi:
        raise CorpusError(
            f"need at least {hi} source dialogues for up to {hi} topics, got {len(dialogues)}")
    rng = random.Random(seed)
    n_out = count if count is not None else len(dialogues)
    out: list[Dialogue] = []
    for i in range(n_out):
        k = rng.randint(lo, hi)
        parts = rng.sample(list(dialogues), k)
        utterances: list[Utterance] = []
        boundaries: list[int] = []
        for part in parts[:-1]:
            utterances.extend(part.utterances)
            boundaries.append(len(utterances))
        utterances.extend(parts[-1].utterances)
        out.append(Dialogue(id=f"{id_prefix}-{i:04d}", utterances=tuple(utterances),
                            gold_boundaries=tuple(boundaries)))
    return out


def generate_topic_pool(n_topics: int, seed: int,
                        utterance_counts: Sequence[int] = (4, 5, 6, 7, 8),
                        vocab_size: int = 30,
                        tokens_per_utterance: tuple[int, int] = (5, 10)) -> list[Dialogue]:
    """Build single-topic dialogues with mutually disjoint vocabularies.

    Topic ``t`` draws its tokens from a private ``vocab_size``-word
    vocabulary, so term-frequency cosine across topics is exactly zero.
    """
    rng = random.Random(seed)
    pool: list[Dialogue] = []
    for t in range(n_topics):
        vocab = [f"t{t}w{j}" for j in range(vocab_size)]
        n_utt = rng.choice(list(utterance_counts))
        utts = []
        for u in range(n_utt):
            toks = rng.choices(vocab, k=rng.randint(*tokens_per_utterance))
            utts.append(Utterance.from_text(" ".join(toks), speaker="AB"[u % 2]))
        pool.append(Dialogue(id=f"topic-{t:04d}", utterances=tuple(utts)))
    return pool
